// SPDX-License-Identifier: Apache-2.0
//
// The lab verbs behind the dclab command line. Each verb works on an open
// workspace, trains only what the ledger does not already hold, prints a
// short human summary to `out` and, where it produces a report, writes the
// report document plus its CSV and SVG renderings under <workspace>/reports.
//
// Report documents are plain JSON. Every loss they quote either sits next to
// the ledger key it came from ("ledger_key" + "val_loss") or is a parameter of
// a fit stored in the same document, and every key the report depends on is
// listed under "ledger_keys". Documents hold no timestamps or cache flags, so
// rerunning a verb against the same ledger rewrites identical bytes.

#pragma once

#include "dclab/distill.hpp"
#include "dclab/hypersearch.hpp"
#include "dclab/report.hpp"
#include "dclab/trainer.hpp"
#include "dclab/workspace.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dclab::lab {

/// Optional per-field overrides on top of a hyperparameter set.
struct HyperOverride {
    std::optional<double> lr;
    std::optional<int> epochs;
    std::optional<double> wd;
    std::optional<int> batch;

    trainer::Hyper apply(trainer::Hyper h) const;
};

// run ------------------------------------------------------------------------

struct RunOutcome {
    std::vector<std::string> keys;           // one per expanded run, in order
    std::vector<std::string> ensemble_keys;  // when members > 1, one per sweep point
    std::size_t trained = 0;
    std::size_t cached = 0;
    std::size_t failed = 0;  // diverged runs (still ledgered)
};

RunOutcome cmd_run(Workspace& ws, const RunConfig& cfg, std::ostream& out);

// search ---------------------------------------------------------------------

struct SearchArgs {
    std::size_t d = 0;
    std::string model = "desk";
    search::Recipe recipe = search::Recipe::Regularized;
    bool exhaustive = false;
    std::size_t budget = 200;
    std::optional<trainer::Hyper> seed_guess;
    std::optional<search::GridAxes> grid;  // default: the workspace grid
};

/// Writes reports/search-<recipe>-D<d>-<model>[-exhaustive].json.
search::RecipeSearch cmd_search(Workspace& ws, const SearchArgs& args, std::ostream& out);

// recipe ---------------------------------------------------------------------

struct RecipeArgs {
    std::string recipe;  // standard | regularized | ensemble | joint | distill
    std::vector<std::size_t> d_list;
    std::vector<std::string> models;  // model presets, the N axis
    int k_max = 4;                    // ensemble, joint, distill teacher pool
    int teacher_k = 1;                // distill: members in the teacher
    distill::MixingRatio ratio{1, 1};
    std::uint64_t sample_seed = 0;
    std::string name;                 // report name; default recipe-<recipe>
    std::optional<std::filesystem::path> baseline;  // report whose D-law is the baseline
    std::optional<search::GridAxes> grid;
};

/// Runs the searches, trainings and fits the recipe needs and writes the
/// report. On error a partial report carrying an "error" field is written
/// before the error propagates.
ojson cmd_recipe(Workspace& ws, const RecipeArgs& args, std::ostream& out);

// ensemble -------------------------------------------------------------------

struct EnsembleArgs {
    std::vector<std::string> keys;  // explicit members, or
    std::size_t d = 0;              // train k members of (d, model, hyper)
    std::string model = "desk";
    int k = 0;
    HyperOverride hyper;
    trainer::SeedMode mode = trainer::SeedMode::Both;
    bool soup = false;
    std::string name;  // report name; default ensemble-<ledger key>
};

ojson cmd_ensemble(Workspace& ws, const EnsembleArgs& args, std::ostream& out);

// distill --------------------------------------------------------------------

struct DistillArgs {
    std::size_t d = 0;
    std::string model = "desk";
    std::vector<std::string> teacher_keys;  // default: the regularized optimum
    HyperOverride student_hyper;            // default: the teacher's hyperparameters
    distill::MixingRatio ratio{1, 1};
    std::size_t synth_tokens = 0;  // default: d
    double temperature = 1.0;
    std::uint64_t sample_seed = 0;
    distill::SamplingMode mode = distill::SamplingMode::IndividualMembers;
    bool control = true;  // also train the token-matched no-mixing student
    std::optional<search::GridAxes> grid;
    std::string name;
};

ojson cmd_distill(Workspace& ws, const DistillArgs& args, std::ostream& out);

// fit ------------------------------------------------------------------------

struct FitArgs {
    std::filesystem::path csv;
    std::vector<std::string> tiers;  // innermost first; empty: one law per group
    std::filesystem::path out;       // output prefix; default <csv without extension>-fit
    std::string x_label = "x";
};

/// Needs no workspace. Writes <out>.json, <out>.csv and <out>.svg.
ojson cmd_fit(const FitArgs& args, std::ostream& out);

// report ---------------------------------------------------------------------

/// Writes the CSV and SVG artifacts a report document describes into dir.
std::vector<std::filesystem::path> render_report(const ojson& doc, const std::filesystem::path& dir);

/// Re-renders the given report documents (all under reports/ when empty).
/// With a baseline report, adds an efficiency table of each report's per-D
/// losses against the baseline's data law.
std::vector<std::filesystem::path> cmd_report(Workspace& ws, const std::vector<std::filesystem::path>& reports,
                                              const std::optional<std::filesystem::path>& baseline, std::ostream& out);

/// Efficiency rows of `doc`'s per-D losses against `baseline`'s data law.
std::vector<report::EfficiencyRow> efficiency_rows(const ojson& doc, const ojson& baseline);

// variance -------------------------------------------------------------------

struct VarianceArgs {
    std::size_t d = 0;
    std::string model = "desk";
    std::vector<trainer::SeedMode> modes{trainer::SeedMode::Both, trainer::SeedMode::InitOnly,
                                         trainer::SeedMode::DataOnly};
    int n_seeds = 3;
    HyperOverride hyper;
    std::string name;
};

/// Seed variance per randomness mode plus a K = 2 ensemble per mode.
ojson cmd_variance(Workspace& ws, const VarianceArgs& args, std::ostream& out);

// audit ----------------------------------------------------------------------

struct AuditResult {
    std::size_t reports = 0;
    std::size_t keys = 0;          // distinct keys in the closure
    std::size_t reexecuted = 0;
    std::vector<std::string> problems;

    bool ok() const noexcept { return problems.empty(); }
};

/// Checks that every key the reports cite resolves to a ledger record whose
/// key recomputes from its spec, that members and teachers of cited records
/// are present too, and that quoted losses equal the ledgered ones. With
/// reexecute, every run in the closure is retrained from scratch (ensembles
/// re-evaluated) and must match its ledgered losses bit for bit.
AuditResult cmd_audit(Workspace& ws, bool reexecute, std::ostream& out);

/// Re-runs one ledger record from scratch, without touching the ledger, and
/// tells whether its losses come back bit for bit. On a mismatch `why` says
/// what differed.
bool reexecute_record(Workspace& ws, const ojson& record, std::string* why = nullptr);

/// Paper-scale reference values, only ever shown as labeled annotations.
ojson paper_references(const std::string& topic);

}  // namespace dclab::lab
