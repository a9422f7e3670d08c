// SPDX-License-Identifier: Apache-2.0
//
// Logit-averaged ensembles of independently trained members, their
// evaluation, weight-space soups and the ensemble hyperparameter heuristic.
//
// Averaging raw logits and averaging log-probabilities give the same softmax:
// log_softmax(z) = z - lse(z), so the mean of member log-probs differs from
// the mean of member logits by a constant per position. Either way the result
// is the renormalized geometric mean of the member distributions, whose
// normalizer is <= 1 by AM-GM. That bounds ensemble NLL by the mean member NLL.

#pragma once

#include "dclab/hypersearch.hpp"
#include "dclab/ledger.hpp"
#include "dclab/model.hpp"
#include "dclab/trainer.hpp"

#include <span>
#include <string>
#include <vector>

namespace dclab::ensemble {

struct EnsembleSpec {
    std::vector<std::string> member_keys;
    model::ModelConfig member_config;

    std::size_t k() const noexcept { return member_keys.size(); }
    std::size_t total_params() const { return member_config.param_count() * k(); }
    /// Keys sorted; the ledger key is a digest of (sorted keys, validation hash).
    std::string ledger_key(const std::string& validation_hash) const;

    ojson to_json() const;
    static EnsembleSpec from_json(const ojson& j);
};

/// Renormalized geometric mean of member distributions given their logit rows.
std::vector<double> logit_avg_probs(std::span<const std::vector<double>> member_logit_rows);

/// Loads a member checkpoint by ledger key; MissingMember when the run is not
/// in the ledger, failed, or its checkpoint is absent.
model::Parameters<float> load_member(const std::string& key, const trainer::RunEnv& env);

struct EnsembleResult {
    EnsembleSpec spec;
    std::string ledger_key;
    double loss = 0.0;
    std::vector<double> member_losses;  // in sorted key order
    double mean_member_loss = 0.0;
    trainer::Hyper member_hyper;
    std::size_t d = 0;
    std::string recipe_tag = "ensemble";
    bool cached = false;

    ojson to_json() const;
    static EnsembleResult from_json(const ojson& j);
};

/// Validates members (same config and hyperparameters, all present), evaluates
/// the logit-averaged model on env's validation set in sorted-key order and
/// appends a K > 1 record to the ledger. K == 1 records are not ledgered, the
/// member's run record already holds that loss. reuse_cached false always
/// recomputes and leaves the ledger alone.
EnsembleResult ensemble_eval(const EnsembleSpec& spec, const trainer::RunEnv& env, bool reuse_cached = true);

/// Trains (or fetches) K members of `base` that differ only in the seeds
/// selected by mode; member i uses base seed + i.
std::vector<trainer::RunRecord> train_members(const trainer::RunSpec& base, int k, trainer::SeedMode mode,
                                              const trainer::RunEnv& env);

/// Builds the EnsembleSpec for already trained members.
EnsembleSpec spec_for(std::span<const trainer::RunRecord> members);

/// Ensemble and mean-member NLL per evaluation batch of `batch_windows` windows.
struct BatchComparison {
    std::vector<double> ensemble_nll;
    std::vector<double> mean_member_nll;
};
BatchComparison compare_batches(std::span<const model::Parameters<float>* const> members,
                                const corpus::WindowSet& windows, std::size_t batch_windows = 16);

/// Element-wise mean of member weights; ShapeMismatch on differing layouts.
model::Parameters<float> soup(std::span<const model::Parameters<float>* const> members);

struct HeuristicHyper {
    trainer::Hyper hyper;
    bool clamped = false;  // epochs hit the grid maximum
};

/// Same lr, doubled epochs clamped to the epoch axis maximum, halved wd snapped
/// to the nearest wd-axis value (ties go to the lower value).
HeuristicHyper heuristic_ensemble_hyper(const trainer::Hyper& certified,
                                        const search::GridAxes& axes = search::GridAxes::paper());

}  // namespace dclab::ensemble
