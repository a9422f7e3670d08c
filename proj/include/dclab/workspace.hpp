// SPDX-License-Identifier: Apache-2.0
//
// On-disk workspace: frozen validation split, train source, derived pools of
// size D, the run ledger, checkpoints, synthetic pools and reports.
//
//   <root>/workspace.json     settings, model presets, grid
//   <root>/source.pool        train-side token stream (pools are prefixes)
//   <root>/validation.pool    frozen validation windows
//   <root>/ledger.jsonl
//   <root>/checkpoints/  <root>/synth/  <root>/reports/

#pragma once

#include "dclab/corpus.hpp"
#include "dclab/distill.hpp"
#include "dclab/hypersearch.hpp"
#include "dclab/ledger.hpp"
#include "dclab/model.hpp"
#include "dclab/trainer.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dclab::lab {

struct InitOptions {
    std::optional<std::filesystem::path> source_text;  // else synthetic
    std::uint64_t synthetic_seed = 2024;
    std::size_t synthetic_bytes = 1'200'000;
    int context_len = 64;
    std::size_t val_windows = 64;
    search::GridAxes grid = search::GridAxes::desk();
    std::map<std::string, model::ModelConfig> extra_models;  // added to the default presets
};

struct WorkspaceSettings {
    std::string source_kind;  // "text" or "synthetic"
    std::string source_desc;
    int context_len = 64;
    std::size_t val_windows = 64;
    std::string validation_hash;
    std::string source_hash;
    std::size_t source_tokens = 0;
    std::map<std::string, model::ModelConfig> models;  // presets; "desk" always present
    trainer::Hyper default_hyper{3e-3, 4, 0.1, 16};
    search::GridAxes grid = search::GridAxes::desk();

    ojson to_json() const;
    static WorkspaceSettings from_json(const ojson& j);
};

/// Default presets: xs (d 32), desk (d 64), m (d 96); all 2 layers.
std::map<std::string, model::ModelConfig> default_models(int context_len);

class Workspace {
public:
    /// Creates a new workspace; fails if workspace.json already exists.
    static Workspace init(const std::filesystem::path& root, const InitOptions& options);
    static Workspace open(const std::filesystem::path& root);

    const std::filesystem::path& root() const noexcept { return root_; }
    const WorkspaceSettings& settings() const noexcept { return settings_; }
    Ledger& ledger() { return *ledger_; }
    const corpus::ValidationSet& validation() const { return validation_; }

    /// Prefix pool of exactly d tokens from the train source (cached).
    const corpus::TokenPool& pool(std::size_t d);
    std::string pool_name(std::size_t d) const { return "D" + std::to_string(d); }

    model::ModelConfig model(const std::string& preset) const;
    trainer::RunEnv env(std::size_t d);
    distill::DistillEnv distill_env(std::size_t d);
    /// Spec with workspace defaults for pool d and the named model preset.
    trainer::RunSpec base_spec(std::size_t d, const std::string& preset = "desk");

    std::filesystem::path reports_dir() const { return root_ / "reports"; }
    std::filesystem::path checkpoints_dir() const { return root_ / "checkpoints"; }

private:
    Workspace() = default;
    void load();

    std::filesystem::path root_;
    WorkspaceSettings settings_;
    std::unique_ptr<Ledger> ledger_;
    corpus::ValidationSet validation_;
    std::vector<corpus::Token> source_;
    std::map<std::size_t, std::unique_ptr<corpus::TokenPool>> pools_;
};

/// Workspace root from an explicit flag, else $DCLAB_WORKSPACE, else ./workspace.
std::filesystem::path resolve_root(const std::string& flag);

/// Experiment config for the run verb, parsed from YAML:
///
///   pool: 250000              # D, required
///   model: desk               # preset name, or a map of ModelConfig fields
///   hyper: {lr: 3e-3, epochs: 4, wd: 0.1, batch: 16}
///   seeds: {init: 0, data: 0}
///   sweep: {epochs: [1, 2, 4], lr: [...], wd: [...]}   # cartesian product
///   members: 1                # K seeds per point
///   seed_mode: both           # both | init-only | data-only
///
/// Errors carry the line of the offending field.
struct RunConfig {
    std::size_t d = 0;
    std::string model_preset = "desk";
    std::optional<model::ModelConfig> model;
    trainer::Hyper hyper;
    std::uint64_t init_seed = 0;
    std::uint64_t data_seed = 0;
    std::vector<double> sweep_lr;
    std::vector<int> sweep_epochs;
    std::vector<double> sweep_wd;
    int members = 1;
    trainer::SeedMode seed_mode = trainer::SeedMode::Both;
};

RunConfig parse_run_config(const std::string& yaml_text, const trainer::Hyper& defaults);
RunConfig load_run_config(const std::filesystem::path& path, const trainer::Hyper& defaults);

/// Expands the sweep and members into concrete run specs, in a fixed order.
std::vector<trainer::RunSpec> expand_runs(const RunConfig& cfg, Workspace& ws);

}  // namespace dclab::lab
