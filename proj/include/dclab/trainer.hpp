// SPDX-License-Identifier: Apache-2.0
//
// The training routine: AdamW with decoupled weight decay, linear warmup into
// a cosine decay that reaches zero on the final step, global-norm gradient
// clipping, epoched data, validation at the end of the schedule, and ledger
// caching of every completed run.

#pragma once

#include "dclab/corpus.hpp"
#include "dclab/ledger.hpp"
#include "dclab/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dclab::trainer {

struct Hyper {
    double peak_lr = 1e-3;
    int epochs = 1;
    double weight_decay = 0.1;
    int batch_size = 16;

    void validate() const;
    friend bool operator==(const Hyper&, const Hyper&) = default;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

struct TrainOptions {
    double warmup_frac = 0.01;
    double max_grad_norm = 1.0;
    AdamConfig adam;
    int curve_points = 20;
    bool reshuffle_each_epoch = false;
    std::size_t train_eval_windows = 64;  // windows used for final_train_loss
};

/// Identifies the data a run consumed: a train pool of size D plus the frozen
/// validation set it was scored on.
struct PoolRef {
    std::string name;
    std::size_t size_d = 0;
    std::string pool_hash;
    std::string validation_hash;
};

struct RunSpec {
    PoolRef pool;
    model::ModelConfig config;
    Hyper hyper;
    std::uint64_t init_seed = 0;
    std::uint64_t data_seed = 0;
    std::string recipe_tag = "single";
    TrainOptions options;
    ojson extra = ojson::object();  // provenance for derived runs (distillation)

    /// Canonical JSON of every field that influences the result.
    ojson to_json() const;
    static RunSpec from_json(const ojson& j);
    /// Pure function of the spec.
    std::string ledger_key() const;
};

struct CurvePoint {
    std::size_t step = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

enum class RunStatus { Ok, Failed };

struct RunRecord {
    RunSpec spec;
    std::string ledger_key;
    RunStatus status = RunStatus::Ok;
    double final_val_loss = 0.0;    // +inf for failed runs
    double final_train_loss = 0.0;  // +inf for failed runs
    std::vector<CurvePoint> loss_curve;
    std::size_t tokens_seen = 0;
    std::size_t total_steps = 0;
    std::optional<std::size_t> fail_step;
    std::string message;
    bool cached = false;  // not persisted; true when served from the ledger

    bool ok() const noexcept { return status == RunStatus::Ok; }
    /// Loss used by searches: +inf for failed runs.
    double objective() const noexcept;

    ojson to_json() const;
    static RunRecord from_json(const ojson& j);
};

/// Linear 0 -> peak over the first warmup_frac * total_steps steps, then a
/// cosine from peak to exactly 0 at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, double peak_lr, double warmup_frac);

/// Global L2 norm of a gradient vector.
double global_norm(std::span<const float> grads);
double global_norm(std::span<const double> grads);

/// Scales grads by max_norm / norm when norm exceeds max_norm. Returns the
/// norm before clipping.
double clip_grads(std::span<float> grads, double max_norm);
double clip_grads(std::span<double> grads, double max_norm);

struct OptState {
    std::vector<float> m;
    std::vector<float> v;
    std::uint64_t step = 0;
    /// 1 where weight decay applies. Empty means decay everything.
    std::vector<std::uint8_t> decay_mask;

    static OptState zeros(std::size_t n);
    /// Moments sized for params; decay applies to 2-D arrays only (RMSNorm
    /// gains are not decayed).
    static OptState for_params(const model::Parameters<float>& params);
};

/// Bias-corrected Adam with decoupled decay:
/// theta' = theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
/// Throws NonFinite when grads or the updated params are not finite.
void adamw_step(OptState& state, std::span<float> params, std::span<const float> grads, double lr, double wd,
                const AdamConfig& cfg = {});

/// Source of training batches (window spans) in a fixed order.
class BatchSource {
public:
    virtual ~BatchSource() = default;
    virtual std::size_t num_batches() const = 0;
    virtual std::vector<std::span<const corpus::Token>> batch(std::size_t index) const = 0;
    /// Tokens delivered over the whole schedule.
    virtual std::size_t total_tokens() const = 0;
};

/// Epoched batches over a window set.
class EpochBatches final : public BatchSource {
public:
    EpochBatches(const corpus::WindowSet& windows, corpus::EpochStream stream);
    std::size_t num_batches() const override { return stream_.num_batches(); }
    std::vector<std::span<const corpus::Token>> batch(std::size_t index) const override;
    std::size_t total_tokens() const override;

private:
    const corpus::WindowSet* windows_;
    corpus::EpochStream stream_;
};

/// Mean next-token NLL (nats/token) of a set of models whose logits are
/// averaged, over every predicted position of `windows`. With one member this
/// is the plain model loss. Reduction order is fixed: members in the given
/// order, windows in order.
double eval_loss_members(std::span<const model::Parameters<float>* const> members, const corpus::WindowSet& windows);

/// Per-position NLLs behind eval_loss_members, in window-major order.
std::vector<double> position_nlls(std::span<const model::Parameters<float>* const> members,
                                  const corpus::WindowSet& windows);

double eval_loss(const model::Parameters<float>& params, const corpus::ValidationSet& validation);
double eval_loss(const model::Parameters<float>& params, const corpus::WindowSet& windows);

/// Everything a run needs besides its spec.
struct RunEnv {
    const corpus::TokenPool* pool = nullptr;
    const corpus::ValidationSet* validation = nullptr;
    Ledger* ledger = nullptr;                 // optional cache / record sink
    std::filesystem::path checkpoint_dir;     // optional; empty = no checkpoints
    std::function<void(const std::string&)> log;  // optional progress sink
};

/// Trains from the run's seeds on an arbitrary batch source. Does not touch
/// the ledger. `train_eval` supplies the windows behind final_train_loss.
RunRecord run_training(const RunSpec& spec, const BatchSource& source, const corpus::ValidationSet& validation,
                       const corpus::WindowSet& train_eval, model::Parameters<float>* final_params = nullptr,
                       const std::function<void(const std::string&)>& log = {});

/// Full run: init, epoch stream, update loop, final validation. Cached runs
/// come back from the ledger without retraining; failed runs are ledgered too.
RunRecord train(const RunSpec& spec, const RunEnv& env);

/// Same as train() but always re-executes, bypassing the ledger.
RunRecord train_uncached(const RunSpec& spec, const RunEnv& env, model::Parameters<float>* final_params = nullptr);

std::filesystem::path checkpoint_path(const RunEnv& env, const std::string& ledger_key);

enum class SeedMode { Both, InitOnly, DataOnly };
std::string to_string(SeedMode mode);
SeedMode seed_mode_from_string(const std::string& s);

struct SeedVariance {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation (n - 1)
    std::vector<RunRecord> runs;
};

/// Trains variants of `spec` that differ only in the seeds selected by mode.
/// The i-th variant uses seeds[i] (default: base seed + i) for the varied seed.
SeedVariance seed_variance(const RunSpec& spec, SeedMode mode, int n_seeds, const RunEnv& env,
                           std::span<const std::uint64_t> seeds = {});

ojson to_json(const Hyper& h);
Hyper hyper_from_json(const ojson& j);
ojson to_json(const model::ModelConfig& c);
model::ModelConfig config_from_json(const ojson& j);

}  // namespace dclab::trainer
