// SPDX-License-Identifier: Apache-2.0
//
// Sequence-level distillation: sample unconditional sequences from a teacher,
// interleave them with real batches at a fixed r:s ratio, and train a student
// from scratch on the mixture.

#pragma once

#include "dclab/corpus.hpp"
#include "dclab/ensemble.hpp"
#include "dclab/ledger.hpp"
#include "dclab/model.hpp"
#include "dclab/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dclab::distill {

enum class SamplingMode { IndividualMembers, AveragedEnsemble };
std::string to_string(SamplingMode m);
SamplingMode sampling_mode_from_string(const std::string& s);

struct SynthOptions {
    std::size_t n_tokens = 0;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    SamplingMode mode = SamplingMode::IndividualMembers;
};

struct SynthPool {
    corpus::TokenPool pool;
    ojson provenance;  // teacher keys, temperature, seed, mode, pool hash
};

/// Sequences of context_len tokens, each sampled from BOS with a seed derived
/// from (seed, sequence index), concatenated and cut at exactly n_tokens.
/// Individual mode takes sequence i from member i mod K; averaged mode samples
/// every sequence from the logit-averaged ensemble.
SynthPool generate_synthetic(std::span<const model::Parameters<float>* const> teacher,
                             std::span<const std::string> teacher_keys, const SynthOptions& options);

/// Loads teacher checkpoints through the ledger and samples.
SynthPool generate_synthetic(const ensemble::EnsembleSpec& teacher, const trainer::RunEnv& env,
                             const SynthOptions& options);

void write_synth_pool(const std::filesystem::path& pool_path, const SynthPool& synth);  // plus <path>.json sidecar
SynthPool read_synth_pool(const std::filesystem::path& pool_path);

struct MixingRatio {
    int real = 1;
    int synth = 1;
};

/// r real batches then s synthetic batches, repeated for `periods` periods.
/// Real batches come from the epoch stream in order (a short final period
/// emits the real batches that remain). Synthetic windows are read
/// sequentially and wrap around at most synth_epoch_cap times in total.
class MixedBatches final : public trainer::BatchSource {
public:
    /// periods defaults to ceil(real batches / r); it must be given when r == 0.
    MixedBatches(const corpus::WindowSet& real, corpus::EpochStream real_stream, const corpus::WindowSet& synth,
                 MixingRatio ratio, int batch_size, int synth_epoch_cap, std::size_t periods = 0);

    std::size_t num_batches() const override { return schedule_.size(); }
    std::vector<std::span<const corpus::Token>> batch(std::size_t index) const override;
    std::size_t total_tokens() const override { return total_tokens_; }

    bool is_synthetic(std::size_t index) const { return schedule_.at(index).synthetic; }
    std::size_t periods() const noexcept { return periods_; }
    std::size_t synth_windows_used() const noexcept { return synth_used_; }

private:
    struct Slot {
        bool synthetic;
        std::size_t index;  // real batch index, or first synthetic window
    };
    const corpus::WindowSet* real_;
    corpus::EpochStream real_stream_;
    const corpus::WindowSet* synth_;
    int batch_size_;
    std::vector<Slot> schedule_;
    std::size_t periods_ = 0;
    std::size_t synth_used_ = 0;
    std::size_t total_tokens_ = 0;
};

struct DistillSpec {
    ensemble::EnsembleSpec teacher;
    SynthOptions sampling;
    MixingRatio ratio;
    model::ModelConfig student_config;
    trainer::Hyper student_hyper{1e-3, 1, 0.1, 16};
    std::uint64_t init_seed = 0;
    std::uint64_t data_seed = 0;
    int synth_epoch_cap = 3;
    std::size_t periods = 0;  // 0: derived from the real stream

    void validate() const;
    ojson to_json() const;
    static DistillSpec from_json(const ojson& j);
};

/// The synthetic-only control with the same number of steps as `mixed`:
/// ratio 0:(r+s) over the mixed schedule's period count.
DistillSpec no_mixing_control(const DistillSpec& mixed, std::size_t real_windows);

/// Period count of the mixed schedule for a pool of real_windows windows.
std::size_t mixed_periods(const DistillSpec& spec, std::size_t real_windows);

struct DistillEnv {
    trainer::RunEnv run;                 // real pool, validation, ledger, checkpoints
    std::filesystem::path synth_dir;     // optional cache of generated pools
    std::string pool_name;
};

/// Generates (or reloads) the synthetic pool and trains the student on the
/// mixture. The record is tagged "distill" and its spec extra carries the
/// teacher keys, sampling settings, ratio and synthetic pool hash. Cached in
/// the ledger like any run. With reuse_cached false the pool is resampled and
/// the student retrained, nothing is written.
trainer::RunRecord distill_train(const DistillSpec& spec, const DistillEnv& env, bool reuse_cached = true);

}  // namespace dclab::distill
