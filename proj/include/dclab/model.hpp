// SPDX-License-Identifier: Apache-2.0
//
// Minimal decoder-only transformer: RMSNorm, rotary attention with grouped
// KV heads, SiLU-gated MLP, untied embeddings. Forward and the exact reverse
// pass are hand written; the scalar type is a template parameter so the same
// code runs in float for training and double for gradient checks.

#pragma once

#include "dclab/corpus.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dclab::model {

using corpus::Token;

/// Buffers that Eigen maps over start on its packet alignment, so reductions
/// split the same way whatever address the allocator hands out.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int n_kv_heads = 4;
    int d_ff = 256;
    int context_len = 64;
    int vocab_size = 257;
    int bos_id = 256;  // -1: plain next-token shift, no start token
    double init_scale = 1.0;  // weight variance is init_scale / d_model
    double rope_base = 10000.0;

    static ModelConfig desk() { return {}; }

    void validate() const;
    int head_dim() const noexcept { return d_model / n_heads; }
    int kv_dim() const noexcept { return n_kv_heads * head_dim(); }

    /// Closed-form scalar count of all parameter arrays.
    std::size_t param_count() const noexcept;

    /// Number of model inputs / predicted positions a window of `window_len`
    /// tokens yields.
    int sequence_len(int window_len) const noexcept { return bos_id >= 0 ? window_len : window_len - 1; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

/// Named arrays in declared order. Indices are stable: the token embedding
/// first, nine arrays per layer, then the final norm and the output head.
class Layout {
public:
    explicit Layout(const ModelConfig& config);

    const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }
    std::size_t total() const noexcept { return total_; }
    const TensorInfo& find(const std::string& name) const;

    static constexpr int kPerLayer = 9;
    enum LayerSlot { AttnNorm, Wq, Wk, Wv, Wo, MlpNorm, WGate, WUp, WDown };
    std::size_t tok_emb() const noexcept { return 0; }
    std::size_t layer(int l, LayerSlot slot) const noexcept { return 1 + static_cast<std::size_t>(l) * kPerLayer + slot; }
    std::size_t final_norm() const noexcept { return tensors_.size() - 2; }
    std::size_t lm_head() const noexcept { return tensors_.size() - 1; }

private:
    std::vector<TensorInfo> tensors_;
    std::size_t total_ = 0;
};

template <typename T>
class Parameters {
public:
    Parameters() = default;
    explicit Parameters(const ModelConfig& config)
        : config_(config), layout_(std::make_shared<const Layout>(config)), values_(layout_->total(), T(0)) {}

    const ModelConfig& config() const noexcept { return config_; }
    const Layout& layout() const noexcept { return *layout_; }
    std::size_t size() const noexcept { return values_.size(); }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    AlignedVector<T>& storage() noexcept { return values_; }

    T* data(std::size_t tensor) noexcept { return values_.data() + layout_->tensors()[tensor].offset; }
    const T* data(std::size_t tensor) const noexcept { return values_.data() + layout_->tensors()[tensor].offset; }

    std::span<T> array(const std::string& name) {
        const auto& info = layout_->find(name);
        return std::span<T>(values_).subspan(info.offset, info.size);
    }
    std::span<const T> array(const std::string& name) const {
        const auto& info = layout_->find(name);
        return std::span<const T>(values_).subspan(info.offset, info.size);
    }

    /// Zero-filled set with the same layout.
    Parameters zeros_like() const {
        Parameters p;
        p.config_ = config_;
        p.layout_ = layout_;
        p.values_.assign(values_.size(), T(0));
        return p;
    }

    template <typename U>
    Parameters<U> cast() const {
        Parameters<U> out(config_);
        for (std::size_t i = 0; i < values_.size(); ++i) out.values()[i] = static_cast<U>(values_[i]);
        return out;
    }

    bool all_finite() const noexcept;

private:
    ModelConfig config_;
    std::shared_ptr<const Layout> layout_;
    AlignedVector<T> values_;
};

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Zero-mean normal weights with variance init_scale / d_model; norm gains 1.
template <typename T>
Parameters<T> init_params(const ModelConfig& config, std::uint64_t init_seed);

/// Logits for one input sequence (rows = positions, cols = vocab).
template <typename T>
Matrix<T> forward(const Parameters<T>& params, std::span<const Token> tokens);

/// Builds model inputs and targets from a window.
struct Example {
    std::vector<Token> inputs;
    std::vector<Token> targets;
};
Example make_example(const ModelConfig& config, std::span<const Token> window);

template <typename T>
struct LossGrad {
    double loss = 0.0;
    Parameters<T> grads;
};

/// Mean next-token NLL (nats) over every predicted position of the batch and
/// its exact gradient. Throws NonFinite.
template <typename T>
LossGrad<T> loss_and_grad(const Parameters<T>& params, std::span<const std::span<const Token>> windows);

/// Loss only (no reverse pass).
template <typename T>
double batch_loss(const Parameters<T>& params, std::span<const std::span<const Token>> windows);

/// Logits for a batch of windows, stacked as (windows * sequence_len) x vocab,
/// alongside the flattened targets.
template <typename T>
Matrix<T> batch_logits(const Parameters<T>& params, std::span<const std::span<const Token>> windows,
                       std::vector<Token>* targets = nullptr);

/// Incremental decoder with a key/value cache, for sampling.
template <typename T>
class Decoder {
public:
    explicit Decoder(const Parameters<T>& params);

    void reset();
    int position() const noexcept { return pos_; }
    /// Feeds one token, returns the logits for the next position.
    std::span<const T> step(Token token);

private:
    const Parameters<T>* params_;
    std::vector<Matrix<T>> k_cache_, v_cache_;
    AlignedVector<T> logits_;
    int pos_ = 0;
};

/// Picks a token from a logit row: argmax (lowest index on ties) at
/// temperature 0, otherwise inverse-CDF sampling of softmax(logits / t).
template <typename T>
Token pick_token(std::span<const T> logits, double temperature, double uniform01);

/// Ancestral sampling of n_tokens. Generation restarts from the start token
/// (BOS, or token 0 without one) every context_len tokens, so each chunk has
/// the shape of a training window. Deterministic in sample_seed.
template <typename T>
std::vector<Token> sample(const Parameters<T>& params, std::size_t n_tokens, double temperature,
                          std::uint64_t sample_seed);

void save_checkpoint(const std::filesystem::path& path, const Parameters<float>& params, std::uint64_t init_seed,
                     std::uint64_t step);
struct Checkpoint {
    Parameters<float> params;
    std::uint64_t init_seed = 0;
    std::uint64_t step = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dclab::model
