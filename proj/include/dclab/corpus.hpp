// SPDX-License-Identifier: Apache-2.0
//
// Fixed token budgets: byte-level tokenization, nested train pools, a frozen
// held-out validation split, fixed-length windows and epoch ordering.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dclab::corpus {

using Token = std::uint16_t;

/// Byte-level tokenizer: ids 0..255 are raw bytes, an optional BOS id sits
/// just past the byte range.
struct Tokenizer {
    int vocab_size = 257;
    int bos_id = 256;  // -1 when the vocabulary carries no BOS

    static Tokenizer bytes_only() { return {256, -1}; }

    std::vector<Token> encode(std::span<const std::uint8_t> bytes) const;
    std::vector<Token> encode(std::string_view text) const;
    std::string decode(std::span<const Token> tokens) const;
};

/// Immutable ordered token budget of size D.
class TokenPool {
public:
    TokenPool() = default;
    TokenPool(std::vector<Token> tokens, int vocab_size);

    std::span<const Token> tokens() const noexcept { return tokens_; }
    std::size_t size_d() const noexcept { return tokens_.size(); }
    int vocab_size() const noexcept { return vocab_size_; }
    const std::string& pool_hash() const noexcept { return hash_; }

private:
    std::vector<Token> tokens_;
    int vocab_size_ = 0;
    std::string hash_;
};

std::string hash_tokens(std::span<const Token> tokens);

/// First d tokens of the tokenized source. Throws InsufficientSource.
TokenPool build_pool(std::span<const std::uint8_t> source, std::size_t d, const Tokenizer& tokenizer);
TokenPool build_pool(std::span<const Token> source_tokens, std::size_t d, int vocab_size);

/// Contiguous, equally sized token windows.
class WindowSet {
public:
    WindowSet() = default;
    WindowSet(std::vector<Token> data, int window_len);

    std::size_t size() const noexcept { return window_len_ == 0 ? 0 : data_.size() / window_len_; }
    bool empty() const noexcept { return size() == 0; }
    int window_len() const noexcept { return window_len_; }
    std::span<const Token> operator[](std::size_t i) const {
        return std::span<const Token>(data_).subspan(i * window_len_, window_len_);
    }
    std::span<const Token> flat() const noexcept { return data_; }

    /// Sub-set holding the first n windows.
    WindowSet head(std::size_t n) const;

private:
    std::vector<Token> data_;
    int window_len_ = 0;
};

/// floor(size_d / context_len) non-overlapping windows; the remainder is dropped.
WindowSet make_windows(const TokenPool& pool, int context_len);

struct ValidationSet {
    WindowSet windows;
    std::string hash;

    std::size_t n_windows() const noexcept { return windows.size(); }
    int window_len() const noexcept { return windows.window_len(); }
};

/// The held-out split of a source: validation windows come from the tail of
/// the token stream, everything before them is available for train pools.
struct HeldOutSplit {
    std::vector<Token> train_source;
    ValidationSet validation;
};

HeldOutSplit split_holdout(std::span<const Token> all_tokens, std::size_t n_val_windows, int context_len);

class Permutation {
public:
    static Permutation identity(std::size_t n);
    static Permutation from_seed(std::size_t n, std::uint64_t data_seed);
    static Permutation from_order(std::vector<std::size_t> order, std::uint64_t data_seed = 0);

    std::span<const std::size_t> order() const noexcept { return order_; }
    std::uint64_t data_seed() const noexcept { return data_seed_; }
    std::size_t size() const noexcept { return order_.size(); }

private:
    std::vector<std::size_t> order_;
    std::uint64_t data_seed_ = 0;
};

/// Batches of window indices for `epochs` passes. The same permutation is
/// reused every epoch unless `reshuffle_each_epoch` is set, in which case
/// epoch e > 0 uses a permutation derived from (data_seed, e).
class EpochStream {
public:
    EpochStream(std::size_t n_windows, Permutation permutation, int epochs, int batch_size,
                bool reshuffle_each_epoch = false);

    std::size_t batches_per_epoch() const noexcept { return per_epoch_; }
    std::size_t num_batches() const noexcept { return per_epoch_ * static_cast<std::size_t>(epochs_); }
    int epochs() const noexcept { return epochs_; }
    int batch_size() const noexcept { return batch_size_; }

    std::vector<std::size_t> batch(std::size_t index) const;

private:
    std::span<const std::size_t> order_for_epoch(int epoch) const;

    Permutation base_;
    std::vector<Permutation> reshuffled_;
    int epochs_;
    int batch_size_;
    std::size_t per_epoch_;
};

void write_pool_file(const std::filesystem::path& path, const TokenPool& pool);
TokenPool read_pool_file(const std::filesystem::path& path);

/// Deterministic English-like text for desk corpora: a seeded lexicon of
/// syllable words, Markov word transitions and sentence punctuation.
std::string synthetic_text(std::uint64_t seed, std::size_t n_bytes);

}  // namespace dclab::corpus
