// SPDX-License-Identifier: Apache-2.0
#include "dclab/corpus.hpp"

#include "dclab/common.hpp"
#include "dclab/digest.hpp"
#include "dclab/rng.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

namespace dclab::corpus {

namespace {

constexpr std::array<char, 8> kPoolMagic{'D', 'C', 'L', 'P', 'O', 'O', 'L', '\0'};
constexpr std::uint32_t kPoolVersion = 1;

template <typename T>
void put_le(std::ostream& os, T value) {
    std::array<unsigned char, sizeof(T)> b{};
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b.data()), b.size());
}

template <typename T>
T get_le(std::istream& is) {
    std::array<unsigned char, sizeof(T)> b{};
    is.read(reinterpret_cast<char*>(b.data()), b.size());
    if (!is) fail(ErrorKind::Format, "truncated pool file");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<T>(v);
}

}  // namespace

std::vector<Token> Tokenizer::encode(std::span<const std::uint8_t> bytes) const {
    return std::vector<Token>(bytes.begin(), bytes.end());
}

std::vector<Token> Tokenizer::encode(std::string_view text) const {
    return encode(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string Tokenizer::decode(std::span<const Token> tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (t < 256) out.push_back(static_cast<char>(t));
    }
    return out;
}

std::string hash_tokens(std::span<const Token> tokens) {
    std::vector<std::byte> bytes(tokens.size() * 2);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        bytes[2 * i] = static_cast<std::byte>(tokens[i] & 0xFF);
        bytes[2 * i + 1] = static_cast<std::byte>(tokens[i] >> 8);
    }
    return sha256_hex(bytes);
}

TokenPool::TokenPool(std::vector<Token> tokens, int vocab_size)
    : tokens_(std::move(tokens)), vocab_size_(vocab_size) {
    require(vocab_size_ > 0 && vocab_size_ <= 65536, ErrorKind::BadConfig, "vocab_size out of range");
    for (Token t : tokens_) {
        if (t >= vocab_size_) fail(ErrorKind::BadToken, "token id " + std::to_string(t) + " outside vocabulary");
    }
    hash_ = hash_tokens(tokens_);
}

TokenPool build_pool(std::span<const Token> source_tokens, std::size_t d, int vocab_size) {
    if (source_tokens.size() < d) {
        fail(ErrorKind::InsufficientSource, "source has " + std::to_string(source_tokens.size()) +
                                                " tokens, pool needs " + std::to_string(d));
    }
    return TokenPool(std::vector<Token>(source_tokens.begin(), source_tokens.begin() + static_cast<std::ptrdiff_t>(d)),
                     vocab_size);
}

TokenPool build_pool(std::span<const std::uint8_t> source, std::size_t d, const Tokenizer& tokenizer) {
    const auto tokens = tokenizer.encode(source);
    return build_pool(tokens, d, tokenizer.vocab_size);
}

WindowSet::WindowSet(std::vector<Token> data, int window_len) : data_(std::move(data)), window_len_(window_len) {
    require(window_len_ >= 2, ErrorKind::Precondition, "window length must be at least 2");
    data_.resize(size() * static_cast<std::size_t>(window_len_));
}

WindowSet WindowSet::head(std::size_t n) const {
    n = std::min(n, size());
    return WindowSet(std::vector<Token>(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(n * window_len_)),
                     window_len_);
}

WindowSet make_windows(const TokenPool& pool, int context_len) {
    require(context_len >= 2, ErrorKind::Precondition, "context_len must be at least 2");
    auto t = pool.tokens();
    return WindowSet(std::vector<Token>(t.begin(), t.end()), context_len);
}

HeldOutSplit split_holdout(std::span<const Token> all_tokens, std::size_t n_val_windows, int context_len) {
    require(context_len >= 2, ErrorKind::Precondition, "context_len must be at least 2");
    const std::size_t val_tokens = n_val_windows * static_cast<std::size_t>(context_len);
    if (all_tokens.size() <= val_tokens) {
        fail(ErrorKind::InsufficientSource, "source too small for the validation split");
    }
    const std::size_t cut = all_tokens.size() - val_tokens;
    HeldOutSplit split;
    split.train_source.assign(all_tokens.begin(), all_tokens.begin() + static_cast<std::ptrdiff_t>(cut));
    std::vector<Token> val(all_tokens.begin() + static_cast<std::ptrdiff_t>(cut), all_tokens.end());
    split.validation.hash = hash_tokens(val);
    split.validation.windows = WindowSet(std::move(val), context_len);
    return split;
}

Permutation Permutation::identity(std::size_t n) {
    Permutation p;
    p.order_.resize(n);
    std::iota(p.order_.begin(), p.order_.end(), std::size_t{0});
    return p;
}

Permutation Permutation::from_seed(std::size_t n, std::uint64_t data_seed) {
    Permutation p = identity(n);
    p.data_seed_ = data_seed;
    Rng rng(derive_seed(data_seed, 0x5045524DULL));
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(p.order_[i - 1], p.order_[j]);
    }
    return p;
}

Permutation Permutation::from_order(std::vector<std::size_t> order, std::uint64_t data_seed) {
    std::vector<bool> seen(order.size(), false);
    for (std::size_t v : order) {
        require(v < order.size() && !seen[v], ErrorKind::Precondition, "order is not a permutation");
        seen[v] = true;
    }
    Permutation p;
    p.order_ = std::move(order);
    p.data_seed_ = data_seed;
    return p;
}

EpochStream::EpochStream(std::size_t n_windows, Permutation permutation, int epochs, int batch_size,
                         bool reshuffle_each_epoch)
    : base_(std::move(permutation)), epochs_(epochs), batch_size_(batch_size) {
    require(n_windows > 0, ErrorKind::EmptyPool, "no windows to stream");
    require(epochs >= 1, ErrorKind::Precondition, "epochs must be >= 1");
    require(batch_size >= 1, ErrorKind::Precondition, "batch_size must be >= 1");
    require(base_.size() == n_windows, ErrorKind::Precondition, "permutation size does not match window count");
    per_epoch_ = (n_windows + batch_size - 1) / static_cast<std::size_t>(batch_size);
    if (reshuffle_each_epoch) {
        for (int e = 1; e < epochs; ++e) {
            reshuffled_.push_back(Permutation::from_seed(n_windows, derive_seed(base_.data_seed(), 0xE90C, e)));
        }
    }
}

std::span<const std::size_t> EpochStream::order_for_epoch(int epoch) const {
    if (epoch == 0 || reshuffled_.empty()) return base_.order();
    return reshuffled_[static_cast<std::size_t>(epoch - 1)].order();
}

std::vector<std::size_t> EpochStream::batch(std::size_t index) const {
    require(index < num_batches(), ErrorKind::Precondition, "batch index out of range");
    const int epoch = static_cast<int>(index / per_epoch_);
    const std::size_t within = index % per_epoch_;
    const auto order = order_for_epoch(epoch);
    const std::size_t begin = within * static_cast<std::size_t>(batch_size_);
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size_));
    return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
}

void write_pool_file(const std::filesystem::path& path, const TokenPool& pool) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
    os.write(kPoolMagic.data(), kPoolMagic.size());
    put_le<std::uint32_t>(os, kPoolVersion);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(pool.vocab_size()));
    put_le<std::uint64_t>(os, pool.size_d());
    os.write(pool.pool_hash().data(), static_cast<std::streamsize>(pool.pool_hash().size()));
    for (Token t : pool.tokens()) put_le<std::uint16_t>(os, t);
    if (!os) fail(ErrorKind::Io, "write failed for " + path.string());
}

TokenPool read_pool_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::Io, "cannot read " + path.string());
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kPoolMagic) fail(ErrorKind::Format, "bad pool magic in " + path.string());
    const auto version = get_le<std::uint32_t>(is);
    if (version != kPoolVersion) fail(ErrorKind::Format, "unsupported pool version");
    const auto vocab = get_le<std::uint32_t>(is);
    const auto size_d = get_le<std::uint64_t>(is);
    std::string hash(64, '\0');
    is.read(hash.data(), 64);
    if (!is) fail(ErrorKind::Format, "truncated pool header");
    std::vector<Token> tokens(size_d);
    for (auto& t : tokens) t = get_le<std::uint16_t>(is);
    TokenPool pool(std::move(tokens), static_cast<int>(vocab));
    if (pool.pool_hash() != hash) fail(ErrorKind::Format, "pool hash mismatch in " + path.string());
    return pool;
}

std::string synthetic_text(std::uint64_t seed, std::size_t n_bytes) {
    constexpr int kWords = 2000;
    constexpr int kSuccessors = 32;
    static constexpr std::string_view onsets[] = {"b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n",
                                                  "p", "r", "s", "t", "v", "w", "z", "st", "tr", "br",
                                                  "ch", "sh", "th", "pl", "gr"};
    static constexpr std::string_view nuclei[] = {"a", "e", "i", "o", "u", "ai", "ea", "ou", "io"};
    static constexpr std::string_view codas[] = {"", "", "", "n", "r", "s", "t", "l", "m", "nd", "st"};

    Rng rng(derive_seed(seed, 0x7E47));
    std::vector<std::string> lexicon;
    std::set<std::string> seen;
    while (static_cast<int>(lexicon.size()) < kWords) {
        const int syllables = 1 + static_cast<int>(rng.below(3));
        std::string w;
        for (int s = 0; s < syllables; ++s) {
            w += onsets[rng.below(std::size(onsets))];
            w += nuclei[rng.below(std::size(nuclei))];
        }
        w += codas[rng.below(std::size(codas))];
        if (seen.insert(w).second) lexicon.push_back(w);
    }

    // Zipf-like rank weights drive both sentence starts and successor choice.
    std::vector<double> zipf_cdf(kWords);
    double acc = 0.0;
    for (int r = 0; r < kWords; ++r) {
        acc += 1.0 / (r + 1.0);
        zipf_cdf[r] = acc;
    }
    auto draw_zipf = [&](Rng& g) {
        const double u = g.uniform() * acc;
        return static_cast<int>(std::lower_bound(zipf_cdf.begin(), zipf_cdf.end(), u) - zipf_cdf.begin());
    };
    std::vector<std::array<int, kSuccessors>> successors(kWords);
    for (auto& row : successors) {
        for (auto& s : row) s = draw_zipf(rng);
    }
    std::array<double, kSuccessors> succ_cdf{};
    double sacc = 0.0;
    for (int j = 0; j < kSuccessors; ++j) {
        sacc += std::pow(0.88, j);
        succ_cdf[j] = sacc;
    }

    std::string out;
    out.reserve(n_bytes + 64);
    while (out.size() < n_bytes) {
        const int len = 4 + static_cast<int>(rng.below(9));
        int w = draw_zipf(rng);
        for (int i = 0; i < len; ++i) {
            std::string word = lexicon[w];
            if (i == 0) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
            out += word;
            if (i + 1 < len) {
                out += (rng.uniform() < 0.08) ? ", " : " ";
                const double u = rng.uniform() * sacc;
                const int j = static_cast<int>(std::lower_bound(succ_cdf.begin(), succ_cdf.end(), u) - succ_cdf.begin());
                w = successors[w][std::min(j, kSuccessors - 1)];
            }
        }
        out += (rng.uniform() < 0.1) ? "?" : ".";
        out += (rng.uniform() < 0.15) ? "\n" : " ";
    }
    out.resize(n_bytes);
    return out;
}

}  // namespace dclab::corpus
