// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dclab/common.hpp"
#include "dclab/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <set>

using namespace dclab;
using namespace dclab::corpus;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

std::vector<std::vector<std::size_t>> all_batches(const EpochStream& s) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < s.num_batches(); ++i) out.push_back(s.batch(i));
    return out;
}

}  // namespace

TEST_CASE("tokenizer is byte level") {
    const Tokenizer tok;
    const std::string text = "h\xc3\xa9llo\n";
    const auto ids = tok.encode(text);
    CHECK(ids.size() == text.size());
    CHECK(ids[1] == 0xc3);
    CHECK(tok.decode(ids) == text);
    CHECK(tok.bos_id == 256);
    CHECK(Tokenizer::bytes_only().vocab_size == 256);
}

TEST_CASE("pools nest and hash deterministically") {
    const auto src = bytes_of(synthetic_text(3, 500));
    const Tokenizer tok;
    const auto p100 = build_pool(src, 100, tok);
    const auto p200 = build_pool(src, 200, tok);
    CHECK(p100.size_d() == 100);
    CHECK(p200.size_d() == 200);
    CHECK(std::equal(p100.tokens().begin(), p100.tokens().end(), p200.tokens().begin()));
    CHECK(build_pool(src, 100, tok).pool_hash() == p100.pool_hash());
    CHECK(p100.pool_hash() != p200.pool_hash());
    for (Token t : p200.tokens()) CHECK(t < 257);

    CHECK_NOTHROW(build_pool(src, src.size(), tok));
    try {
        build_pool(src, src.size() + 1, tok);
        FAIL("expected InsufficientSource");
    } catch (const LabError& e) {
        CHECK(e.kind() == ErrorKind::InsufficientSource);
    }
}

TEST_CASE("pool rejects out of range ids") {
    CHECK_THROWS_AS(TokenPool(std::vector<Token>{1, 2, 300}, 257), LabError);
}

TEST_CASE("window counts") {
    auto pool_of = [](std::size_t n) { return TokenPool(std::vector<Token>(n, 7), 257); };
    CHECK(make_windows(pool_of(1000), 64).size() == 15);
    CHECK(make_windows(pool_of(1000), 64).flat().size() == 960);
    CHECK(make_windows(pool_of(128), 128).size() == 1);
    CHECK(make_windows(pool_of(127), 128).size() == 0);

    std::vector<Token> seq(10);
    for (int i = 0; i < 10; ++i) seq[i] = static_cast<Token>(i);
    const auto w = make_windows(TokenPool(seq, 257), 3);
    REQUIRE(w.size() == 3);
    CHECK(w[1][0] == 3);
    CHECK(w[2][2] == 8);
    CHECK(w.head(2).size() == 2);
}

TEST_CASE("epoch stream expansion") {
    const auto perm = Permutation::from_order({2, 0, 3, 1});
    const EpochStream s(4, perm, 2, 2);
    const std::vector<std::vector<std::size_t>> want{{2, 0}, {3, 1}, {2, 0}, {3, 1}};
    CHECK(all_batches(s) == want);

    const EpochStream id(5, Permutation::identity(5), 1, 2);
    CHECK(all_batches(id) == std::vector<std::vector<std::size_t>>{{0, 1}, {2, 3}, {4}});

    for (std::size_t n : {1u, 7u, 16u, 33u})
        for (int b : {1, 4, 16})
            for (int e : {1, 3}) {
                const EpochStream t(n, Permutation::from_seed(n, 9), e, b);
                CHECK(t.num_batches() == static_cast<std::size_t>(e) * ((n + b - 1) / b));
                std::vector<int> seen(n, 0);
                for (const auto& batch : all_batches(t))
                    for (auto i : batch) ++seen[i];
                CHECK(std::all_of(seen.begin(), seen.end(), [&](int c) { return c == e; }));
            }

    try {
        EpochStream(0, Permutation::identity(0), 1, 2);
        FAIL("expected EmptyPool");
    } catch (const LabError& e) {
        CHECK(e.kind() == ErrorKind::EmptyPool);
    }
}

TEST_CASE("permutations are seeded bijections") {
    const auto a = Permutation::from_seed(100, 4);
    const auto b = Permutation::from_seed(100, 4);
    const auto c = Permutation::from_seed(100, 5);
    CHECK(std::equal(a.order().begin(), a.order().end(), b.order().begin()));
    CHECK_FALSE(std::equal(a.order().begin(), a.order().end(), c.order().begin()));
    std::set<std::size_t> uniq(a.order().begin(), a.order().end());
    CHECK(uniq.size() == 100);
    CHECK(*uniq.rbegin() == 99);
    CHECK(a.data_seed() == 4);
    CHECK_THROWS_AS(Permutation::from_order({0, 0, 1}), LabError);

    const EpochStream s1(100, a, 3, 8), s2(100, b, 3, 8);
    CHECK(all_batches(s1) == all_batches(s2));
}

TEST_CASE("reshuffling is opt in") {
    const auto perm = Permutation::from_seed(32, 1);
    const EpochStream fixed(32, perm, 2, 32);
    CHECK(fixed.batch(0) == fixed.batch(1));
    const EpochStream shuffled(32, perm, 2, 32, true);
    CHECK(shuffled.batch(0) == fixed.batch(0));
    CHECK(shuffled.batch(1) != shuffled.batch(0));
    CHECK(all_batches(shuffled) == all_batches(EpochStream(32, perm, 2, 32, true)));
}

TEST_CASE("held-out split is disjoint from train pools") {
    const Tokenizer tok;
    const auto all = tok.encode(synthetic_text(5, 20000));
    const auto split = split_holdout(all, 16, 32);
    CHECK(split.validation.n_windows() == 16);
    CHECK(split.validation.window_len() == 32);
    CHECK(split.train_source.size() + 16 * 32 <= all.size());
    CHECK(std::equal(split.train_source.begin(), split.train_source.end(), all.begin()));
    // validation comes strictly after every train token
    const auto val = split.validation.windows.flat();
    CHECK(std::equal(val.begin(), val.end(), all.end() - static_cast<std::ptrdiff_t>(val.size())));

    const auto pool = build_pool(std::span<const Token>(split.train_source), split.train_source.size(), 257);
    const auto train_windows = make_windows(pool, 32);
    std::set<std::vector<Token>> train_set;
    for (std::size_t i = 0; i < train_windows.size(); ++i)
        train_set.emplace(train_windows[i].begin(), train_windows[i].end());
    for (std::size_t i = 0; i < split.validation.n_windows(); ++i) {
        const auto w = split.validation.windows[i];
        CHECK(train_set.count(std::vector<Token>(w.begin(), w.end())) == 0);
    }
    CHECK(split_holdout(all, 16, 32).validation.hash == split.validation.hash);
    CHECK_THROWS_AS(split_holdout(all, 1000, 32), LabError);
}

TEST_CASE("pool files round trip") {
    const Tokenizer tok;
    const auto pool = build_pool(bytes_of(synthetic_text(8, 3000)), 2500, tok);
    const auto path = std::filesystem::temp_directory_path() / "dclab_test_corpus.pool";
    write_pool_file(path, pool);
    const auto back = read_pool_file(path);
    std::filesystem::remove(path);
    CHECK(back.size_d() == pool.size_d());
    CHECK(back.vocab_size() == 257);
    CHECK(back.pool_hash() == pool.pool_hash());
    CHECK(std::equal(back.tokens().begin(), back.tokens().end(), pool.tokens().begin()));
}

TEST_CASE("synthetic text is deterministic") {
    const auto a = synthetic_text(1, 4000);
    CHECK(a.size() == 4000);
    CHECK(a == synthetic_text(1, 4000));
    CHECK(a != synthetic_text(2, 4000));
    CHECK(synthetic_text(1, 8000).substr(0, 4000) == a);
}
