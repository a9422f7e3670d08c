// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dclab/common.hpp"
#include "dclab/trainer.hpp"
#include "unit/fixture.hpp"

#include <cmath>
#include <cstring>

using namespace dclab;
using namespace dclab::trainer;

namespace {

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

}  // namespace

TEST_CASE("schedule joints") {
    const std::size_t total = 1000;
    const double peak = 3e-3, warm = 0.01;
    CHECK(lr_at(0, total, peak, warm) == 0.0);
    CHECK(lr_at(5, total, peak, warm) == doctest::Approx(peak / 2).epsilon(1e-12));
    CHECK(lr_at(10, total, peak, warm) == doctest::Approx(peak).epsilon(1e-12));
    CHECK(lr_at(total, total, peak, warm) == 0.0);
    CHECK(std::abs(lr_at(505, total, peak, warm) - peak / 2) < 1e-12);
    double prev = peak;
    for (std::size_t s = 10; s <= total; ++s) {
        const double lr = lr_at(s, total, peak, warm);
        REQUIRE(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("gradient clipping") {
    std::vector<double> small{0.3, 0.4};  // norm 0.5
    CHECK(clip_grads(small, 1.0) == doctest::Approx(0.5));
    CHECK(small == std::vector<double>{0.3, 0.4});

    std::vector<double> big{1.2, 1.6};  // norm 2
    CHECK(clip_grads(big, 1.0) == doctest::Approx(2.0));
    CHECK(big[0] == doctest::Approx(0.6));
    CHECK(big[1] == doctest::Approx(0.8));
    CHECK(std::abs(global_norm(big) - 1.0) < 1e-9);

    std::vector<float> zero(5, 0.0f);
    CHECK(clip_grads(zero, 1.0) == 0.0);
    CHECK(std::all_of(zero.begin(), zero.end(), [](float v) { return v == 0.0f; }));
}

TEST_CASE("adamw single step by hand") {
    auto st = OptState::zeros(1);
    std::vector<float> theta{1.0f};
    const std::vector<float> g{1.0f};
    adamw_step(st, theta, g, 0.1, 0.1);
    CHECK(theta[0] == doctest::Approx(1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.1)).epsilon(1e-6));
    CHECK(theta[0] == doctest::Approx(0.89).epsilon(1e-6));
    CHECK(st.step == 1);

    auto st0 = OptState::zeros(3);
    std::vector<float> p0{0.5f, -2.0f, 3.0f};
    adamw_step(st0, p0, std::vector<float>(3, 0.0f), 0.1, 0.0);
    CHECK(p0 == std::vector<float>{0.5f, -2.0f, 3.0f});

    auto st1 = OptState::zeros(2);
    std::vector<float> p1{0.5f, -2.0f};
    adamw_step(st1, p1, std::vector<float>{0.3f, -0.7f}, 0.0, 0.1);
    CHECK(p1 == std::vector<float>{0.5f, -2.0f});
    CHECK(st1.m[0] != 0.0f);
    CHECK(st1.v[1] != 0.0f);

    auto bad = OptState::zeros(1);
    std::vector<float> pb{1.0f};
    CHECK_THROWS_AS(adamw_step(bad, pb, std::vector<float>{NAN}, 0.1, 0.1), LabError);
}

TEST_CASE("decoupled decay shrinks geometrically") {
    auto st = OptState::zeros(2);
    std::vector<float> p{1.0f, -4.0f};
    const double lr = 0.05, wd = 0.2;
    for (int i = 0; i < 10; ++i) adamw_step(st, p, std::vector<float>(2, 0.0f), lr, wd);
    const double factor = std::pow(1 - lr * wd, 10);
    CHECK(p[0] == doctest::Approx(factor).epsilon(1e-5));
    CHECK(p[1] == doctest::Approx(-4 * factor).epsilon(1e-5));
}

TEST_CASE("norm gains are not decayed") {
    const auto params = model::init_params<float>(model::ModelConfig{1, 16, 2, 2, 32, 8, 257, 256}, 1);
    const auto st = OptState::for_params(params);
    const auto& lay = params.layout();
    CHECK(st.decay_mask[lay.tensors()[lay.final_norm()].offset] == 0);
    CHECK(st.decay_mask[lay.tensors()[lay.layer(0, model::Layout::AttnNorm)].offset] == 0);
    CHECK(st.decay_mask[lay.tensors()[lay.layer(0, model::Layout::Wq)].offset] == 1);
    CHECK(st.decay_mask[0] == 1);
}

TEST_CASE("ledger keys are pure functions of the spec") {
    fixture::Tiny t;
    const auto k = t.spec.ledger_key();
    CHECK(k == t.spec.ledger_key());
    CHECK(RunSpec::from_json(t.spec.to_json()).ledger_key() == k);
    auto s = t.spec;
    s.hyper.peak_lr = 1e-3;
    CHECK(s.ledger_key() != k);
    s = t.spec;
    s.data_seed = 2;
    CHECK(s.ledger_key() != k);
    s = t.spec;
    s.config.d_ff = 48;
    CHECK(s.ledger_key() != k);
    s = t.spec;
    s.pool.validation_hash = "other";
    CHECK(s.ledger_key() != k);
}

TEST_CASE("training is deterministic, cached and accounts tokens") {
    fixture::Tiny t;
    const auto first = train(t.spec, t.env);
    REQUIRE(first.ok());
    CHECK_FALSE(first.cached);
    CHECK(t.ledger.size() == 1);
    const std::size_t windows = t.pool->size_d() / 16;
    CHECK(first.tokens_seen == 1 * windows * 16);
    CHECK(first.total_steps == (windows + 7) / 8);
    CHECK(first.loss_curve.back().step == first.total_steps);
    CHECK(first.final_val_loss == first.loss_curve.back().val_loss);

    const auto again = train(t.spec, t.env);
    CHECK(again.cached);
    CHECK(same_bits(again.final_val_loss, first.final_val_loss));
    CHECK(t.ledger.size() == 1);

    const auto fresh = train_uncached(t.spec, t.env);
    CHECK(same_bits(fresh.final_val_loss, first.final_val_loss));
    CHECK(same_bits(fresh.final_train_loss, first.final_train_loss));

    auto s = t.spec;
    s.hyper.epochs = 3;
    const auto three = train(s, t.env);
    CHECK(three.tokens_seen == 3 * windows * 16);
    CHECK(three.loss_curve.size() == 20);
    CHECK(t.ledger.size() == 2);
}

TEST_CASE("record json round trip") {
    fixture::Tiny t;
    const auto r = train(t.spec, t.env);
    const auto j = r.to_json();
    CHECK(j["kind"] == "run");
    CHECK(j["ledger_key"] == r.ledger_key);
    CHECK(j["status"] == "ok");
    const auto back = RunRecord::from_json(j);
    CHECK(back.ledger_key == r.ledger_key);
    CHECK(same_bits(back.final_val_loss, r.final_val_loss));
    CHECK(back.loss_curve.size() == r.loss_curve.size());
    CHECK(back.spec.ledger_key() == r.ledger_key);
}

TEST_CASE("divergent runs are ledgered as failed") {
    fixture::Tiny t;
    auto s = t.spec;
    s.hyper.peak_lr = 1e12;
    s.options.max_grad_norm = 1e30;
    const auto r = train(s, t.env);
    CHECK_FALSE(r.ok());
    CHECK(std::isinf(r.final_val_loss));
    CHECK(std::isinf(r.objective()));
    CHECK(r.fail_step.has_value());
    REQUIRE(t.ledger.contains(r.ledger_key));
    const auto cached = train(s, t.env);
    CHECK(cached.cached);
    CHECK_FALSE(cached.ok());
}

TEST_CASE("schedules without batches are rejected") {
    fixture::Tiny t(8, 16);  // pool smaller than one window
    try {
        train(t.spec, t.env);
        FAIL("expected EmptyPool");
    } catch (const LabError& e) {
        CHECK(e.kind() == ErrorKind::EmptyPool);
    }
}

TEST_CASE("uniform model scores ln(vocab)") {
    const model::ModelConfig cfg{1, 16, 2, 2, 32, 16, 256, -1};
    auto p = model::init_params<float>(cfg, 1);
    auto head = p.array("lm_head");
    std::fill(head.begin(), head.end(), 0.0f);
    fixture::Tiny t;
    const double a = eval_loss(p, t.split.validation);
    CHECK(a == doctest::Approx(std::log(256.0)).epsilon(1e-6));
    CHECK(same_bits(a, eval_loss(p, t.split.validation)));
}

TEST_CASE("desk model memorizes a small corpus") {
    fixture::Tiny t(64 * 64, 64);
    t.spec.config = model::ModelConfig::desk();
    t.spec.hyper = {3e-3, 16, 0.1, 16};
    const auto windows = corpus::make_windows(*t.pool, 64);
    REQUIRE(windows.size() == 64);
    const double initial = eval_loss(model::init_params<float>(t.spec.config, t.spec.init_seed), windows);
    const auto r = train(t.spec, t.env);
    REQUIRE(r.ok());
    CHECK(initial - r.final_train_loss >= 1.0);
    MESSAGE("initial " << initial << " final train " << r.final_train_loss);
}

TEST_CASE("one window is memorized below half a nat") {
    fixture::Tiny t(32, 32);
    t.spec.config = model::ModelConfig{1, 32, 4, 4, 128, 32, 257, 256};
    t.spec.hyper = {1e-2, 300, 0.0, 1};
    model::Parameters<float> params;
    const auto r = train_uncached(t.spec, t.env, &params);
    REQUIRE(r.ok());
    CHECK(eval_loss(params, corpus::make_windows(*t.pool, 32)) < 0.5);
}

TEST_CASE("seed variance") {
    fixture::Tiny t;
    const std::vector<std::uint64_t> same{4, 4, 4};
    const auto zero = seed_variance(t.spec, SeedMode::Both, 3, t.env, same);
    CHECK(zero.stddev == 0.0);
    CHECK(zero.runs.size() == 3);
    CHECK_THROWS_AS(seed_variance(t.spec, SeedMode::Both, 1, t.env), LabError);

    const auto init_only = seed_variance(t.spec, SeedMode::InitOnly, 2, t.env);
    CHECK(init_only.runs[0].spec.data_seed == init_only.runs[1].spec.data_seed);
    CHECK(init_only.runs[0].spec.init_seed != init_only.runs[1].spec.init_seed);
    const auto data_only = seed_variance(t.spec, SeedMode::DataOnly, 2, t.env);
    CHECK(data_only.runs[0].spec.init_seed == data_only.runs[1].spec.init_seed);

    fixture::Tiny desk(256 * 64, 64);
    desk.spec.config = model::ModelConfig::desk();
    desk.spec.hyper = {3e-3, 4, 0.1, 16};
    const auto both = seed_variance(desk.spec, SeedMode::Both, 5, desk.env);
    CHECK(both.stddev > 0.0);
    CHECK(both.stddev < 0.1);
    MESSAGE("desk std " << both.stddev);
}

TEST_CASE("seed mode names") {
    CHECK(seed_mode_from_string("init-only") == SeedMode::InitOnly);
    CHECK(to_string(SeedMode::DataOnly) == "data-only");
    CHECK_THROWS_AS(seed_mode_from_string("neither"), LabError);
}
