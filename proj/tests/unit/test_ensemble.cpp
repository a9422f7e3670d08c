// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dclab/common.hpp"
#include "dclab/ensemble.hpp"
#include "dclab/rng.hpp"
#include "unit/fixture.hpp"

#include <cmath>
#include <filesystem>

using namespace dclab;
using namespace dclab::ensemble;

namespace {

std::vector<double> log_row(std::vector<double> p) {
    for (auto& v : p) v = std::log(v);
    return p;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("logit averaging examples") {
    const std::vector<std::vector<double>> same{{0.3, -1.0, 2.0}, {0.3, -1.0, 2.0}, {0.3, -1.0, 2.0}};
    const std::vector<std::vector<double>> one{same[0]};
    CHECK(logit_avg_probs(same) == logit_avg_probs(one));

    std::vector<std::vector<double>> shifted{{0.3, -1.0, 2.0}, {1.0, 0.5, -0.2}};
    const auto base = logit_avg_probs(shifted);
    for (auto& v : shifted[1]) v += 7.5;
    const auto moved = logit_avg_probs(shifted);
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::abs(base[i] - moved[i]) < 1e-9);

    const std::vector<std::vector<double>> pair{log_row({0.8, 0.2}), log_row({0.5, 0.5})};
    const auto p = logit_avg_probs(pair);
    CHECK(std::abs(p[0] - 2.0 / 3.0) < 1e-6);
    CHECK(std::abs(p[1] - 1.0 / 3.0) < 1e-6);
}

TEST_CASE("ensemble NLL never exceeds mean member NLL on random distributions") {
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 1 + rng.below(6), v = 2 + rng.below(30);
        std::vector<std::vector<double>> rows(k, std::vector<double>(v));
        for (auto& r : rows)
            for (auto& x : r) x = 3.0 * rng.normal();
        const auto p = logit_avg_probs(rows);
        double s = 0.0;
        for (double x : p) s += x;
        CHECK(std::abs(s - 1.0) < 1e-6);
        const std::size_t y = rng.below(v);
        double mean_member = 0.0;
        for (const auto& r : rows) {
            double mx = r[0];
            for (double x : r) mx = std::max(mx, x);
            double z = 0.0;
            for (double x : r) z += std::exp(x - mx);
            mean_member += (mx + std::log(z) - r[y]) / static_cast<double>(k);
        }
        CHECK(-std::log(p[y]) <= mean_member + 1e-9);
    }
}

TEST_CASE("soup averages weights") {
    model::ModelConfig cfg{1, 8, 2, 1, 16, 8, 11, 10};
    auto a = model::init_params<float>(cfg, 1);
    auto b = model::init_params<float>(cfg, 2);
    const model::Parameters<float>* same[] = {&a, &a};
    const auto s1 = soup(same);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(s1.values()[i] == a.values()[i]);
    const model::Parameters<float>* two[] = {&a, &b};
    const auto s2 = soup(two);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(s2.values()[i] == static_cast<float>((double(a.values()[i]) + double(b.values()[i])) / 2.0));
    cfg.d_ff = 24;
    auto c = model::init_params<float>(cfg, 3);
    const model::Parameters<float>* bad[] = {&a, &c};
    try {
        soup(bad);
        FAIL("expected ShapeMismatch");
    } catch (const LabError& e) {
        CHECK(e.kind() == ErrorKind::ShapeMismatch);
    }
}

TEST_CASE("heuristic ensemble hyperparameters") {
    const auto r = heuristic_ensemble_hyper({3e-3, 16, 1.6, 16});
    CHECK(r.hyper.peak_lr == 3e-3);
    CHECK(r.hyper.epochs == 32);
    CHECK(r.hyper.weight_decay == 0.8);
    CHECK_FALSE(r.clamped);
    CHECK(heuristic_ensemble_hyper({1e-3, 4, 0.0, 16}).hyper.weight_decay == 0.0);
    const auto top = heuristic_ensemble_hyper({1e-3, 64, 0.4, 16});
    CHECK(top.hyper.epochs == 64);
    CHECK(top.clamped);
    // 0.05 sits halfway between 0 and 0.1; the lower value wins
    CHECK(heuristic_ensemble_hyper({1e-3, 4, 0.1, 16}).hyper.weight_decay == 0.0);
}

TEST_CASE("ensemble evaluation on trained members") {
    fixture::Tiny w;
    TempDir dir("dclab_test_ensemble");
    w.env.checkpoint_dir = dir.path;
    const auto members = train_members(w.spec, 3, trainer::SeedMode::Both, w.env);
    REQUIRE(members.size() == 3);

    SUBCASE("K=1 matches the member loss bitwise") {
        EnsembleSpec one{{members[0].ledger_key}, {}};
        const auto r = ensemble_eval(one, w.env);
        CHECK(r.loss == members[0].final_val_loss);
        const auto p = load_member(members[0].ledger_key, w.env);
        CHECK(trainer::eval_loss(p, *w.env.validation) == members[0].final_val_loss);
    }
    SUBCASE("order invariance, bound and ledger record") {
        auto spec = spec_for(members);
        const auto before = w.ledger.size();
        const auto r1 = ensemble_eval(spec, w.env);
        CHECK(w.ledger.size() == before + 1);
        std::reverse(spec.member_keys.begin(), spec.member_keys.end());
        const auto r2 = ensemble_eval(spec, w.env);
        CHECK(r2.cached);
        CHECK(r1.loss == r2.loss);
        CHECK(r1.loss <= r1.mean_member_loss + 1e-9);
        const auto rec = w.ledger.find(r1.ledger_key);
        REQUIRE(rec);
        CHECK((*rec)["K"] == 3);
        CHECK((*rec)["kind"] == "ensemble");
        CHECK(spec.total_params() == 3 * w.spec.config.param_count());

        std::vector<model::Parameters<float>> ps;
        for (const auto& m : members) ps.push_back(load_member(m.ledger_key, w.env));
        const model::Parameters<float>* fwd[] = {&ps[0], &ps[1], &ps[2]};
        const model::Parameters<float>* rev[] = {&ps[2], &ps[1], &ps[0]};
        CHECK(std::abs(trainer::eval_loss_members(fwd, w.split.validation.windows) -
                       trainer::eval_loss_members(rev, w.split.validation.windows)) < 1e-9);
        const auto cmp = compare_batches(fwd, w.split.validation.windows, 2);
        CHECK(cmp.ensemble_nll.size() == 4);
        for (std::size_t i = 0; i < cmp.ensemble_nll.size(); ++i)
            CHECK(cmp.ensemble_nll[i] <= cmp.mean_member_nll[i] + 1e-9);
    }
    SUBCASE("missing member") {
        EnsembleSpec spec{{members[0].ledger_key, "0000000000000000"}, {}};
        try {
            ensemble_eval(spec, w.env);
            FAIL("expected MissingMember");
        } catch (const LabError& e) {
            CHECK(e.kind() == ErrorKind::MissingMember);
        }
        std::filesystem::remove(trainer::checkpoint_path(w.env, members[1].ledger_key));
        CHECK_THROWS_AS(load_member(members[1].ledger_key, w.env), LabError);
    }
    SUBCASE("spec json round trip") {
        const auto spec = spec_for(members);
        const auto back = EnsembleSpec::from_json(spec.to_json());
        CHECK(back.member_keys == spec.member_keys);
        CHECK(back.member_config == spec.member_config);
    }
}
