// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dclab/common.hpp"
#include "dclab/hypersearch.hpp"
#include "dclab/rng.hpp"
#include "unit/fixture.hpp"

#include <cmath>
#include <limits>
#include <set>

using namespace dclab;
using namespace dclab::search;

namespace {

double quad(const GridPoint& p) { return std::pow(p[0] - 2, 2) + std::pow(p[1] - 3, 2) + std::pow(p[2] - 1, 2); }

// Every oracle call is logged so duplicates can be audited.
struct Counting {
    PlainOracle f;
    std::vector<GridPoint> calls;
    Oracle oracle() {
        return [this](const GridPoint& p) {
            calls.push_back(p);
            return Evaluation{f(p), false};
        };
    }
    bool has_duplicates() const {
        std::set<GridPoint> s(calls.begin(), calls.end());
        return s.size() != calls.size();
    }
};

GridPoint all_points_next(GridPoint p, const Lattice& l, bool& done) {
    std::size_t ax = 0;
    while (ax < p.size() && ++p[ax] == l.sizes[ax]) p[ax++] = 0;
    done = ax == p.size();
    return p;
}

}  // namespace

TEST_CASE("neighbors on interior, corner and wd axis") {
    const auto lat = Lattice::box({5, 6, 4});
    CHECK(neighbors(lat, {2, 2, 2}).size() == 6);
    CHECK(neighbors(lat, {0, 0, 0}).size() == 3);

    const auto axes = GridAxes::paper();
    const auto glat = axes.lattice();
    GridPoint p{1, 1, 1};
    REQUIRE(axes.wd[1] == 0.1);
    std::vector<double> wds;
    for (const auto& q : neighbors(glat, p))
        if (q[2] != p[2]) wds.push_back(axes.wd[q[2]]);
    CHECK(wds == std::vector<double>{0.0, 0.2});
}

TEST_CASE("separable landscape certifies the global minimum from every seed") {
    const auto lat = Lattice::box({5, 6, 4});
    const auto brute = exhaustive(lat, wrap(quad));
    CHECK(brute.point == GridPoint{2, 3, 1});
    GridPoint s(3, 0);
    bool done = false;
    while (!done) {
        Counting c{quad, {}};
        const auto r = coordinate_descent(lat, c.oracle(), s, 1000);
        CHECK(r.certified);
        CHECK(r.point == brute.point);
        CHECK_FALSE(c.has_duplicates());
        s = all_points_next(s, lat, done);
    }
}

TEST_CASE("constant oracle certifies the seed immediately") {
    const auto lat = Lattice::box({4, 4, 4});
    const auto r = coordinate_descent(lat, wrap([](const GridPoint&) { return 1.5; }), {1, 2, 3}, 100);
    CHECK(r.certified);
    CHECK(r.point == GridPoint{1, 2, 3});
    CHECK(r.evaluations_used == 1 + neighbors(lat, {1, 2, 3}).size());
}

TEST_CASE("monotone walk on one axis") {
    const auto lat = Lattice::box({9});
    const auto r = coordinate_descent(lat, wrap([](const GridPoint& p) { return -double(p[0]); }), {0}, 100);
    CHECK(r.certified);
    CHECK(r.point == GridPoint{8});
    for (std::size_t i = 1; i < r.trajectory.size(); ++i) CHECK(r.trajectory[i] < r.trajectory[i - 1]);
}

TEST_CASE("certify follows the strict definition") {
    const auto lat = Lattice::box({5, 6, 4});
    CHECK(certify(lat, {2, 3, 1}, wrap(quad)));
    CHECK_FALSE(certify(lat, {3, 3, 1}, wrap(quad)));
    CHECK(certify(lat, {1, 1, 1}, wrap([](const GridPoint&) { return 0.0; })));

    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::map<GridPoint, double> table;
        auto f = [&](const GridPoint& p) {
            auto [it, ins] = table.try_emplace(p, 0.0);
            if (ins) it->second = static_cast<double>(rng.below(4));
            return it->second;
        };
        GridPoint p{static_cast<int>(rng.below(5)), static_cast<int>(rng.below(6)), static_cast<int>(rng.below(4))};
        const double here = f(p);
        bool expect = true;
        for (const auto& q : neighbors(lat, p)) expect = expect && !(f(q) < here);
        CHECK(certify(lat, p, wrap(f)) == expect);
    }
}

TEST_CASE("random separable convex lattices match brute force") {
    Rng rng(2024);
    for (int inst = 0; inst < 60; ++inst) {
        std::vector<int> sizes;
        std::vector<std::vector<double>> terms;
        for (int ax = 0; ax < 3; ++ax) {
            const int n = 2 + static_cast<int>(rng.below(9));
            sizes.push_back(n);
            // strictly convex per axis: c * (i - m)^2 with a random real m
            const double m = rng.uniform() * (n - 1), c = 0.1 + rng.uniform();
            std::vector<double> t;
            for (int i = 0; i < n; ++i) t.push_back(c * (i - m) * (i - m));
            terms.push_back(t);
        }
        const auto lat = Lattice::box(sizes);
        PlainOracle f = [&](const GridPoint& p) { return terms[0][p[0]] + terms[1][p[1]] + terms[2][p[2]]; };
        const auto brute = exhaustive(lat, wrap(f));
        Counting c{f, {}};
        GridPoint seed{static_cast<int>(rng.below(sizes[0])), static_cast<int>(rng.below(sizes[1])),
                       static_cast<int>(rng.below(sizes[2]))};
        const auto r = coordinate_descent(lat, c.oracle(), seed, lat.volume());
        CHECK(r.certified);
        CHECK(r.loss == brute.loss);
        CHECK_FALSE(c.has_duplicates());
        for (std::size_t i = 1; i < r.trajectory.size(); ++i) CHECK(r.trajectory[i] < r.trajectory[i - 1]);
    }
}

TEST_CASE("ties prefer lower epochs, then wd, then lr") {
    const auto lat = GridAxes::paper().lattice();
    // from (1,1,1) all six neighbors score the same improvement
    auto f = [](const GridPoint& p) { return p == GridPoint{1, 1, 1} ? 1.0 : 0.0; };
    const auto r = coordinate_descent(lat, wrap(f), {1, 1, 1}, 100);
    CHECK(r.trajectory.size() == 2);
    CHECK(r.transcript[0].point == GridPoint{1, 1, 1});
    // first move goes to epochs - 1
    bool moved_epochs = false;
    for (const auto& t : r.transcript)
        if (t.point == GridPoint{1, 0, 1}) moved_epochs = true;
    CHECK(moved_epochs);
    CHECK(r.point[1] == 0);
    CHECK(lat.prefer({1, 0, 1}, {1, 1, 0}));
    CHECK(lat.prefer({1, 1, 0}, {0, 1, 1}));
}

TEST_CASE("budget exhaustion returns best so far uncertified") {
    const auto lat = Lattice::box({10});
    const auto r = coordinate_descent(lat, wrap([](const GridPoint& p) { return -double(p[0]); }), {0}, 4);
    CHECK(r.budget_exhausted);
    CHECK_FALSE(r.certified);
    CHECK(r.evaluations_used == 4);
    CHECK(r.point == GridPoint{3});
    CHECK_THROWS_AS(coordinate_descent(lat, wrap([](const GridPoint&) { return 0.0; }), {5}, 2), LabError);
}

TEST_CASE("nan losses count as +inf") {
    const auto lat = Lattice::box({3});
    auto f = [](const GridPoint& p) { return p[0] == 2 ? std::nan("") : 1.0 - p[0]; };
    const auto r = coordinate_descent(lat, wrap(f), {0}, 10);
    CHECK(r.point == GridPoint{1});
    CHECK(std::isinf(r.neighbor_losses.back().second));
}

TEST_CASE("grid presets and index round trip") {
    const auto p = GridAxes::paper();
    CHECK(p.lr.back() == 3e-3);
    CHECK(p.epochs.back() == 64);
    CHECK(p.wd.front() == 0.0);
    CHECK(p.wd.back() == 6.4);
    for (std::size_t i = 2; i < p.wd.size(); ++i) CHECK(p.wd[i] == doctest::Approx(2 * p.wd[i - 1]));
    const trainer::Hyper h = p.hyper_at({3, 4, 5}, {});
    CHECK(h.peak_lr == 3e-3);
    CHECK(h.epochs == 16);
    CHECK(h.weight_decay == 1.6);
    CHECK(p.index_of(h) == GridPoint{3, 4, 5});
    trainer::Hyper off = h;
    off.epochs = 3;
    CHECK_THROWS_AS(p.index_of(off), LabError);

    const auto std_axes = axes_for(Recipe::Standard, p);
    CHECK(std_axes.wd == std::vector<double>{0.1});
    GridAxes bad = p;
    bad.epochs = {2, 2};
    CHECK_THROWS_AS(bad.validate(), LabError);
    CHECK(GridAxes::from_json(p.to_json()).wd == p.wd);
}

TEST_CASE("recipe search on real runs") {
    fixture::Tiny w;
    GridAxes axes;
    axes.lr = {1e-3, 3e-3};
    axes.epochs = {1, 2};
    axes.wd = {0.0, 0.1, 0.4};

    const auto std_ex = exhaustive_recipe(w.spec, w.env, Recipe::Standard, axes);
    const auto reg_ex = exhaustive_recipe(w.spec, w.env, Recipe::Regularized, axes);
    CHECK(reg_ex.optimum.loss <= std_ex.optimum.loss);
    CHECK(std_ex.optimum.transcript.size() == 4);
    CHECK(reg_ex.optimum.transcript.size() == 12);
    // standard runs are reused by the regularized grid
    std::size_t cached = 0;
    for (const auto& t : reg_ex.optimum.transcript) cached += t.cached;
    CHECK(cached == 4);

    const auto cd = search_recipe(w.spec, w.env, Recipe::Regularized, axes);
    CHECK(cd.optimum.certified);
    for (const auto& t : cd.optimum.transcript) CHECK(t.cached);
    CHECK(cd.best_key.size() == 16);
    const auto j = cd.to_json();
    CHECK(j["recipe"] == "regularized");
    CHECK(j["certificate"]["transcript"].size() == cd.optimum.transcript.size());
    CHECK(recipe_from_string("standard") == Recipe::Standard);
    CHECK_THROWS_AS(recipe_from_string("other"), LabError);
}
