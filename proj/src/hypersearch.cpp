// SPDX-License-Identifier: Apache-2.0
#include "dclab/hypersearch.hpp"

#include "dclab/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dclab::search {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sanitize(double x) { return std::isnan(x) ? kInf : x; }

ojson loss_json(double x) { return std::isfinite(x) ? ojson(x) : ojson(nullptr); }

template <class T>
void check_increasing(const std::vector<T>& v, const std::string& name) {
    require(!v.empty(), ErrorKind::BadConfig, name + " axis is empty");
    for (std::size_t i = 1; i < v.size(); ++i)
        require(v[i - 1] < v[i], ErrorKind::BadConfig, name + " axis must be strictly increasing");
}

template <class T>
int find_on_axis(const std::vector<T>& axis, T value, const std::string& name) {
    for (std::size_t i = 0; i < axis.size(); ++i) {
        if constexpr (std::is_floating_point_v<T>) {
            if (std::abs(axis[i] - value) <= 1e-12 * std::max(1.0, std::abs(value))) return static_cast<int>(i);
        } else if (axis[i] == value) {
            return static_cast<int>(i);
        }
    }
    fail(ErrorKind::BadConfig, name + " value is not on the grid");
}

}  // namespace

Lattice Lattice::box(std::vector<int> sizes) {
    Lattice l;
    l.priority.resize(sizes.size());
    std::iota(l.priority.begin(), l.priority.end(), 0);
    l.sizes = std::move(sizes);
    return l;
}

bool Lattice::contains(const GridPoint& p) const {
    if (p.size() != sizes.size()) return false;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] < 0 || p[i] >= sizes[i]) return false;
    return true;
}

std::size_t Lattice::volume() const {
    std::size_t v = 1;
    for (int s : sizes) v *= static_cast<std::size_t>(s);
    return v;
}

GridPoint Lattice::midpoint() const {
    GridPoint p;
    for (int s : sizes) p.push_back((s - 1) / 2);
    return p;
}

bool Lattice::prefer(const GridPoint& a, const GridPoint& b) const {
    for (int ax : priority)
        if (a[ax] != b[ax]) return a[ax] < b[ax];
    return false;
}

std::vector<GridPoint> neighbors(const Lattice& lattice, const GridPoint& p) {
    require(lattice.contains(p), ErrorKind::Precondition, "point is outside the lattice");
    std::vector<GridPoint> out;
    for (std::size_t ax = 0; ax < p.size(); ++ax) {
        for (int d : {-1, 1}) {
            GridPoint q = p;
            q[ax] += d;
            if (q[ax] >= 0 && q[ax] < lattice.sizes[ax]) out.push_back(std::move(q));
        }
    }
    return out;
}

Oracle wrap(PlainOracle f) {
    return [f = std::move(f)](const GridPoint& p) { return Evaluation{f(p), false}; };
}

namespace {

class CachedOracle {
public:
    CachedOracle(const Oracle& oracle, CertifiedOptimum& out) : oracle_(oracle), out_(out) {}

    bool known(const GridPoint& p) const { return seen_.count(p) != 0; }
    double operator()(const GridPoint& p) {
        if (auto it = seen_.find(p); it != seen_.end()) return it->second;
        const Evaluation e = oracle_(p);
        const double loss = sanitize(e.loss);
        seen_[p] = loss;
        out_.transcript.push_back({p, loss, e.cached});
        ++out_.evaluations_used;
        return loss;
    }

private:
    const Oracle& oracle_;
    CertifiedOptimum& out_;
    std::map<GridPoint, double> seen_;
};

}  // namespace

CertifiedOptimum coordinate_descent(const Lattice& lattice, const Oracle& oracle, const GridPoint& seed,
                                    std::size_t budget) {
    require(lattice.contains(seed), ErrorKind::Precondition, "seed point is outside the lattice");
    require(budget >= neighbors(lattice, seed).size() + 1, ErrorKind::Precondition,
            "budget must cover the seed and its neighbors");

    CertifiedOptimum out;
    CachedOracle f(oracle, out);
    GridPoint cur = seed;
    double cur_loss = f(cur);
    out.trajectory.push_back(cur_loss);

    // strictly better than the incumbent, ties by lattice priority
    auto pick = [&](const std::vector<std::pair<GridPoint, double>>& losses) {
        const std::pair<GridPoint, double>* best = nullptr;
        for (const auto& nl : losses) {
            if (!(nl.second < cur_loss)) continue;
            if (!best || nl.second < best->second ||
                (nl.second == best->second && lattice.prefer(nl.first, best->first)))
                best = &nl;
        }
        return best;
    };

    for (;;) {
        const auto nbrs = neighbors(lattice, cur);
        std::vector<std::pair<GridPoint, double>> losses;
        for (const auto& q : nbrs) {
            if (!f.known(q) && out.evaluations_used >= budget) {
                const auto* best = pick(losses);
                out.point = best ? best->first : cur;
                out.loss = best ? best->second : cur_loss;
                if (best) out.trajectory.push_back(best->second);
                out.neighbor_losses = std::move(losses);
                out.budget_exhausted = true;
                return out;
            }
            losses.emplace_back(q, f(q));
        }
        const auto* best = pick(losses);
        if (!best) {
            out.point = cur;
            out.loss = cur_loss;
            out.neighbor_losses = std::move(losses);
            out.certified = true;
            return out;
        }
        cur = best->first;
        cur_loss = best->second;
        out.trajectory.push_back(cur_loss);
    }
}

bool certify(const Lattice& lattice, const GridPoint& p, const Oracle& oracle) {
    const double here = sanitize(oracle(p).loss);
    for (const auto& q : neighbors(lattice, p))
        if (sanitize(oracle(q).loss) < here) return false;
    return true;
}

CertifiedOptimum exhaustive(const Lattice& lattice, const Oracle& oracle) {
    require(lattice.dims() > 0 && lattice.volume() > 0, ErrorKind::Precondition, "empty lattice");
    CertifiedOptimum out;
    CachedOracle f(oracle, out);
    GridPoint p(lattice.dims(), 0);
    bool have = false;
    for (;;) {
        const double l = f(p);
        if (!have || l < out.loss || (l == out.loss && lattice.prefer(p, out.point))) {
            out.point = p;
            out.loss = l;
            have = true;
        }
        std::size_t ax = 0;
        while (ax < p.size() && ++p[ax] == lattice.sizes[ax]) p[ax++] = 0;
        if (ax == p.size()) break;
    }
    for (const auto& q : neighbors(lattice, out.point)) out.neighbor_losses.emplace_back(q, f(q));
    out.certified = true;
    out.trajectory.push_back(out.loss);
    return out;
}

GridAxes GridAxes::paper() {
    GridAxes g;
    g.lr = {1e-4, 3e-4, 1e-3, 3e-3};
    g.epochs = {1, 2, 4, 8, 16, 32, 64};
    g.wd = {0.0, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 6.4};
    return g;
}

GridAxes GridAxes::desk() {
    GridAxes g;
    g.lr = {1e-3, 3e-3};
    g.epochs = {1, 2, 4, 8, 16};
    g.wd = {0.0, 0.1, 0.2, 0.4, 0.8, 1.6};
    return g;
}

void GridAxes::validate() const {
    check_increasing(lr, "lr");
    check_increasing(epochs, "epochs");
    check_increasing(wd, "wd");
    if (!batch.empty()) check_increasing(batch, "batch");
    require(lr.front() > 0.0, ErrorKind::BadConfig, "lr values must be positive");
    require(epochs.front() >= 1, ErrorKind::BadConfig, "epoch values must be >= 1");
    require(wd.front() >= 0.0, ErrorKind::BadConfig, "wd values must be non-negative");
    if (!batch.empty()) require(batch.front() >= 1, ErrorKind::BadConfig, "batch values must be >= 1");
}

Lattice GridAxes::lattice() const {
    Lattice l;
    l.sizes = {static_cast<int>(lr.size()), static_cast<int>(epochs.size()), static_cast<int>(wd.size())};
    l.priority = {1, 2, 0};
    if (!batch.empty()) {
        l.sizes.push_back(static_cast<int>(batch.size()));
        l.priority.push_back(3);
    }
    return l;
}

trainer::Hyper GridAxes::hyper_at(const GridPoint& p, const trainer::Hyper& base) const {
    require(lattice().contains(p), ErrorKind::Precondition, "grid point out of range");
    trainer::Hyper h = base;
    h.peak_lr = lr[p[0]];
    h.epochs = epochs[p[1]];
    h.weight_decay = wd[p[2]];
    if (!batch.empty()) h.batch_size = batch[p[3]];
    return h;
}

GridPoint GridAxes::index_of(const trainer::Hyper& h) const {
    GridPoint p{find_on_axis(lr, h.peak_lr, "lr"), find_on_axis(epochs, h.epochs, "epochs"),
                find_on_axis(wd, h.weight_decay, "wd")};
    if (!batch.empty()) p.push_back(find_on_axis(batch, h.batch_size, "batch"));
    return p;
}

ojson GridAxes::to_json() const {
    ojson j{{"lr", lr}, {"epochs", epochs}, {"wd", wd}};
    if (!batch.empty()) j["batch"] = batch;
    return j;
}

GridAxes GridAxes::from_json(const ojson& j) {
    GridAxes g;
    g.lr = j.at("lr").get<std::vector<double>>();
    g.epochs = j.at("epochs").get<std::vector<int>>();
    g.wd = j.at("wd").get<std::vector<double>>();
    if (j.contains("batch")) g.batch = j.at("batch").get<std::vector<int>>();
    g.validate();
    return g;
}

std::string to_string(Recipe r) { return r == Recipe::Standard ? "standard" : "regularized"; }

Recipe recipe_from_string(const std::string& s) {
    if (s == "standard") return Recipe::Standard;
    if (s == "regularized") return Recipe::Regularized;
    fail(ErrorKind::BadConfig, "unknown recipe '" + s + "'");
}

GridAxes axes_for(Recipe r, const GridAxes& axes) {
    GridAxes g = axes;
    if (r == Recipe::Standard) g.wd = {0.1};
    g.validate();
    return g;
}

namespace {

Oracle training_oracle(const trainer::RunSpec& base, const trainer::RunEnv& env, const GridAxes& g,
                       std::map<GridPoint, std::string>& keys) {
    return [&base, &env, &g, &keys](const GridPoint& p) {
        trainer::RunSpec spec = base;
        spec.hyper = g.hyper_at(p, base.hyper);
        const auto rec = trainer::train(spec, env);
        keys[p] = rec.ledger_key;
        return Evaluation{rec.objective(), rec.cached};
    };
}

}  // namespace

RecipeSearch search_recipe(const trainer::RunSpec& base, const trainer::RunEnv& env, Recipe recipe,
                           const GridAxes& axes, std::optional<trainer::Hyper> seed_guess, std::size_t budget) {
    RecipeSearch rs;
    rs.recipe = recipe;
    rs.axes = axes_for(recipe, axes);
    const Lattice lat = rs.axes.lattice();
    GridPoint seed = lat.midpoint();
    if (seed_guess) {
        trainer::Hyper g = *seed_guess;
        if (recipe == Recipe::Standard) g.weight_decay = 0.1;
        seed = rs.axes.index_of(g);
    }
    std::map<GridPoint, std::string> keys;
    rs.optimum = coordinate_descent(lat, training_oracle(base, env, rs.axes, keys), seed, budget);
    for (const auto& t : rs.optimum.transcript) rs.run_keys.push_back(keys[t.point]);
    rs.best = rs.axes.hyper_at(rs.optimum.point, base.hyper);
    rs.best_key = keys[rs.optimum.point];
    return rs;
}

RecipeSearch exhaustive_recipe(const trainer::RunSpec& base, const trainer::RunEnv& env, Recipe recipe,
                               const GridAxes& axes) {
    RecipeSearch rs;
    rs.recipe = recipe;
    rs.axes = axes_for(recipe, axes);
    std::map<GridPoint, std::string> keys;
    rs.optimum = exhaustive(rs.axes.lattice(), training_oracle(base, env, rs.axes, keys));
    for (const auto& t : rs.optimum.transcript) rs.run_keys.push_back(keys[t.point]);
    rs.best = rs.axes.hyper_at(rs.optimum.point, base.hyper);
    rs.best_key = keys[rs.optimum.point];
    return rs;
}

ojson to_json(const CertifiedOptimum& opt) {
    ojson transcript = ojson::array();
    for (const auto& t : opt.transcript)
        transcript.push_back({{"point", t.point}, {"loss", loss_json(t.loss)}});
    ojson nbrs = ojson::array();
    for (const auto& [p, l] : opt.neighbor_losses) nbrs.push_back({{"point", p}, {"loss", loss_json(l)}});
    return ojson{{"point", opt.point},
                 {"loss", loss_json(opt.loss)},
                 {"certified", opt.certified},
                 {"budget_exhausted", opt.budget_exhausted},
                 {"evaluations_used", opt.evaluations_used},
                 {"neighbor_losses", nbrs},
                 {"transcript", transcript}};
}

ojson RecipeSearch::to_json() const {
    return ojson{{"kind", "search"},
                 {"recipe", search::to_string(recipe)},
                 {"axes", axes.to_json()},
                 {"best", trainer::to_json(best)},
                 {"best_key", best_key},
                 {"certificate", search::to_json(optimum)},
                 {"ledger_keys", run_keys}};
}

}  // namespace dclab::search
