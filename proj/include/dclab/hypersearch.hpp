// SPDX-License-Identifier: Apache-2.0
//
// Locally-optimal hyperparameter search on a discrete lattice: neighborhoods
// of +-1 index on one axis, coordinate descent that moves only on strict
// improvement, and certification of the result.

#pragma once

#include "dclab/ledger.hpp"
#include "dclab/trainer.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dclab::search {

using GridPoint = std::vector<int>;

/// A box lattice. `priority` lists axis indices in tie-break order: when two
/// candidates tie on loss, the one with the lower index on priority[0] wins,
/// then priority[1], and so on.
struct Lattice {
    std::vector<int> sizes;
    std::vector<int> priority;

    static Lattice box(std::vector<int> sizes);  // priority = axis order
    std::size_t dims() const noexcept { return sizes.size(); }
    bool contains(const GridPoint& p) const;
    std::size_t volume() const;
    GridPoint midpoint() const;  // (size - 1) / 2 on every axis
    /// True when a should be preferred over b at equal loss.
    bool prefer(const GridPoint& a, const GridPoint& b) const;
};

/// Points differing by +-1 on exactly one axis, clipped at the axis ends.
/// Order: axis by axis, minus before plus.
std::vector<GridPoint> neighbors(const Lattice& lattice, const GridPoint& p);

struct Evaluation {
    double loss = 0.0;
    bool cached = false;  // served from a persistent cache rather than computed
};

using Oracle = std::function<Evaluation(const GridPoint&)>;
using PlainOracle = std::function<double(const GridPoint&)>;
Oracle wrap(PlainOracle f);

struct TranscriptEntry {
    GridPoint point;
    double loss = 0.0;
    bool cached = false;
};

struct CertifiedOptimum {
    GridPoint point;
    double loss = 0.0;
    std::vector<std::pair<GridPoint, double>> neighbor_losses;
    std::size_t evaluations_used = 0;  // distinct oracle calls
    bool certified = false;
    bool budget_exhausted = false;
    std::vector<TranscriptEntry> transcript;  // every oracle call in order
    std::vector<double> trajectory;           // incumbent losses, strictly decreasing
};

/// Evaluate the seed, then repeatedly evaluate the incumbent's neighbors and
/// move to the best one if it is strictly better. Each point is evaluated at
/// most once. Losses that are NaN count as +inf. On budget exhaustion the best
/// point so far comes back uncertified with budget_exhausted set.
CertifiedOptimum coordinate_descent(const Lattice& lattice, const Oracle& oracle, const GridPoint& seed,
                                    std::size_t budget);

/// True iff no neighbor has strictly lower loss than p.
bool certify(const Lattice& lattice, const GridPoint& p, const Oracle& oracle);

/// Brute force over every lattice point; ties resolved by the lattice priority.
CertifiedOptimum exhaustive(const Lattice& lattice, const Oracle& oracle);

struct GridAxes {
    std::vector<double> lr;
    std::vector<int> epochs;
    std::vector<double> wd;
    std::vector<int> batch;  // empty: batch size comes from the base spec

    /// lr {1,3} x 10^-k from 1e-4 to 3e-3, epochs 1..64, wd {0} U 0.1 * 2^j up to 6.4.
    static GridAxes paper();
    /// Smaller caps for desk runs.
    static GridAxes desk();

    void validate() const;
    /// Axes lr, epochs, wd[, batch]; ties prefer lower epochs, then wd, then lr.
    Lattice lattice() const;
    trainer::Hyper hyper_at(const GridPoint& p, const trainer::Hyper& base) const;
    /// Grid index of a hyper; throws BadConfig when a value is off-grid.
    GridPoint index_of(const trainer::Hyper& h) const;

    ojson to_json() const;
    static GridAxes from_json(const ojson& j);
};

enum class Recipe { Standard, Regularized };
std::string to_string(Recipe r);
Recipe recipe_from_string(const std::string& s);

/// Standard keeps only wd 0.1 on the wd axis; regularized keeps the full axes.
GridAxes axes_for(Recipe r, const GridAxes& axes);

struct RecipeSearch {
    Recipe recipe = Recipe::Regularized;
    GridAxes axes;
    CertifiedOptimum optimum;
    trainer::Hyper best;
    std::string best_key;  // ledger key of the certified run
    std::vector<std::string> run_keys;  // ledger key per transcript entry

    ojson to_json() const;
};

/// Coordinate descent with oracle = final validation loss of train(spec);
/// failed runs are +inf. seed_guess defaults to the lattice midpoint.
RecipeSearch search_recipe(const trainer::RunSpec& base, const trainer::RunEnv& env, Recipe recipe,
                           const GridAxes& axes, std::optional<trainer::Hyper> seed_guess = std::nullopt,
                           std::size_t budget = 200);

/// Trains every point of the recipe's grid.
RecipeSearch exhaustive_recipe(const trainer::RunSpec& base, const trainer::RunEnv& env, Recipe recipe,
                               const GridAxes& axes);

ojson to_json(const CertifiedOptimum& opt);

}  // namespace dclab::search
