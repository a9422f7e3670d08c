// SPDX-License-Identifier: Apache-2.0
//
// Saturating power laws L(x) = A / x^alpha + E: fitting, asymptotes, tiered
// (asymptote-of-asymptotes) fits, data-requirement inversion and
// data-efficiency ratios.
//
// Scales are conventionally given in billions (members are plain counts).
// Rescaling x -> s * x changes only A (to A * s^alpha); alpha and E are unit
// free.

#pragma once

#include "dclab/ledger.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace dclab::scaling {

struct LawParams {
    double A = 0.0;
    double alpha = 0.0;
    double E = 0.0;

    double predict(double x) const;
};

struct FitOptions {
    LawParams initial{1.0, 0.5, 2.0};
    bool nonnegative = true;  // E projected onto [0, inf); A and alpha are positive by parameterization
    int max_iterations = 1000;
    double tolerance = 1e-15;  // relative SSE decrease that counts as stalled
    int multistart = 8;
    std::uint64_t jitter_seed = 0;
};

struct Point {
    double x = 0.0;
    double loss = 0.0;
};

enum class FitStatus { Converged, NoConvergence };

struct PowerLawFit {
    LawParams params;
    double residual_sse = 0.0;
    std::vector<Point> points;
    FitOptions options;
    FitStatus status = FitStatus::Converged;
    int iterations = 0;
    /// SSE after every accepted iteration of the winning start (first entry is
    /// the starting SSE). Non-increasing.
    std::vector<double> sse_trace;

    double A() const noexcept { return params.A; }
    double alpha() const noexcept { return params.alpha; }
    double E() const noexcept { return params.E; }
    bool converged() const noexcept { return status == FitStatus::Converged; }
};

/// Least squares over sum_i (A / x_i^alpha + E - L_i)^2 by damped Gauss-Newton
/// in (log A, log alpha, E) from several starts; returns the lowest-SSE fit
/// (ties go to the smaller E). Throws DegenerateInput for fewer than three
/// distinct x, non-positive x or non-finite losses. Never throws on
/// non-convergence: the result is flagged instead.
PowerLawFit fit_power_law(std::span<const Point> points, const FitOptions& options = {});

double asymptote(const PowerLawFit& fit);

/// One loss observation for a tiered fit. coords[i] is the value on
/// tier_axes[i] (innermost axis first).
struct TierPoint {
    std::vector<double> coords;
    double loss = 0.0;
};

struct GroupFit {
    std::vector<double> key;  // coordinates on the outer axes
    PowerLawFit fit;
};

struct TierLevel {
    std::string axis;
    std::vector<GroupFit> groups;
};

struct TieredFit {
    std::vector<std::string> tier_axes;
    std::vector<TierLevel> levels;  // levels[0] is the innermost tier
    double final_asymptote = 0.0;
    std::vector<std::string> warnings;

    const PowerLawFit& outer_fit() const { return levels.back().groups.front().fit; }
};

/// Fits the innermost axis per group, hands each group's asymptote to the next
/// axis as a point, and repeats until one law remains.
TieredFit tiered_fit(std::span<const TierPoint> points, const std::vector<std::string>& tier_axes,
                     const FitOptions& options = {});

/// D' = (A / (target_loss - E))^(1 / alpha). Throws UnreachableTarget when
/// target_loss <= E.
double interpolate_data_requirement(const LawParams& baseline, double target_loss);
double interpolate_data_requirement(const PowerLawFit& baseline, double target_loss);

/// D' / d for a recipe that reached achieved_loss with d tokens.
double data_efficiency(const LawParams& baseline, double d, double achieved_loss);
double data_efficiency(const PowerLawFit& baseline, double d, double achieved_loss);

/// Efficiency between two laws that share alpha and E: (A_base / A_recipe)^(1/alpha).
double equal_shape_efficiency(double a_baseline, double a_recipe, double alpha);

struct SensitivityReport {
    std::vector<PowerLawFit> fits;
    std::vector<double> asymptotes;
    double spread = 0.0;  // max E - min E
    double threshold = 0.02;
    bool flagged = false;  // spread > threshold
};

SensitivityReport sensitivity(std::span<const std::vector<Point>> variants, const FitOptions& options = {},
                              double threshold = 0.02);

ojson to_json(const PowerLawFit& fit);
ojson to_json(const TieredFit& fit);

/// Parses CSV with a header row; the last two columns are x and loss, any
/// columns before them are group keys. Returns rows grouped by key string in
/// first-seen order.
struct CsvGroup {
    std::string key;
    std::vector<std::string> key_values;
    std::vector<Point> points;
};
std::vector<CsvGroup> read_points_csv(std::istream& is, std::vector<std::string>* key_columns = nullptr);

/// CSV of (group, A, alpha, E, residual).
void write_fits_csv(std::ostream& os, std::span<const std::pair<std::string, PowerLawFit>> fits);

}  // namespace dclab::scaling
