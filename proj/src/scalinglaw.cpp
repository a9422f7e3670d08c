// SPDX-License-Identifier: Apache-2.0
#include "dclab/scalinglaw.hpp"

#include "dclab/common.hpp"
#include "dclab/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

namespace dclab::scaling {

double LawParams::predict(double x) const { return A * std::pow(x, -alpha) + E; }

namespace {

// Working parameters: u = log A, w = log alpha, E.
struct Theta {
    double u, w, e;
    LawParams law() const { return {std::exp(u), std::exp(w), e}; }
};

double sse_of(const LawParams& p, std::span<const Point> pts) {
    double s = 0.0;
    for (const auto& pt : pts) {
        const double r = p.predict(pt.x) - pt.loss;
        s += r * r;
    }
    return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
}

struct StartResult {
    LawParams law;
    double sse;
    int iterations;
    bool converged;
    std::vector<double> trace;
};

StartResult run_lm(Theta th, std::span<const Point> pts, const FitOptions& opt, double floor) {
    const std::size_t n = pts.size();
    if (opt.nonnegative) th.e = std::max(th.e, 0.0);
    double sse = sse_of(th.law(), pts);
    StartResult res{th.law(), sse, 0, false, {sse}};
    if (!std::isfinite(sse)) return res;

    double lambda = 1e-3;
    Eigen::MatrixXd J(n, 3);
    Eigen::VectorXd r(n);
    int it = 0;
    for (; it < opt.max_iterations; ++it) {
        if (sse <= floor) {
            res.converged = true;
            break;
        }
        const double A = std::exp(th.u), alpha = std::exp(th.w);
        for (std::size_t i = 0; i < n; ++i) {
            const double lx = std::log(pts[i].x);
            const double t = A * std::exp(-alpha * lx);
            r(i) = t + th.e - pts[i].loss;
            J(i, 0) = t;
            J(i, 1) = -t * lx * alpha;
            J(i, 2) = 1.0;
        }
        const Eigen::Matrix3d H = J.transpose() * J;
        const Eigen::Vector3d g = J.transpose() * r;
        if (g.norm() <= 1e-300) {
            res.converged = true;
            break;
        }

        bool accepted = false;
        while (lambda < 1e16) {
            Eigen::Matrix3d M = H;
            for (int k = 0; k < 3; ++k) M(k, k) += lambda * std::max(H(k, k), 1e-12);
            const Eigen::Vector3d d = M.ldlt().solve(-g);
            Theta trial{th.u + d(0), th.w + d(1), th.e + d(2)};
            if (opt.nonnegative) trial.e = std::max(trial.e, 0.0);
            const double s = (d.allFinite() && std::abs(trial.w) < 50.0) ? sse_of(trial.law(), pts)
                                                                         : std::numeric_limits<double>::infinity();
            if (s < sse) {
                const double rel = (sse - s) / sse;
                th = trial;
                sse = s;
                res.trace.push_back(sse);
                lambda = std::max(lambda / 3.0, 1e-12);
                accepted = true;
                if (rel < opt.tolerance) res.converged = true;
                break;
            }
            lambda *= 4.0;
        }
        if (!accepted) {
            // no descent direction left at any damping: a stationary point
            res.converged = true;
            break;
        }
        if (res.converged) {
            ++it;
            break;
        }
    }
    res.law = th.law();
    res.sse = sse;
    res.iterations = it;
    return res;
}

// Start from a log-linear regression of log(L - E0) on log x.
Theta data_start(std::span<const Point> pts, const FitOptions& opt) {
    double lo = pts[0].loss, hi = pts[0].loss;
    for (const auto& p : pts) {
        lo = std::min(lo, p.loss);
        hi = std::max(hi, p.loss);
    }
    const double spread = std::max(hi - lo, 1e-6);
    double e0 = lo - 0.1 * spread;
    if (opt.nonnegative) e0 = std::max(e0, 0.0);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (const auto& p : pts) {
        if (p.loss - e0 <= 0.0) continue;
        const double lx = std::log(p.x), ly = std::log(p.loss - e0);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        ++m;
    }
    double alpha = 0.5, logA = std::log(spread);
    const double den = m * sxx - sx * sx;
    if (m >= 2 && std::abs(den) > 1e-12) {
        const double slope = (m * sxy - sx * sy) / den;
        if (slope < -1e-6) {
            alpha = -slope;
            logA = (sy - slope * sx) / m;
        }
    }
    return {logA, std::log(std::clamp(alpha, 1e-4, 20.0)), e0};
}

bool better(const StartResult& a, const StartResult& b) {
    if (!std::isfinite(b.sse)) return std::isfinite(a.sse);
    const double tie = 1e-12 * std::max(b.sse, 1e-300);
    if (a.sse < b.sse - tie) return true;
    if (a.sse <= b.sse + tie) return a.law.E < b.law.E;
    return false;
}

}  // namespace

PowerLawFit fit_power_law(std::span<const Point> points, const FitOptions& options) {
    std::vector<double> xs;
    double scale = 1.0;
    for (const auto& p : points) {
        require(std::isfinite(p.x) && p.x > 0.0, ErrorKind::DegenerateInput, "x must be positive and finite");
        require(std::isfinite(p.loss), ErrorKind::DegenerateInput, "loss must be finite");
        xs.push_back(p.x);
        scale += p.loss * p.loss;
    }
    std::sort(xs.begin(), xs.end());
    const auto distinct = std::unique(xs.begin(), xs.end()) - xs.begin();
    require(distinct >= 3, ErrorKind::DegenerateInput,
            "need at least 3 distinct x values, got " + std::to_string(distinct));
    require(options.initial.A > 0.0 && options.initial.alpha > 0.0, ErrorKind::BadConfig,
            "initial A and alpha must be positive");
    require(options.max_iterations > 0 && options.multistart >= 1, ErrorKind::BadConfig,
            "max_iterations and multistart must be positive");

    const double floor = 1e-30 * scale;
    std::vector<Theta> starts;
    starts.push_back({std::log(options.initial.A), std::log(options.initial.alpha), options.initial.E});
    if (options.multistart >= 2) starts.push_back(data_start(points, options));
    Rng rng(derive_seed(options.jitter_seed, 0x504C4157));
    while (static_cast<int>(starts.size()) < options.multistart) {
        const Theta& base = starts[starts.size() % 2];
        starts.push_back({base.u + rng.normal(), base.w + 0.5 * rng.normal(), base.e * (0.5 + rng.uniform())});
    }

    StartResult best{{}, std::numeric_limits<double>::infinity(), 0, false, {}};
    for (const auto& s : starts) {
        StartResult r = run_lm(s, points, options, floor);
        if (better(r, best)) best = std::move(r);
    }
    require(std::isfinite(best.sse), ErrorKind::DegenerateInput, "no start produced a finite residual");

    PowerLawFit fit;
    fit.params = best.law;
    fit.residual_sse = best.sse;
    fit.points.assign(points.begin(), points.end());
    fit.options = options;
    fit.status = best.converged ? FitStatus::Converged : FitStatus::NoConvergence;
    fit.iterations = best.iterations;
    fit.sse_trace = std::move(best.trace);
    return fit;
}

double asymptote(const PowerLawFit& fit) { return fit.params.E; }

namespace {

std::string key_string(const std::vector<double>& key) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < key.size(); ++i) os << (i ? ", " : "") << key[i];
    os << ')';
    return os.str();
}

}  // namespace

TieredFit tiered_fit(std::span<const TierPoint> points, const std::vector<std::string>& tier_axes,
                     const FitOptions& options) {
    require(!tier_axes.empty(), ErrorKind::BadConfig, "tiered fit needs at least one axis");
    for (const auto& p : points)
        require(p.coords.size() == tier_axes.size(), ErrorKind::ShapeMismatch,
                "point has " + std::to_string(p.coords.size()) + " coords, expected " +
                    std::to_string(tier_axes.size()));

    TieredFit out;
    out.tier_axes = tier_axes;
    static const std::vector<std::string> canonical{"K", "N", "D"};
    int last = -1;
    for (const auto& a : tier_axes) {
        const auto it = std::find(canonical.begin(), canonical.end(), a);
        if (it == canonical.end()) continue;
        const int pos = static_cast<int>(it - canonical.begin());
        if (pos < last) {
            out.warnings.push_back("tier order does not follow K, then N, then D");
            break;
        }
        last = pos;
    }

    std::vector<TierPoint> current(points.begin(), points.end());
    for (std::size_t level = 0; level < tier_axes.size(); ++level) {
        std::map<std::vector<double>, std::vector<Point>> groups;
        std::vector<std::vector<double>> order;
        for (const auto& p : current) {
            std::vector<double> key(p.coords.begin() + 1, p.coords.end());
            auto [it, inserted] = groups.try_emplace(key);
            if (inserted) order.push_back(key);
            it->second.push_back({p.coords.front(), p.loss});
        }
        require(!groups.empty(), ErrorKind::DegenerateInput, "tier " + tier_axes[level] + " has no points");

        TierLevel tl;
        tl.axis = tier_axes[level];
        std::vector<TierPoint> next;
        for (const auto& key : order) {
            PowerLawFit f;
            try {
                f = fit_power_law(groups[key], options);
            } catch (const LabError& e) {
                fail(e.kind(), "tier " + tl.axis + " group " + key_string(key) + ": " + e.what());
            }
            if (!f.converged())
                out.warnings.push_back("tier " + tl.axis + " group " + key_string(key) + " did not converge");
            if (!key.empty()) next.push_back({key, f.E()});
            tl.groups.push_back({key, std::move(f)});
        }
        out.levels.push_back(std::move(tl));
        current = std::move(next);
    }
    out.final_asymptote = out.outer_fit().E();
    return out;
}

double interpolate_data_requirement(const LawParams& b, double target_loss) {
    require(std::isfinite(target_loss), ErrorKind::DegenerateInput, "target loss must be finite");
    if (!(target_loss > b.E))
        fail(ErrorKind::UnreachableTarget,
             "target " + std::to_string(target_loss) + " is not above the asymptote " + std::to_string(b.E));
    require(b.A > 0.0 && b.alpha > 0.0, ErrorKind::DegenerateInput, "law needs positive A and alpha to invert");
    return std::pow(b.A / (target_loss - b.E), 1.0 / b.alpha);
}

double interpolate_data_requirement(const PowerLawFit& b, double target_loss) {
    return interpolate_data_requirement(b.params, target_loss);
}

double data_efficiency(const LawParams& b, double d, double achieved_loss) {
    require(d > 0.0, ErrorKind::Precondition, "d must be positive");
    return interpolate_data_requirement(b, achieved_loss) / d;
}

double data_efficiency(const PowerLawFit& b, double d, double achieved_loss) {
    return data_efficiency(b.params, d, achieved_loss);
}

double equal_shape_efficiency(double a_baseline, double a_recipe, double alpha) {
    require(a_baseline > 0.0 && a_recipe > 0.0 && alpha > 0.0, ErrorKind::Precondition,
            "numerators and exponent must be positive");
    return std::pow(a_baseline / a_recipe, 1.0 / alpha);
}

SensitivityReport sensitivity(std::span<const std::vector<Point>> variants, const FitOptions& options,
                              double threshold) {
    require(variants.size() >= 2, ErrorKind::Precondition, "sensitivity needs at least 2 variants");
    SensitivityReport rep;
    rep.threshold = threshold;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        try {
            rep.fits.push_back(fit_power_law(variants[i], options));
        } catch (const LabError& e) {
            fail(e.kind(), "variant " + std::to_string(i) + ": " + e.what());
        }
        rep.asymptotes.push_back(rep.fits.back().E());
    }
    const auto [lo, hi] = std::minmax_element(rep.asymptotes.begin(), rep.asymptotes.end());
    rep.spread = *hi - *lo;
    rep.flagged = rep.spread > threshold;
    return rep;
}

ojson to_json(const PowerLawFit& fit) {
    ojson pts = ojson::array();
    for (const auto& p : fit.points) pts.push_back({p.x, p.loss});
    return ojson{{"A", fit.params.A},
                 {"alpha", fit.params.alpha},
                 {"E", fit.params.E},
                 {"residual_sse", fit.residual_sse},
                 {"converged", fit.converged()},
                 {"iterations", fit.iterations},
                 {"points", pts},
                 {"fit_options",
                  {{"initial_guess", {fit.options.initial.A, fit.options.initial.alpha, fit.options.initial.E}},
                   {"nonnegative", fit.options.nonnegative},
                   {"max_iterations", fit.options.max_iterations},
                   {"tolerance", fit.options.tolerance},
                   {"multistart_count", fit.options.multistart}}}};
}

ojson to_json(const TieredFit& fit) {
    ojson levels = ojson::array();
    for (const auto& l : fit.levels) {
        ojson groups = ojson::array();
        for (const auto& g : l.groups) groups.push_back({{"key", g.key}, {"fit", to_json(g.fit)}});
        levels.push_back({{"axis", l.axis}, {"groups", groups}});
    }
    return ojson{{"tier_axes", fit.tier_axes},
                 {"levels", levels},
                 {"final_asymptote", fit.final_asymptote},
                 {"warnings", fit.warnings}};
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_number(const std::string& s, std::size_t lineno) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::Format, "line " + std::to_string(lineno) + ": not a number: '" + s + "'");
}

}  // namespace

std::vector<CsvGroup> read_points_csv(std::istream& is, std::vector<std::string>* key_columns) {
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::string> header;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") != std::string::npos) {
            header = split_csv(line);
            break;
        }
    }
    require(header.size() >= 2, ErrorKind::Format, "csv header needs at least x and loss columns");
    const std::size_t nkeys = header.size() - 2;
    if (key_columns) key_columns->assign(header.begin(), header.begin() + static_cast<std::ptrdiff_t>(nkeys));

    std::vector<CsvGroup> groups;
    std::map<std::string, std::size_t> index;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split_csv(line);
        require(cells.size() == header.size(), ErrorKind::Format,
                "line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " columns");
        std::vector<std::string> kv(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(nkeys));
        std::string key;
        for (std::size_t i = 0; i < kv.size(); ++i) key += (i ? "|" : "") + kv[i];
        auto [it, inserted] = index.try_emplace(key, groups.size());
        if (inserted) groups.push_back({key, kv, {}});
        groups[it->second].points.push_back(
            {parse_number(cells[nkeys], lineno), parse_number(cells[nkeys + 1], lineno)});
    }
    return groups;
}

void write_fits_csv(std::ostream& os, std::span<const std::pair<std::string, PowerLawFit>> fits) {
    os << "group,A,alpha,E,residual\n";
    const auto old = os.precision(17);
    for (const auto& [name, f] : fits)
        os << name << ',' << f.params.A << ',' << f.params.alpha << ',' << f.params.E << ',' << f.residual_sse
           << '\n';
    os.precision(old);
}

}  // namespace dclab::scaling
