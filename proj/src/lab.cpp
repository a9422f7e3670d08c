// SPDX-License-Identifier: Apache-2.0
#include "dclab/lab.hpp"

#include "dclab/common.hpp"
#include "dclab/ensemble.hpp"
#include "dclab/report.hpp"
#include "dclab/scalinglaw.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace dclab::lab {

namespace fs = std::filesystem;
using trainer::Hyper;
using trainer::RunRecord;
using trainer::RunSpec;

trainer::Hyper HyperOverride::apply(trainer::Hyper h) const {
    if (lr) h.peak_lr = *lr;
    if (epochs) h.epochs = *epochs;
    if (wd) h.weight_decay = *wd;
    if (batch) h.batch_size = *batch;
    h.validate();
    return h;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ojson num(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

double loss_value(const ojson& j) { return j.is_number() ? j.get<double>() : kInf; }

double millions(double v) { return v / 1e6; }

std::string describe(const RunRecord& r) {
    std::ostringstream o;
    o << r.ledger_key << "  " << (r.ok() ? "ok    " : "failed") << "  val " << report::fmt(r.final_val_loss)
      << "  lr " << report::fmt(r.spec.hyper.peak_lr) << " ep " << r.spec.hyper.epochs << " wd "
      << report::fmt(r.spec.hyper.weight_decay) << (r.cached ? "  (cached)" : "");
    return o.str();
}

ojson law_json(const scaling::LawParams& p) { return ojson{{"A", p.A}, {"alpha", p.alpha}, {"E", p.E}}; }

scaling::LawParams law_from_json(const ojson& j) {
    return {j.at("A").get<double>(), j.at("alpha").get<double>(), j.at("E").get<double>()};
}

/// Fits when there are at least three distinct finite points; otherwise notes why not.
std::optional<scaling::PowerLawFit> try_fit(const std::vector<scaling::Point>& pts, const std::string& what,
                                            std::vector<std::string>& warnings) {
    std::vector<scaling::Point> finite;
    for (const auto& p : pts)
        if (std::isfinite(p.loss)) finite.push_back(p);
    std::set<double> xs;
    for (const auto& p : finite) xs.insert(p.x);
    if (xs.size() < 3) {
        warnings.push_back(what + ": fewer than 3 distinct points, no law fitted");
        return std::nullopt;
    }
    auto fit = scaling::fit_power_law(finite);
    if (!fit.converged()) warnings.push_back(what + ": fit hit the iteration cap");
    return fit;
}

ojson series_json(const std::string& label, const std::vector<scaling::Point>& pts,
                  const std::optional<scaling::LawParams>& law) {
    ojson p = ojson::array();
    for (const auto& pt : pts) p.push_back({pt.x, num(pt.loss)});
    return ojson{{"label", label}, {"points", p}, {"law", law ? law_json(*law) : ojson(nullptr)}};
}

ojson plot_json(const std::string& name, const std::string& title, const std::string& x_label, ojson series,
                const ojson& references) {
    return ojson{{"name", name},
                 {"title", title},
                 {"x_label", x_label},
                 {"y_label", "validation loss"},
                 {"series", std::move(series)},
                 {"references", references}};
}

report::Plot plot_from_json(const ojson& j) {
    report::Plot p;
    p.title = j.at("title").get<std::string>();
    p.x_label = j.at("x_label").get<std::string>();
    p.y_label = j.value("y_label", "validation loss");
    for (const auto& s : j.at("series")) {
        report::Series out;
        out.label = s.at("label").get<std::string>();
        for (const auto& pt : s.at("points")) out.points.push_back({pt[0].get<double>(), loss_value(pt[1])});
        if (!s.at("law").is_null()) out.law = law_from_json(s.at("law"));
        p.series.push_back(std::move(out));
    }
    for (const auto& r : j.at("references")) p.references.push_back({r.at("label"), r.at("value")});
    return p;
}

std::string table_csv(const ojson& t) {
    std::ostringstream o;
    const auto& cols = t.at("columns");
    for (std::size_t i = 0; i < cols.size(); ++i) o << (i ? "," : "") << cols[i].get<std::string>();
    o << '\n';
    for (const auto& row : t.at("rows")) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) o << ',';
            const auto& c = row[i];
            if (c.is_string())
                o << c.get<std::string>();
            else if (c.is_boolean())
                o << (c.get<bool>() ? "true" : "false");
            else if (c.is_number_integer() || c.is_number_unsigned())
                o << c.dump();
            else if (c.is_number())
                o << report::fmt(c.get<double>());
            else
                o << "";
        }
        o << '\n';
    }
    return o.str();
}

std::vector<std::string> sorted_unique(std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    v.erase(std::remove(v.begin(), v.end(), std::string()), v.end());
    return v;
}

fs::path save_report(Workspace& ws, const std::string& name, ojson& doc, std::ostream& out) {
    const fs::path dir = ws.reports_dir();
    doc["name"] = name;
    const fs::path path = dir / (name + ".json");
    report::write_text(path, doc.dump(2) + "\n");
    out << "report " << path.string() << '\n';
    for (const auto& p : render_report(doc, dir)) out << "  " << p.string() << '\n';
    return path;
}

ojson load_doc(const fs::path& path) {
    try {
        return ojson::parse(report::read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::Format, path.string() + ": " + e.what());
    }
}

search::GridAxes grid_for(const Workspace& ws, const std::optional<search::GridAxes>& g) {
    return g ? *g : ws.settings().grid;
}

}  // namespace

ojson paper_references(const std::string& topic) {
    auto ref = [](const std::string& label, double v) { return ojson{{"label", label}, {"value", v}}; };
    if (topic == "standard") return ojson::array({ref("unregularized recipe best loss", 3.75)});
    if (topic == "regularized")
        return ojson::array({ref("regularized asymptote at 200M tokens", 3.43),
                             ref("standard recipe best loss", 3.75)});
    if (topic == "ensemble")
        return ojson::array({ref("ensemble asymptote N=300M K to infinity", 3.34),
                             ref("regularized asymptote", 3.43)});
    if (topic == "joint")
        return ojson::array({ref("joint asymptote at 200M tokens", 3.17), ref("regularized asymptote", 3.43)});
    if (topic == "efficiency")
        return ojson::array({ref("regularized asymptote efficiency (x)", 2.29), ref("joint asymptote efficiency (x)", 5.17),
                             ref("best 1.4B model efficiency (x)", 2.09), ref("best 5x1.4B ensemble efficiency (x)", 3.75)});
    if (topic == "distill")
        return ojson::array({ref("student with real-data mixing", 3.4373), ref("student without mixing", 4.0693)});
    if (topic == "variance")
        return ojson::array({ref("seed std, both seeds", 0.008207), ref("seed std, init seed only", 0.007605),
                             ref("seed std, data seed only", 0.007213)});
    return ojson::array();
}

// run -----------------------------------------------------------------------

RunOutcome cmd_run(Workspace& ws, const RunConfig& cfg, std::ostream& out) {
    const auto specs = expand_runs(cfg, ws);
    auto env = ws.env(cfg.d);
    RunOutcome res;
    std::vector<RunRecord> point;
    for (const auto& s : specs) {
        const auto rec = trainer::train(s, env);
        out << describe(rec) << '\n';
        res.keys.push_back(rec.ledger_key);
        (rec.cached ? res.cached : res.trained)++;
        if (!rec.ok()) ++res.failed;
        if (cfg.members > 1) {
            point.push_back(rec);
            if (point.size() == static_cast<std::size_t>(cfg.members)) {
                const bool all_ok = std::all_of(point.begin(), point.end(), [](const RunRecord& r) { return r.ok(); });
                if (all_ok) {
                    const auto ens = ensemble::ensemble_eval(ensemble::spec_for(point), env);
                    out << ens.ledger_key << "  ensemble K=" << ens.spec.k() << "  val " << report::fmt(ens.loss)
                        << "  member mean " << report::fmt(ens.mean_member_loss) << (ens.cached ? "  (cached)" : "")
                        << '\n';
                    res.ensemble_keys.push_back(ens.ledger_key);
                } else {
                    out << "ensemble skipped: a member failed\n";
                }
                point.clear();
            }
        }
    }
    out << res.keys.size() << " runs: " << res.trained << " trained, " << res.cached << " cached, " << res.failed
        << " failed\n";
    return res;
}

// search ----------------------------------------------------------------------

search::RecipeSearch cmd_search(Workspace& ws, const SearchArgs& args, std::ostream& out) {
    const auto base = ws.base_spec(args.d, args.model);
    auto env = ws.env(args.d);
    const auto grid = grid_for(ws, args.grid);
    const auto rs = args.exhaustive ? search::exhaustive_recipe(base, env, args.recipe, grid)
                                    : search::search_recipe(base, env, args.recipe, grid, args.seed_guess, args.budget);
    out << search::to_string(args.recipe) << " search at D=" << args.d << " model " << args.model << ": "
        << rs.optimum.evaluations_used << " evaluations, loss " << report::fmt(rs.optimum.loss) << " at lr "
        << report::fmt(rs.best.peak_lr) << " epochs " << rs.best.epochs << " wd " << report::fmt(rs.best.weight_decay)
        << (rs.optimum.certified ? "  certified" : "  NOT certified") << '\n';
    ojson doc = rs.to_json();
    doc["D"] = args.d;
    doc["model"] = args.model;
    doc["N"] = base.config.param_count();
    doc["exhaustive"] = args.exhaustive;
    doc["ledger_key"] = rs.best_key;
    doc["val_loss"] = num(rs.optimum.loss);
    std::string name = "search-" + search::to_string(args.recipe) + "-D" + std::to_string(args.d) + "-" + args.model;
    if (args.exhaustive) name += "-exhaustive";
    save_report(ws, name, doc, out);
    if (rs.optimum.budget_exhausted) fail(ErrorKind::Precondition, "search budget exhausted before certification");
    return rs;
}

// recipe ----------------------------------------------------------------------

namespace {

struct RecipeContext {
    Workspace& ws;
    const RecipeArgs& args;
    search::GridAxes grid;
    std::ostream& out;
    std::vector<std::string> keys;
    std::vector<std::string> warnings;
};

search::RecipeSearch searched(RecipeContext& c, std::size_t d, const std::string& model, search::Recipe recipe) {
    const auto base = c.ws.base_spec(d, model);
    auto env = c.ws.env(d);
    auto rs = search::search_recipe(base, env, recipe, c.grid);
    c.keys.insert(c.keys.end(), rs.run_keys.begin(), rs.run_keys.end());
    c.out << "  " << search::to_string(recipe) << " D=" << d << " " << model << ": loss "
          << report::fmt(rs.optimum.loss) << " (" << rs.optimum.evaluations_used << " runs"
          << (rs.optimum.certified ? ", certified" : ", not certified") << ")\n";
    if (!rs.optimum.certified) c.warnings.push_back("search at D=" + std::to_string(d) + " " + model + " not certified");
    return rs;
}

ojson search_entry(std::size_t d, const std::string& model, std::size_t n, const search::RecipeSearch& rs) {
    return ojson{{"D", d},
                 {"model", model},
                 {"N", n},
                 {"ledger_key", rs.best_key},
                 {"val_loss", num(rs.optimum.loss)},
                 {"hyper", trainer::to_json(rs.best)},
                 {"certified", rs.optimum.certified},
                 {"evaluations", rs.optimum.evaluations_used}};
}

struct KSweep {
    ojson entry;
    std::vector<scaling::Point> points;  // (K, loss)
    std::optional<scaling::PowerLawFit> fit;
};

KSweep k_sweep(RecipeContext& c, std::size_t d, const std::string& model) {
    const auto reg = searched(c, d, model, search::Recipe::Regularized);
    const auto heur = ensemble::heuristic_ensemble_hyper(reg.best, c.grid);
    auto base = c.ws.base_spec(d, model);
    base.hyper = heur.hyper;
    auto env = c.ws.env(d);
    const auto members = ensemble::train_members(base, c.args.k_max, trainer::SeedMode::Both, env);
    KSweep ks;
    ojson pts = ojson::array();
    std::vector<std::string> member_keys;
    for (int k = 1; k <= c.args.k_max; ++k) {
        const auto& m = members[static_cast<std::size_t>(k - 1)];
        member_keys.push_back(m.ledger_key);
        c.keys.push_back(m.ledger_key);
        if (!m.ok()) {
            c.warnings.push_back("member " + m.ledger_key + " failed; K sweep stops at K=" + std::to_string(k - 1));
            break;
        }
        if (k == 1) {
            ks.points.push_back({1.0, m.final_val_loss});
            pts.push_back({{"K", 1}, {"ledger_key", m.ledger_key}, {"val_loss", num(m.final_val_loss)}});
            continue;
        }
        const auto ens = ensemble::ensemble_eval(ensemble::spec_for(std::span(members.data(), std::size_t(k))), env);
        c.keys.push_back(ens.ledger_key);
        ks.points.push_back({double(k), ens.loss});
        pts.push_back({{"K", k},
                       {"ledger_key", ens.ledger_key},
                       {"val_loss", num(ens.loss)},
                       {"mean_member_loss", ens.mean_member_loss}});
    }
    c.out << "  ensemble D=" << d << " " << model << ":";
    for (const auto& p : ks.points) c.out << " K" << p.x << "=" << report::fmt(p.loss);
    c.out << '\n';
    ks.fit = try_fit(ks.points, "K law at D=" + std::to_string(d) + " " + model, c.warnings);
    ks.entry = ojson{{"D", d},
                     {"model", model},
                     {"N", base.config.param_count()},
                     {"search_key", reg.best_key},
                     {"hyper", trainer::to_json(heur.hyper)},
                     {"epochs_clamped", heur.clamped},
                     {"points", pts},
                     {"k_law", ks.fit ? scaling::to_json(*ks.fit) : ojson(nullptr)}};
    return ks;
}

/// Per-D loss of the recipe plus, with three or more D values, the data law.
void add_d_law(ojson& doc, const std::map<std::size_t, double>& per_d, RecipeContext& c) {
    ojson pd = ojson::array();
    std::vector<scaling::Point> pts;
    for (const auto& [d, l] : per_d) {
        pd.push_back({{"D", d}, {"loss", num(l)}});
        pts.push_back({millions(double(d)), l});
    }
    doc["per_d"] = pd;
    const auto fit = per_d.size() >= 3 ? try_fit(pts, "data law", c.warnings) : std::nullopt;
    doc["d_law"] = fit ? scaling::to_json(*fit) : ojson(nullptr);
    if (fit)
        doc["plots"].push_back(plot_json("d-law", doc["recipe"].get<std::string>() + " recipe: loss vs seed tokens",
                                         "seed tokens D (M)",
                                         ojson::array({series_json("per-D loss", pts, fit->params)}),
                                         paper_references(doc["recipe"].get<std::string>())));
}

void run_recipe(RecipeContext& c, ojson& doc) {
    const auto& a = c.args;
    const std::string& r = a.recipe;
    doc["plots"] = ojson::array();
    ojson entries = ojson::array();
    ojson fits = ojson::array();
    std::map<std::size_t, double> per_d;

    if (r == "standard" || r == "regularized") {
        const auto recipe = search::recipe_from_string(r);
        ojson series = ojson::array();
        for (std::size_t d : a.d_list) {
            std::vector<scaling::Point> pts;
            for (const auto& m : a.models) {
                const auto rs = searched(c, d, m, recipe);
                const auto n = c.ws.model(m).param_count();
                entries.push_back(search_entry(d, m, n, rs));
                pts.push_back({millions(double(n)), rs.optimum.loss});
            }
            const auto fit = try_fit(pts, "N law at D=" + std::to_string(d), c.warnings);
            double best = kInf;
            for (const auto& p : pts) best = std::min(best, p.loss);
            per_d[d] = fit ? fit->params.E : best;
            fits.push_back({{"group", "D=" + std::to_string(d)}, {"axis", "N"},
                            {"fit", fit ? scaling::to_json(*fit) : ojson(nullptr)}});
            series.push_back(series_json("D=" + std::to_string(d), pts,
                                         fit ? std::optional(fit->params) : std::nullopt));
        }
        doc["plots"].push_back(plot_json("n-law", r + " recipe: loss vs parameters", "parameters N (M)", series,
                                         paper_references(r)));
    } else if (r == "ensemble" || r == "joint") {
        require(a.k_max >= 1, ErrorKind::BadConfig, "k_max must be >= 1");
        ojson kseries = ojson::array();
        std::vector<scaling::TierPoint> tier_pts;
        for (std::size_t d : a.d_list) {
            double best = kInf;
            for (const auto& m : a.models) {
                auto ks = k_sweep(c, d, m);
                const double n = millions(double(c.ws.model(m).param_count()));
                for (const auto& p : ks.points) tier_pts.push_back({{p.x, n, millions(double(d))}, p.loss});
                double l = ks.fit ? ks.fit->params.E : kInf;
                if (!ks.fit)
                    for (const auto& p : ks.points) l = std::min(l, p.loss);
                best = std::min(best, l);
                entries.push_back(ks.entry);
                kseries.push_back(series_json("D=" + std::to_string(d) + " " + m, ks.points,
                                              ks.fit ? std::optional(ks.fit->params) : std::nullopt));
            }
            per_d[d] = best;
        }
        doc["plots"].push_back(plot_json("k-law", "ensembles: loss vs members", "members K", kseries,
                                         paper_references("ensemble")));
        if (r == "joint") {
            ojson nseries = ojson::array();
            for (std::size_t d : a.d_list) {
                std::vector<scaling::TierPoint> sub;
                for (const auto& tp : tier_pts)
                    if (tp.coords[2] == millions(double(d))) sub.push_back({{tp.coords[0], tp.coords[1]}, tp.loss});
                try {
                    const auto tf = scaling::tiered_fit(sub, {"K", "N"});
                    fits.push_back({{"group", "D=" + std::to_string(d)}, {"axis", "K,N"}, {"fit", scaling::to_json(tf)}});
                    per_d[d] = tf.final_asymptote;
                    const auto& outer = tf.outer_fit();
                    nseries.push_back(series_json("D=" + std::to_string(d) + " K-asymptotes", outer.points, outer.params));
                    for (const auto& w : tf.warnings) c.warnings.push_back(w);
                } catch (const LabError& e) {
                    if (e.kind() != ErrorKind::DegenerateInput) throw;
                    c.warnings.push_back("tiered fit at D=" + std::to_string(d) + ": " + e.detail());
                }
            }
            if (!nseries.empty())
                doc["plots"].push_back(plot_json("n-law", "joint recipe: K asymptote vs parameters",
                                                 "parameters N (M)", nseries, paper_references("joint")));
        }
    } else if (r == "distill") {
        ojson mixed_s = ojson::array();
        std::vector<scaling::Point> mixed_pts, ctl_pts, teacher_pts;
        for (std::size_t d : a.d_list) {
            double best = kInf;
            for (const auto& m : a.models) {
                DistillArgs da;
                da.d = d;
                da.model = m;
                da.ratio = a.ratio;
                da.sample_seed = a.sample_seed;
                da.grid = c.grid;
                if (a.teacher_k > 1) {
                    // ensemble teacher: members at the ensemble heuristic hyperparameters
                    const auto reg = searched(c, d, m, search::Recipe::Regularized);
                    auto base = c.ws.base_spec(d, m);
                    base.hyper = ensemble::heuristic_ensemble_hyper(reg.best, c.grid).hyper;
                    for (const auto& rec : ensemble::train_members(base, a.teacher_k, trainer::SeedMode::Both, c.ws.env(d)))
                        da.teacher_keys.push_back(rec.ledger_key);
                }
                std::ostringstream sink;
                const ojson res = cmd_distill(c.ws, da, sink);
                c.out << sink.str();
                for (const auto& k : res["ledger_keys"]) c.keys.push_back(k);
                const double n = millions(double(c.ws.model(m).param_count()));
                mixed_pts.push_back({n, loss_value(res["mixed"]["val_loss"])});
                teacher_pts.push_back({n, loss_value(res["teacher"]["val_loss"])});
                if (res.contains("control")) ctl_pts.push_back({n, loss_value(res["control"]["val_loss"])});
                best = std::min(best, mixed_pts.back().loss);
                ojson e = res;
                e.erase("name");
                e.erase("plots");
                e.erase("annotations");
                e.erase("ledger_keys");
                entries.push_back(e);
            }
            per_d[d] = best;
        }
        ojson s = ojson::array({series_json("mixed student", mixed_pts, std::nullopt),
                                series_json("teacher", teacher_pts, std::nullopt)});
        if (!ctl_pts.empty()) s.push_back(series_json("no-mixing student", ctl_pts, std::nullopt));
        doc["plots"].push_back(plot_json("students", "distillation: students vs teacher", "parameters N (M)", s,
                                         paper_references("distill")));
    } else {
        fail(ErrorKind::BadConfig, "unknown recipe '" + r + "' (standard, regularized, ensemble, joint, distill)");
    }
    doc["entries"] = entries;
    doc["fits"] = fits;
    add_d_law(doc, per_d, c);
}

}  // namespace

ojson cmd_recipe(Workspace& ws, const RecipeArgs& args, std::ostream& out) {
    require(!args.d_list.empty(), ErrorKind::BadConfig, "recipe needs at least one D");
    require(!args.models.empty(), ErrorKind::BadConfig, "recipe needs at least one model");
    static const std::set<std::string> kRecipes{"standard", "regularized", "ensemble", "joint", "distill"};
    require(kRecipes.count(args.recipe) == 1, ErrorKind::BadConfig,
            "unknown recipe '" + args.recipe + "' (standard, regularized, ensemble, joint, distill)");
    for (const auto& m : args.models) (void)ws.model(m);
    RecipeContext c{ws, args, grid_for(ws, args.grid), out, {}, {}};
    ojson doc{{"kind", "recipe_report"}, {"recipe", args.recipe}};
    doc["scales"] = {{"D", args.d_list}, {"models", args.models}};
    doc["grid"] = c.grid.to_json();
    doc["annotations"] = paper_references(args.recipe);
    const std::string name = args.name.empty() ? "recipe-" + args.recipe : args.name;
    out << args.recipe << " recipe over " << args.d_list.size() << " D x " << args.models.size() << " models\n";
    try {
        run_recipe(c, doc);
        if (args.baseline) {
            const ojson base = load_doc(*args.baseline);
            ojson rows = ojson::array();
            for (const auto& r : efficiency_rows(doc, base))
                rows.push_back({r.recipe, r.baseline, r.d, r.loss, num(r.d_equiv), num(r.efficiency)});
            doc["efficiency"] = {{"baseline", base.value("name", args.baseline->stem().string())}, {"rows", rows}};
        }
    } catch (const LabError& e) {
        doc["error"] = {{"kind", std::string(to_string(e.kind()))}, {"message", e.detail()}};
        doc["warnings"] = c.warnings;
        doc["ledger_keys"] = sorted_unique(c.keys);
        save_report(ws, name, doc, out);
        throw;
    }
    doc["warnings"] = c.warnings;
    doc["ledger_keys"] = sorted_unique(c.keys);
    for (const auto& w : c.warnings) out << "warning: " << w << '\n';
    save_report(ws, name, doc, out);
    return doc;
}

// ensemble --------------------------------------------------------------------

ojson cmd_ensemble(Workspace& ws, const EnsembleArgs& args, std::ostream& out) {
    std::vector<std::string> keys = args.keys;
    std::size_t d = args.d;
    if (keys.empty()) {
        require(args.d > 0 && args.k >= 1, ErrorKind::BadConfig, "give member keys, or a pool size and k");
        auto base = ws.base_spec(args.d, args.model);
        base.hyper = args.hyper.apply(base.hyper);
        for (const auto& r : ensemble::train_members(base, args.k, args.mode, ws.env(args.d))) {
            out << describe(r) << '\n';
            keys.push_back(r.ledger_key);
        }
    } else {
        const auto first = ws.ledger().find(keys.front());
        if (!first) fail(ErrorKind::MissingMember, "member " + keys.front() + " is not in the ledger");
        d = first->at("D").get<std::size_t>();
    }
    auto env = ws.env(d);
    ensemble::EnsembleSpec spec;
    spec.member_keys = keys;
    const auto res = ensemble::ensemble_eval(spec, env);
    out << "ensemble " << res.ledger_key << "  K=" << res.spec.k() << "  val " << report::fmt(res.loss)
        << "  member mean " << report::fmt(res.mean_member_loss) << (res.cached ? "  (cached)" : "") << '\n';

    ojson members = ojson::array();
    for (std::size_t i = 0; i < res.spec.member_keys.size(); ++i) {
        members.push_back({{"ledger_key", res.spec.member_keys[i]}, {"val_loss", num(res.member_losses[i])}});
    }
    ojson doc{{"kind", "ensemble_report"},
              {"D", res.d},
              {"K", res.spec.k()},
              {"N", res.spec.member_config.param_count()},
              {"members", members},
              {"ensemble", {{"ledger_key", res.spec.k() > 1 ? res.ledger_key : res.spec.member_keys[0]},
                            {"val_loss", num(res.spec.k() > 1 ? res.loss : res.member_losses[0])}}},
              {"mean_member_loss", res.mean_member_loss},
              {"gain", res.mean_member_loss - res.loss}};
    if (args.soup) {
        std::vector<model::Parameters<float>> params;
        for (const auto& k : res.spec.member_keys) params.push_back(ensemble::load_member(k, env));
        std::vector<const model::Parameters<float>*> ptrs;
        for (const auto& p : params) ptrs.push_back(&p);
        const double soup_loss = trainer::eval_loss(ensemble::soup(ptrs), ws.validation());
        out << "soup val " << report::fmt(soup_loss) << '\n';
        doc["soup"] = {{"val_loss", num(soup_loss)}, {"note", "weight average of the members, not ledgered"}};
    }
    doc["ledger_keys"] = sorted_unique([&] {
        auto v = res.spec.member_keys;
        if (res.spec.k() > 1) v.push_back(res.ledger_key);
        return v;
    }());
    doc["plots"] = ojson::array();
    doc["annotations"] = paper_references("ensemble");
    save_report(ws, args.name.empty() ? "ensemble-" + res.ledger_key : args.name, doc, out);
    return doc;
}

// distill ---------------------------------------------------------------------

ojson cmd_distill(Workspace& ws, const DistillArgs& args, std::ostream& out) {
    require(args.d > 0, ErrorKind::BadConfig, "distill needs a pool size");
    std::vector<std::string> keys;
    std::vector<std::string> teacher = args.teacher_keys;
    auto env = ws.env(args.d);
    if (teacher.empty()) {
        auto rs = search::search_recipe(ws.base_spec(args.d, args.model), env, search::Recipe::Regularized,
                                        grid_for(ws, args.grid));
        keys.insert(keys.end(), rs.run_keys.begin(), rs.run_keys.end());
        out << "teacher: regularized optimum " << rs.best_key << " loss " << report::fmt(rs.optimum.loss) << '\n';
        teacher = {rs.best_key};
    }
    std::vector<RunRecord> trecs;
    for (const auto& k : teacher) {
        const auto j = ws.ledger().find(k);
        if (!j) fail(ErrorKind::MissingMember, "teacher " + k + " is not in the ledger");
        trecs.push_back(RunRecord::from_json(*j));
        keys.push_back(k);
    }
    double teacher_loss = trecs.front().final_val_loss;
    std::string teacher_key = trecs.front().ledger_key;
    if (trecs.size() > 1) {
        const auto ens = ensemble::ensemble_eval(ensemble::spec_for(trecs), env);
        teacher_loss = ens.loss;
        teacher_key = ens.ledger_key;
        keys.push_back(ens.ledger_key);
    }

    distill::DistillSpec spec;
    spec.teacher = ensemble::spec_for(trecs);
    spec.student_config = trecs.front().spec.config;
    spec.student_hyper = args.student_hyper.apply(trecs.front().spec.hyper);
    spec.init_seed = trecs.front().spec.init_seed;
    spec.data_seed = trecs.front().spec.data_seed;
    spec.ratio = args.ratio;
    const std::size_t ctx = std::size_t(spec.student_config.context_len);
    const std::size_t real_windows = ws.pool(args.d).size_d() / ctx;
    std::size_t synth_tokens = args.synth_tokens;
    if (synth_tokens == 0) {
        // enough windows that neither schedule reads one more than synth_epoch_cap times
        const std::size_t per_period = std::size_t(args.ratio.synth + (args.control ? args.ratio.real : 0));
        const std::size_t need = distill::mixed_periods(spec, real_windows) * per_period * std::size_t(spec.student_hyper.batch_size);
        const std::size_t cap = std::size_t(spec.synth_epoch_cap);
        synth_tokens = std::max(args.d, (need + cap - 1) / cap * ctx);
    }
    spec.sampling = {synth_tokens, args.temperature, args.sample_seed, args.mode};
    const auto denv = ws.distill_env(args.d);
    const auto mixed = distill::distill_train(spec, denv);
    out << "mixed " << args.ratio.real << ":" << args.ratio.synth << " student  " << describe(mixed) << '\n';
    keys.push_back(mixed.ledger_key);

    ojson doc{{"kind", "distill_report"},
              {"D", args.d},
              {"model", args.model},
              {"N", spec.student_config.param_count()},
              {"ratio", {args.ratio.real, args.ratio.synth}},
              {"synth_tokens", spec.sampling.n_tokens},
              {"teacher", {{"ledger_key", teacher_key}, {"val_loss", num(teacher_loss)}, {"K", trecs.size()}}},
              {"mixed", {{"ledger_key", mixed.ledger_key}, {"val_loss", num(mixed.final_val_loss)}}}};
    if (args.control) {
        const auto ctl_spec = distill::no_mixing_control(spec, real_windows);
        const auto ctl = distill::distill_train(ctl_spec, denv);
        out << "no-mixing student  " << describe(ctl) << '\n';
        keys.push_back(ctl.ledger_key);
        doc["control"] = {{"ledger_key", ctl.ledger_key}, {"val_loss", num(ctl.final_val_loss)}};
        doc["mixing_helps"] = mixed.final_val_loss < ctl.final_val_loss;
    }
    doc["annotations"] = paper_references("distill");
    doc["ledger_keys"] = sorted_unique(keys);
    doc["plots"] = ojson::array();
    std::string name = args.name;
    if (name.empty())
        name = "distill-D" + std::to_string(args.d) + "-" + args.model + "-r" + std::to_string(args.ratio.real) + "s" +
               std::to_string(args.ratio.synth);
    save_report(ws, name, doc, out);
    return doc;
}

// fit -------------------------------------------------------------------------

ojson cmd_fit(const FitArgs& args, std::ostream& out) {
    std::ifstream is(args.csv);
    if (!is) fail(ErrorKind::Io, "cannot read " + args.csv.string());
    std::vector<std::string> key_cols;
    const auto groups = scaling::read_points_csv(is, &key_cols);
    fs::path prefix = args.out;
    if (prefix.empty()) prefix = args.csv.parent_path() / (args.csv.stem().string() + "-fit");

    ojson doc{{"kind", "fit_report"}, {"source", args.csv.filename().string()}};
    ojson series = ojson::array();
    if (args.tiers.empty()) {
        std::vector<std::pair<std::string, scaling::PowerLawFit>> fits;
        ojson fj = ojson::array();
        for (const auto& g : groups) {
            auto f = scaling::fit_power_law(g.points);
            out << (g.key.empty() ? "all" : g.key) << ": A " << report::fmt(f.params.A) << " alpha "
                << report::fmt(f.params.alpha) << " E " << report::fmt(f.params.E)
                << (f.converged() ? "" : "  (iteration cap)") << '\n';
            fj.push_back({{"group", g.key}, {"fit", scaling::to_json(f)}});
            series.push_back(series_json(g.key.empty() ? "all" : g.key, g.points, f.params));
            fits.emplace_back(g.key, std::move(f));
        }
        doc["fits"] = fj;
        std::ostringstream csv;
        scaling::write_fits_csv(csv, fits);
        report::write_text(fs::path(prefix.string() + ".csv"), csv.str());
    } else {
        // tiers name the innermost axis (the x column) first, then key columns
        std::vector<std::size_t> col_of;
        for (std::size_t t = 1; t < args.tiers.size(); ++t) {
            const auto it = std::find(key_cols.begin(), key_cols.end(), args.tiers[t]);
            if (it == key_cols.end()) fail(ErrorKind::BadConfig, "tier axis '" + args.tiers[t] + "' is not a CSV column");
            col_of.push_back(std::size_t(it - key_cols.begin()));
        }
        std::vector<scaling::TierPoint> pts;
        for (const auto& g : groups) {
            std::vector<double> outer;
            for (std::size_t c : col_of) {
                try {
                    outer.push_back(std::stod(g.key_values.at(c)));
                } catch (const std::exception&) {
                    fail(ErrorKind::Format, "tier column value '" + g.key_values.at(c) + "' is not a number");
                }
            }
            for (const auto& p : g.points) {
                std::vector<double> coords{p.x};
                coords.insert(coords.end(), outer.begin(), outer.end());
                pts.push_back({coords, p.loss});
            }
        }
        const auto tf = scaling::tiered_fit(pts, args.tiers);
        out << "tiered fit over " << args.tiers.size() << " axes: final asymptote " << report::fmt(tf.final_asymptote)
            << '\n';
        for (const auto& w : tf.warnings) out << "warning: " << w << '\n';
        doc["tiered"] = scaling::to_json(tf);
        std::vector<std::pair<std::string, scaling::PowerLawFit>> fits;
        for (const auto& lvl : tf.levels)
            for (const auto& g : lvl.groups) {
                std::string label = lvl.axis;
                for (double k : g.key) label += "|" + report::fmt(k);
                fits.emplace_back(label, g.fit);
            }
        for (const auto& g : tf.levels.front().groups) {
            std::string label;
            for (double k : g.key) label += (label.empty() ? "" : "|") + report::fmt(k);
            series.push_back(series_json(label, g.fit.points, g.fit.params));
        }
        std::ostringstream csv;
        scaling::write_fits_csv(csv, fits);
        report::write_text(fs::path(prefix.string() + ".csv"), csv.str());
    }
    doc["plots"] = ojson::array({plot_json(prefix.filename().string(), "power-law fits", args.x_label, series,
                                           ojson::array())});
    report::write_text(fs::path(prefix.string() + ".json"), doc.dump(2) + "\n");
    report::write_text(fs::path(prefix.string() + ".svg"), report::render_svg(plot_from_json(doc["plots"][0])));
    out << "wrote " << prefix.string() << ".{json,csv,svg}\n";
    return doc;
}

// report ----------------------------------------------------------------------

std::vector<fs::path> render_report(const ojson& doc, const fs::path& dir) {
    std::vector<fs::path> written;
    const std::string name = doc.value("name", "report");
    if (doc.contains("plots"))
        for (const auto& p : doc["plots"]) {
            const fs::path path = dir / (name + "-" + p.at("name").get<std::string>() + ".svg");
            report::write_text(path, report::render_svg(plot_from_json(p)));
            written.push_back(path);
        }
    if (doc.contains("entries") && doc["entries"].is_array() && !doc["entries"].empty()) {
        ojson t{{"columns", {"D", "model", "N", "ledger_key", "val_loss"}}, {"rows", ojson::array()}};
        for (const auto& e : doc["entries"]) {
            if (e.contains("points")) {
                for (const auto& p : e["points"])
                    t["rows"].push_back({e["D"], e["model"].get<std::string>() + " K=" + p["K"].dump(), e["N"],
                                         p["ledger_key"], p["val_loss"]});
            } else if (e.contains("val_loss")) {
                t["rows"].push_back({e["D"], e["model"], e["N"], e["ledger_key"], e["val_loss"]});
            } else if (e.contains("mixed")) {
                t["rows"].push_back({e["D"], e["model"].get<std::string>() + " mixed", e["N"], e["mixed"]["ledger_key"],
                                     e["mixed"]["val_loss"]});
                if (e.contains("control"))
                    t["rows"].push_back({e["D"], e["model"].get<std::string>() + " no-mixing", e["N"],
                                         e["control"]["ledger_key"], e["control"]["val_loss"]});
            }
        }
        const fs::path path = dir / (name + "-runs.csv");
        report::write_text(path, table_csv(t));
        written.push_back(path);
    }
    ojson laws{{"columns", {"group", "axis", "A", "alpha", "E", "residual"}}, {"rows", ojson::array()}};
    auto add_law = [&](const std::string& g, const std::string& axis, const ojson& f) {
        if (f.is_null()) return;
        laws["rows"].push_back({g, axis, f["A"], f["alpha"], f["E"], f["residual_sse"]});
    };
    if (doc.contains("fits"))
        for (const auto& f : doc["fits"]) {
            if (f["fit"].is_null()) continue;
            if (f["fit"].contains("levels")) {
                for (const auto& lvl : f["fit"]["levels"])
                    for (const auto& g : lvl["groups"]) {
                        std::string label = f["group"].get<std::string>();
                        for (const auto& k : g["key"]) label += "|" + report::fmt(k.get<double>());
                        add_law(label, lvl["axis"], g["fit"]);
                    }
            } else {
                add_law(f["group"], f["axis"], f["fit"]);
            }
        }
    if (doc.contains("entries"))
        for (const auto& e : doc["entries"])
            if (e.contains("k_law"))
                add_law("D=" + e["D"].dump() + " " + e["model"].get<std::string>(), "K", e["k_law"]);
    if (doc.contains("d_law")) add_law("data law", "D", doc["d_law"]);
    if (!laws["rows"].empty()) {
        const fs::path path = dir / (name + "-laws.csv");
        report::write_text(path, table_csv(laws));
        written.push_back(path);
    }
    if (doc.contains("efficiency")) {
        ojson t{{"columns", {"recipe", "baseline", "D", "loss", "D_equivalent", "efficiency"}},
                {"rows", doc["efficiency"]["rows"]}};
        const fs::path path = dir / (name + "-efficiency.csv");
        report::write_text(path, table_csv(t));
        written.push_back(path);
    }
    if (doc.contains("table")) {
        const fs::path path = dir / (name + "-" + doc["table"].value("name", "table") + ".csv");
        report::write_text(path, table_csv(doc["table"]));
        written.push_back(path);
    }
    return written;
}

std::vector<report::EfficiencyRow> efficiency_rows(const ojson& doc, const ojson& baseline) {
    require(baseline.contains("d_law") && !baseline["d_law"].is_null(), ErrorKind::Precondition,
            "baseline report has no data law (needs three or more D values)");
    require(doc.contains("per_d"), ErrorKind::Precondition, "report has no per-D losses");
    const auto law = law_from_json(baseline["d_law"]);
    std::vector<report::EfficiencyRow> rows;
    for (const auto& p : doc["per_d"]) {
        report::EfficiencyRow r;
        r.recipe = doc.value("recipe", doc.value("name", "report"));
        r.baseline = baseline.value("recipe", baseline.value("name", "baseline"));
        r.d = p["D"].get<double>();
        r.loss = loss_value(p["loss"]);
        try {
            r.d_equiv = scaling::interpolate_data_requirement(law, r.loss) * 1e6;
            r.efficiency = r.d_equiv / r.d;
        } catch (const LabError& e) {
            if (e.kind() != ErrorKind::UnreachableTarget) throw;
            r.d_equiv = r.efficiency = kInf;
        }
        rows.push_back(r);
    }
    return rows;
}

std::vector<fs::path> cmd_report(Workspace& ws, const std::vector<fs::path>& reports,
                                 const std::optional<fs::path>& baseline, std::ostream& out) {
    std::vector<fs::path> docs = reports;
    if (docs.empty()) {
        if (fs::exists(ws.reports_dir()))
            for (const auto& e : fs::directory_iterator(ws.reports_dir()))
                if (e.path().extension() == ".json") docs.push_back(e.path());
        std::sort(docs.begin(), docs.end());
    }
    std::optional<ojson> base;
    if (baseline) base = load_doc(*baseline);
    std::vector<fs::path> written;
    std::vector<report::EfficiencyRow> all_rows;
    for (const auto& path : docs) {
        const ojson doc = load_doc(path);
        for (const auto& p : render_report(doc, path.parent_path())) {
            out << p.string() << '\n';
            written.push_back(p);
        }
        if (base && doc.contains("per_d") && path != *baseline) {
            const auto rows = efficiency_rows(doc, *base);
            all_rows.insert(all_rows.end(), rows.begin(), rows.end());
        }
    }
    if (base) {
        const fs::path path = ws.reports_dir() / ("efficiency-vs-" + base->value("name", std::string("baseline")) + ".csv");
        std::string csv = report::efficiency_csv(all_rows);
        csv += "# paper reference (not a desk target):";
        for (const auto& r : paper_references("efficiency"))
            csv += " " + r["label"].get<std::string>() + " " + report::fmt(r["value"].get<double>()) + ";";
        csv += "\n";
        report::write_text(path, csv);
        out << path.string() << '\n';
        written.push_back(path);
    }
    return written;
}

// variance --------------------------------------------------------------------

ojson cmd_variance(Workspace& ws, const VarianceArgs& args, std::ostream& out) {
    require(args.n_seeds >= 2, ErrorKind::Precondition, "variance needs n_seeds >= 2");
    require(!args.modes.empty(), ErrorKind::BadConfig, "no randomness modes given");
    auto spec = ws.base_spec(args.d, args.model);
    spec.hyper = args.hyper.apply(spec.hyper);
    auto env = ws.env(args.d);
    std::vector<std::string> keys;
    ojson modes = ojson::array();
    ojson table{{"name", "modes"},
                {"columns", {"mode", "n_seeds", "mean", "std", "ensemble_K2", "pair_mean", "K2_beats_pair"}},
                {"rows", ojson::array()}};
    ojson series = ojson::array();
    for (const auto mode : args.modes) {
        const auto sv = trainer::seed_variance(spec, mode, args.n_seeds, env);
        ojson runs = ojson::array();
        std::vector<scaling::Point> pts;
        for (std::size_t i = 0; i < sv.runs.size(); ++i) {
            runs.push_back({{"ledger_key", sv.runs[i].ledger_key}, {"val_loss", num(sv.runs[i].final_val_loss)}});
            keys.push_back(sv.runs[i].ledger_key);
        }
        ojson m{{"mode", trainer::to_string(mode)}, {"runs", runs}, {"mean", num(sv.mean)}, {"std", num(sv.stddev)}};
        const bool pair_ok = sv.runs[0].ok() && sv.runs[1].ok();
        if (pair_ok) {
            const auto ens = ensemble::ensemble_eval(ensemble::spec_for(std::span(sv.runs.data(), 2)), env);
            keys.push_back(ens.ledger_key);
            m["ensemble_k2"] = {{"ledger_key", ens.ledger_key}, {"val_loss", num(ens.loss)},
                                {"pair_mean", ens.mean_member_loss}, {"beats_pair", ens.loss < ens.mean_member_loss}};
            pts.push_back({1.0, ens.mean_member_loss});
            pts.push_back({2.0, ens.loss});
            series.push_back(series_json(trainer::to_string(mode), pts, std::nullopt));
            table["rows"].push_back({trainer::to_string(mode), args.n_seeds, num(sv.mean), num(sv.stddev), num(ens.loss),
                                     ens.mean_member_loss, ens.loss < ens.mean_member_loss});
        } else {
            table["rows"].push_back(
                {trainer::to_string(mode), args.n_seeds, num(sv.mean), num(sv.stddev), nullptr, nullptr, false});
        }
        out << trainer::to_string(mode) << ": mean " << report::fmt(sv.mean) << " std " << report::fmt(sv.stddev);
        if (pair_ok)
            out << "  K=2 " << report::fmt(m["ensemble_k2"]["val_loss"].get<double>()) << " vs pair mean "
                << report::fmt(m["ensemble_k2"]["pair_mean"].get<double>());
        out << '\n';
        modes.push_back(m);
    }
    out << "paper reference stds: both 0.008207, init only 0.007605, data only 0.007213\n";
    ojson doc{{"kind", "variance_report"},
              {"D", args.d},
              {"model", args.model},
              {"N", spec.config.param_count()},
              {"hyper", trainer::to_json(spec.hyper)},
              {"modes", modes},
              {"table", table},
              {"annotations", paper_references("variance")}};
    doc["plots"] = series.empty() ? ojson::array()
                                  : ojson::array({plot_json("k2", "single-model mean (K=1) vs K=2 ensemble",
                                                            "members K", series, ojson::array())});
    doc["ledger_keys"] = sorted_unique(keys);
    save_report(ws, args.name.empty() ? "variance-D" + std::to_string(args.d) + "-" + args.model : args.name, doc, out);
    return doc;
}

// audit -----------------------------------------------------------------------

namespace {

void collect_keys(const ojson& j, std::vector<std::string>& keys) {
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) {
            if ((k == "ledger_key" || k == "best_key" || k == "search_key") && v.is_string()) keys.push_back(v);
            else if (k == "ledger_keys" && v.is_array()) {
                for (const auto& s : v)
                    if (s.is_string()) keys.push_back(s);
            } else {
                collect_keys(v, keys);
            }
        }
    } else if (j.is_array()) {
        for (const auto& v : j) collect_keys(v, keys);
    }
}

// every (ledger_key, val_loss) pair quoted in a document
void collect_quotes(const ojson& j, std::vector<std::pair<std::string, ojson>>& quotes) {
    if (j.is_object()) {
        if (j.contains("ledger_key") && j.contains("val_loss") && j["ledger_key"].is_string())
            quotes.emplace_back(j["ledger_key"], j["val_loss"]);
        for (const auto& [k, v] : j.items()) collect_quotes(v, quotes);
    } else if (j.is_array()) {
        for (const auto& v : j) collect_quotes(v, quotes);
    }
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

bool same_loss(const ojson& a, const ojson& b) {
    if (a.is_null() || b.is_null()) return a.is_null() && b.is_null();
    return same_bits(a.get<double>(), b.get<double>());
}

}  // namespace

bool reexecute_record(Workspace& ws, const ojson& rec, std::string* why) {
    const std::string key = rec.value("ledger_key", "");
    const std::string kind = rec.value("kind", "");
    auto fail_with = [&](const std::string& w) {
        if (why) *why = w;
        return false;
    };
    if (kind == "run") {
        const auto stored = RunRecord::from_json(rec);
        const std::size_t d = stored.spec.pool.size_d;
        auto env = ws.env(d);
        if (env.pool->pool_hash() != stored.spec.pool.pool_hash)
            return fail_with("run " + key + " used a pool this workspace cannot rebuild");
        RunRecord again;
        if (stored.spec.recipe_tag == "distill") {
            const auto ds = distill::DistillSpec::from_json(stored.spec.extra);
            again = distill::distill_train(ds, ws.distill_env(d), false);
        } else {
            again = trainer::train_uncached(stored.spec, env);
        }
        const bool match = again.ledger_key == key && again.status == stored.status &&
                           same_loss(num(again.final_val_loss), num(stored.final_val_loss)) &&
                           same_loss(num(again.final_train_loss), num(stored.final_train_loss)) &&
                           again.fail_step == stored.fail_step;
        return match || fail_with("re-execution of " + key + " is not bitwise identical");
    }
    if (kind == "ensemble") {
        const auto stored = ensemble::EnsembleResult::from_json(rec);
        const auto again = ensemble::ensemble_eval(stored.spec, ws.env(stored.d), false);
        return same_bits(again.loss, stored.loss) || fail_with("re-execution of " + key + " is not bitwise identical");
    }
    return fail_with("key " + key + " has unknown record kind '" + kind + "'");
}

AuditResult cmd_audit(Workspace& ws, bool reexecute, std::ostream& out) {
    AuditResult res;
    std::vector<fs::path> docs;
    if (fs::exists(ws.reports_dir()))
        for (const auto& e : fs::directory_iterator(ws.reports_dir()))
            if (e.path().extension() == ".json") docs.push_back(e.path());
    std::sort(docs.begin(), docs.end());

    std::vector<std::string> pending;
    std::vector<std::pair<std::string, ojson>> quotes;
    for (const auto& p : docs) {
        const ojson doc = load_doc(p);
        ++res.reports;
        std::vector<std::string> cited;
        collect_keys(doc, cited);
        std::vector<std::pair<std::string, ojson>> q;
        collect_quotes(doc, q);
        std::set<std::string> listed;
        if (doc.contains("ledger_keys"))
            for (const auto& k : doc["ledger_keys"]) listed.insert(k.get<std::string>());
        for (const auto& k : cited)
            if (!listed.count(k))
                res.problems.push_back(p.filename().string() + ": cites " + k + " without listing it in ledger_keys");
        for (auto& [k, v] : q) quotes.emplace_back(k, v);
        pending.insert(pending.end(), cited.begin(), cited.end());
    }

    // closure over ensemble members and distillation teachers
    std::set<std::string> seen;
    std::vector<std::string> order;
    const auto& vhash = ws.validation().hash;
    while (!pending.empty()) {
        const std::string key = pending.back();
        pending.pop_back();
        if (!seen.insert(key).second) continue;
        order.push_back(key);
        const auto rec = ws.ledger().find(key);
        if (!rec) {
            res.problems.push_back("key " + key + " is not in the ledger");
            continue;
        }
        const std::string kind = rec->value("kind", "");
        if (kind == "run") {
            const auto spec = RunSpec::from_json(rec->at("spec"));
            if (spec.ledger_key() != key) res.problems.push_back("key " + key + " does not recompute from its spec");
            if (spec.extra.contains("teacher_keys"))
                for (const auto& t : spec.extra["teacher_keys"]) pending.push_back(t);
        } else if (kind == "ensemble") {
            const auto spec = ensemble::EnsembleSpec::from_json(rec->at("spec"));
            if (spec.ledger_key(vhash) != key) res.problems.push_back("ensemble key " + key + " does not recompute");
            for (const auto& m : spec.member_keys) pending.push_back(m);
        } else {
            res.problems.push_back("key " + key + " has unknown record kind '" + kind + "'");
        }
    }
    std::sort(order.begin(), order.end());
    res.keys = order.size();

    for (const auto& [key, v] : quotes) {
        const auto rec = ws.ledger().find(key);
        if (!rec) continue;
        if (!same_loss(rec->at("final_val_loss"), v))
            res.problems.push_back("quoted loss for " + key + " differs from the ledger");
    }

    if (reexecute) {
        for (const auto& key : order) {
            const auto rec = ws.ledger().find(key);
            if (!rec) continue;
            std::string why;
            const bool match = reexecute_record(ws, *rec, &why);
            ++res.reexecuted;
            out << "reexecuted " << key << (match ? "  identical" : "  MISMATCH") << '\n';
            if (!match) res.problems.push_back(why);
        }
    }

    for (const auto& p : res.problems) out << "problem: " << p << '\n';
    out << "audit: " << res.reports << " reports, " << res.keys << " keys";
    if (reexecute) out << ", " << res.reexecuted << " re-executed";
    out << (res.ok() ? "  PASS" : "  FAIL") << '\n';
    return res;
}

}  // namespace dclab::lab
