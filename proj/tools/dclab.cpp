// SPDX-License-Identifier: Apache-2.0
// dclab: command line for the data-constrained pre-training lab.
#include "dclab/common.hpp"
#include "dclab/lab.hpp"
#include "dclab/workspace.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace dclab;
namespace fs = std::filesystem;

namespace {

search::GridAxes grid_named(const std::string& name) {
    if (name == "desk") return search::GridAxes::desk();
    if (name == "paper") return search::GridAxes::paper();
    fail(ErrorKind::BadConfig, "unknown grid '" + name + "' (desk or paper)");
}

distill::MixingRatio parse_ratio(const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) fail(ErrorKind::BadConfig, "ratio must look like r:s, got '" + s + "'");
    try {
        return {std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1))};
    } catch (const std::exception&) {
        fail(ErrorKind::BadConfig, "ratio must look like r:s, got '" + s + "'");
    }
}

void add_hyper_flags(CLI::App* cmd, lab::HyperOverride& h) {
    cmd->add_option("--lr", h.lr, "peak learning rate");
    cmd->add_option("--epochs", h.epochs, "epoch count");
    cmd->add_option("--wd", h.wd, "weight decay");
    cmd->add_option("--batch", h.batch, "batch size in windows");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dclab: data-constrained pre-training lab"};
    app.require_subcommand(1);
    std::string ws_flag;
    app.add_option("-w,--workspace", ws_flag, "workspace root (default $DCLAB_WORKSPACE, else ./workspace)");

    // init
    auto* init = app.add_subcommand("init", "create a workspace from a text file or the synthetic corpus");
    lab::InitOptions init_opt;
    std::string init_source, init_grid = "desk";
    init->add_option("--source", init_source, "UTF-8 or binary text file (default: synthetic corpus)");
    init->add_option("--synthetic-bytes", init_opt.synthetic_bytes, "size of the synthetic corpus");
    init->add_option("--synthetic-seed", init_opt.synthetic_seed, "seed of the synthetic corpus");
    init->add_option("--context", init_opt.context_len, "context length");
    init->add_option("--val-windows", init_opt.val_windows, "held-out validation windows");
    init->add_option("--grid", init_grid, "default search grid: desk or paper");

    // run
    auto* run = app.add_subcommand("run", "execute the runs a YAML config declares");
    std::string run_config;
    run->add_option("config", run_config, "experiment config (YAML)")->required();

    // search
    auto* srch = app.add_subcommand("search", "coordinate-descent hyperparameter search at one (D, model)");
    lab::SearchArgs sa;
    std::string search_recipe = "regularized", search_grid;
    srch->add_option("--d", sa.d, "seed tokens D")->required();
    srch->add_option("--model", sa.model, "model preset");
    srch->add_option("--recipe", search_recipe, "standard (wd fixed 0.1) or regularized");
    srch->add_flag("--exhaustive", sa.exhaustive, "train the whole grid instead of descending");
    srch->add_option("--budget", sa.budget, "maximum distinct runs");
    srch->add_option("--grid", search_grid, "desk or paper (default: workspace grid)");

    // recipe
    auto* rcp = app.add_subcommand("recipe", "run a scaling recipe over D x N and fit its laws");
    lab::RecipeArgs ra;
    std::string recipe_ratio = "1:1", recipe_grid, recipe_baseline;
    rcp->add_option("recipe", ra.recipe, "standard, regularized, ensemble, joint or distill")->required();
    rcp->add_option("--d", ra.d_list, "seed token counts")->required()->delimiter(',');
    rcp->add_option("--models", ra.models, "model presets (the N axis)")->delimiter(',');
    rcp->add_option("--k-max", ra.k_max, "largest ensemble");
    rcp->add_option("--teacher-k", ra.teacher_k, "distill: teacher members");
    rcp->add_option("--ratio", recipe_ratio, "distill: real:synthetic batches");
    rcp->add_option("--sample-seed", ra.sample_seed, "distill: sampling seed");
    rcp->add_option("--baseline", recipe_baseline, "report whose data law is the efficiency baseline");
    rcp->add_option("--name", ra.name, "report name");
    rcp->add_option("--grid", recipe_grid, "desk or paper (default: workspace grid)");

    // ensemble
    auto* ens = app.add_subcommand("ensemble", "evaluate a logit-averaged ensemble");
    lab::EnsembleArgs ea;
    std::string ens_mode = "both";
    ens->add_option("--keys", ea.keys, "member ledger keys")->delimiter(',');
    ens->add_option("--d", ea.d, "train members on D seed tokens");
    ens->add_option("--k", ea.k, "members to train");
    ens->add_option("--model", ea.model, "model preset");
    ens->add_option("--seed-mode", ens_mode, "both, init-only or data-only");
    ens->add_flag("--soup", ea.soup, "also score the weight average");
    ens->add_option("--name", ea.name, "report name");
    add_hyper_flags(ens, ea.hyper);

    // distill
    auto* dst = app.add_subcommand("distill", "self-distill with real-data mixing and a no-mixing control");
    lab::DistillArgs da;
    std::string dst_ratio = "1:1", dst_mode = "individual", dst_grid;
    bool no_control = false;
    dst->add_option("--d", da.d, "seed tokens D")->required();
    dst->add_option("--model", da.model, "model preset");
    dst->add_option("--teacher", da.teacher_keys, "teacher ledger keys (default: regularized optimum)")->delimiter(',');
    dst->add_option("--ratio", dst_ratio, "real:synthetic batches");
    dst->add_option("--synth-tokens", da.synth_tokens, "synthetic tokens to sample (default: D)");
    dst->add_option("--temperature", da.temperature, "sampling temperature");
    dst->add_option("--sample-seed", da.sample_seed, "sampling seed");
    dst->add_option("--mode", dst_mode, "individual or averaged");
    dst->add_flag("--no-control", no_control, "skip the no-mixing student");
    dst->add_option("--grid", dst_grid, "grid for the teacher search");
    dst->add_option("--name", da.name, "report name");
    add_hyper_flags(dst, da.student_hyper);

    // fit
    auto* fit = app.add_subcommand("fit", "fit power laws to a CSV of points");
    lab::FitArgs fa;
    std::string fit_csv, fit_out;
    fit->add_option("csv", fit_csv, "CSV: key columns..., x, loss")->required();
    fit->add_option("--tiers", fa.tiers, "tier axes, innermost first (e.g. K,N)")->delimiter(',');
    fit->add_option("--out", fit_out, "output prefix");
    fit->add_option("--x-label", fa.x_label, "x axis label");

    // report
    auto* rep = app.add_subcommand("report", "re-render CSV and SVG artifacts from report documents");
    std::vector<std::string> rep_docs;
    std::string rep_baseline;
    rep->add_option("reports", rep_docs, "report JSON files (default: all)");
    rep->add_option("--baseline", rep_baseline, "baseline report for an efficiency table");

    // variance
    auto* var = app.add_subcommand("variance", "run-to-run variance per randomness source");
    lab::VarianceArgs va;
    std::vector<std::string> var_modes;
    var->add_option("--d", va.d, "seed tokens D")->required();
    var->add_option("--model", va.model, "model preset");
    var->add_option("--modes", var_modes, "both, init-only, data-only")->delimiter(',');
    var->add_option("--n-seeds", va.n_seeds, "seeds per mode (>= 2)");
    var->add_option("--name", va.name, "report name");
    add_hyper_flags(var, va.hyper);

    // audit
    auto* aud = app.add_subcommand("audit", "check report keys against the ledger");
    bool reexecute = false;
    aud->add_flag("--reexecute", reexecute, "retrain every cited run and compare bitwise");

    CLI11_PARSE(app, argc, argv);

    try {
        const fs::path root = lab::resolve_root(ws_flag);
        if (init->parsed()) {
            if (!init_source.empty()) init_opt.source_text = init_source;
            init_opt.grid = grid_named(init_grid);
            auto ws = lab::Workspace::init(root, init_opt);
            const auto& st = ws.settings();
            std::cout << "workspace " << root.string() << ": " << st.source_tokens << " train tokens, "
                      << st.val_windows << " validation windows of " << st.context_len << " (hash "
                      << st.validation_hash << ")\n";
            return 0;
        }
        if (fit->parsed()) {
            fa.csv = fit_csv;
            fa.out = fit_out;
            lab::cmd_fit(fa, std::cout);
            return 0;
        }
        auto ws = lab::Workspace::open(root);
        if (run->parsed()) {
            const auto cfg = lab::load_run_config(run_config, ws.settings().default_hyper);
            const auto res = lab::cmd_run(ws, cfg, std::cout);
            return res.failed == 0 ? 0 : 1;
        }
        if (srch->parsed()) {
            sa.recipe = search::recipe_from_string(search_recipe);
            if (!search_grid.empty()) sa.grid = grid_named(search_grid);
            const auto rs = lab::cmd_search(ws, sa, std::cout);
            return rs.optimum.certified ? 0 : 1;
        }
        if (rcp->parsed()) {
            if (ra.models.empty()) ra.models = {"desk"};
            ra.ratio = parse_ratio(recipe_ratio);
            if (!recipe_grid.empty()) ra.grid = grid_named(recipe_grid);
            if (!recipe_baseline.empty()) ra.baseline = recipe_baseline;
            lab::cmd_recipe(ws, ra, std::cout);
            return 0;
        }
        if (ens->parsed()) {
            ea.mode = trainer::seed_mode_from_string(ens_mode);
            lab::cmd_ensemble(ws, ea, std::cout);
            return 0;
        }
        if (dst->parsed()) {
            da.ratio = parse_ratio(dst_ratio);
            da.mode = distill::sampling_mode_from_string(dst_mode);
            da.control = !no_control;
            if (!dst_grid.empty()) da.grid = grid_named(dst_grid);
            lab::cmd_distill(ws, da, std::cout);
            return 0;
        }
        if (rep->parsed()) {
            std::vector<fs::path> docs(rep_docs.begin(), rep_docs.end());
            std::optional<fs::path> base;
            if (!rep_baseline.empty()) base = rep_baseline;
            lab::cmd_report(ws, docs, base, std::cout);
            return 0;
        }
        if (var->parsed()) {
            if (!var_modes.empty()) {
                va.modes.clear();
                for (const auto& m : var_modes) va.modes.push_back(trainer::seed_mode_from_string(m));
            }
            lab::cmd_variance(ws, va, std::cout);
            return 0;
        }
        if (aud->parsed()) return lab::cmd_audit(ws, reexecute, std::cout).ok() ? 0 : 1;
    } catch (const LabError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
