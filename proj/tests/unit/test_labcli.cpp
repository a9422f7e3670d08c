// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dclab/common.hpp"
#include "dclab/lab.hpp"
#include "dclab/report.hpp"
#include "dclab/workspace.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace dclab;
using namespace dclab::lab;
namespace fs = std::filesystem;

namespace {

const model::ModelConfig kTiny{1, 16, 2, 1, 32, 16, 257, 256};

struct TempWorkspace {
    fs::path root;
    explicit TempWorkspace(const std::string& name) : root(fs::temp_directory_path() / ("dclab_labcli_" + name)) {
        fs::remove_all(root);
        InitOptions opt;
        opt.synthetic_bytes = 40000;
        opt.context_len = 16;
        opt.val_windows = 8;
        opt.extra_models["tiny"] = kTiny;
        Workspace::init(root, opt);
    }
    ~TempWorkspace() { fs::remove_all(root); }
    Workspace open() const { return Workspace::open(root); }
};

std::size_t count(const std::string& hay, const std::string& needle) {
    std::size_t n = 0;
    for (std::size_t i = hay.find(needle); i != std::string::npos; i = hay.find(needle, i + 1)) ++n;
    return n;
}

std::string error_of(const std::string& yaml) {
    try {
        parse_run_config(yaml, trainer::Hyper{});
    } catch (const LabError& e) {
        CHECK(e.kind() == ErrorKind::BadConfig);
        return e.what();
    }
    FAIL("config was accepted: " << yaml);
    return {};
}

ojson read_json(const fs::path& p) { return ojson::parse(report::read_text(p)); }

void write_json(const fs::path& p, const ojson& j) { report::write_text(p, j.dump(2) + "\n"); }

}  // namespace

TEST_CASE("workspace init and open") {
    TempWorkspace t("init");
    auto ws = t.open();
    CHECK(ws.settings().context_len == 16);
    CHECK(ws.settings().val_windows == 8);
    CHECK(ws.validation().n_windows() == 8);
    CHECK(ws.model("tiny") == kTiny);
    CHECK(ws.model("desk").d_model == 64);
    CHECK_THROWS_AS(ws.model("nope"), LabError);
    CHECK(fs::exists(t.root / "workspace.json"));
    CHECK(fs::exists(t.root / "validation.pool"));

    const auto& p1 = ws.pool(1000);
    const auto& p2 = ws.pool(2000);
    CHECK(std::equal(p1.tokens().begin(), p1.tokens().end(), p2.tokens().begin()));
    CHECK_THROWS_AS(ws.pool(ws.settings().source_tokens + 1), LabError);

    CHECK_THROWS_AS(Workspace::init(t.root, InitOptions{}), LabError);

    // a modified validation split is refused
    {
        auto bytes = report::read_text(t.root / "validation.pool");
        bytes[bytes.size() - 1] ^= 1;
        report::write_text(t.root / "validation.pool", bytes);
    }
    CHECK_THROWS_AS(Workspace::open(t.root), LabError);
}

TEST_CASE("run config parsing") {
    const auto cfg = parse_run_config(
        "pool: 2000\n"
        "model: tiny\n"
        "hyper: {lr: 0.01, epochs: 2, wd: 0.3, batch: 4}\n"
        "seeds: {init: 5, data: 6}\n"
        "sweep:\n"
        "  epochs: [1, 2]\n"
        "  lr: [0.001, 0.003, 0.01]\n"
        "members: 2\n"
        "seed_mode: init-only\n",
        trainer::Hyper{});
    CHECK(cfg.d == 2000);
    CHECK(cfg.model_preset == "tiny");
    CHECK(cfg.hyper == trainer::Hyper{0.01, 2, 0.3, 4});
    CHECK(cfg.init_seed == 5);
    CHECK(cfg.data_seed == 6);
    CHECK(cfg.sweep_epochs == std::vector<int>{1, 2});
    CHECK(cfg.sweep_lr.size() == 3);
    CHECK(cfg.members == 2);
    CHECK(cfg.seed_mode == trainer::SeedMode::InitOnly);

    const auto override_model = parse_run_config("pool: 100\nmodel: {preset: xs, n_layers: 1}\n", trainer::Hyper{});
    CHECK(override_model.model_preset == "xs");
    REQUIRE(override_model.model.has_value());
    CHECK(override_model.model->n_layers == 1);

    auto e = error_of("pool: 100\nmodel: desk\nlearning_rate: 3\n");
    CHECK(e.find("line 3") != std::string::npos);
    CHECK(e.find("learning_rate") != std::string::npos);
    e = error_of("pool: 100\nhyper:\n  lr: fast\n");
    CHECK(e.find("line 3") != std::string::npos);
    CHECK(e.find("lr") != std::string::npos);
    e = error_of("model: desk\n");
    CHECK(e.find("pool") != std::string::npos);
    e = error_of("pool: 100\nseed_mode: sometimes\n");
    CHECK(e.find("line 2") != std::string::npos);
    e = error_of("pool: 100\nhyper: {lr: -1}\n");
    CHECK(e.find("line 2") != std::string::npos);
    e = error_of("pool: 100\nsweep: {epochs: []}\n");
    CHECK(e.find("epochs") != std::string::npos);
}

TEST_CASE("sweep expansion") {
    TempWorkspace t("expand");
    auto ws = t.open();
    auto cfg = parse_run_config(
        "pool: 2000\nmodel: tiny\nsweep: {lr: [0.001, 0.01], epochs: [1, 2, 4]}\nmembers: 2\nseed_mode: data-only\n",
        ws.settings().default_hyper);
    const auto runs = expand_runs(cfg, ws);
    CHECK(runs.size() == 2 * 3 * 2);
    std::set<std::string> keys;
    for (const auto& r : runs) {
        keys.insert(r.ledger_key());
        CHECK(r.config == kTiny);
        CHECK(r.pool.size_d == 2000);
        CHECK(r.init_seed == 0);
    }
    CHECK(keys.size() == runs.size());
    CHECK(runs[0].data_seed != runs[1].data_seed);
    CHECK(runs[0].hyper.peak_lr == runs[1].hyper.peak_lr);

    cfg = parse_run_config("pool: 2000\nmodel: {preset: tiny, d_ff: 48}\n", ws.settings().default_hyper);
    CHECK(expand_runs(cfg, ws).front().config.d_ff == 48);
}

TEST_CASE("run verb caches and echoes keys") {
    TempWorkspace t("run");
    auto ws = t.open();
    const auto cfg =
        parse_run_config("pool: 2000\nmodel: tiny\nhyper: {epochs: 1, batch: 8}\nsweep: {lr: [0.001, 0.003]}\n",
                         ws.settings().default_hyper);
    std::ostringstream first_out;
    const auto first = cmd_run(ws, cfg, first_out);
    CHECK(first.trained == 2);
    CHECK(first.cached == 0);
    CHECK(first.failed == 0);
    CHECK(ws.ledger().size() == 2);

    auto again_ws = t.open();
    std::ostringstream out;
    const auto again = cmd_run(again_ws, cfg, out);
    CHECK(again.trained == 0);
    CHECK(again.cached == 2);
    CHECK(again.keys == first.keys);
    for (const auto& k : first.keys) CHECK(out.str().find(k) != std::string::npos);
    CHECK(again_ws.ledger().size() == 2);
}

TEST_CASE("svg markers, references and determinism") {
    report::Plot plot;
    plot.title = "loss vs D";
    plot.x_label = "D";
    plot.y_label = "loss";
    report::Series s{"regularized, desk", {{1, 4.0}, {2, 3.6}, {4, 3.4}, {8, 3.3}}, scaling::LawParams{1.0, 0.7, 3.1}};
    report::Series bare{"standard", {{1, 4.2}, {2, 3.9}, {4, std::numeric_limits<double>::infinity()}}, std::nullopt};
    plot.series = {s, bare};
    plot.references = {{"regularized asymptote", 3.43}, {"far away", 100.0}};
    const auto svg = report::render_svg(plot);
    CHECK(count(svg, "<circle class=\"point\"") == 6);
    CHECK(count(svg, "class=\"law\"") == 1);
    CHECK(count(svg, "class=\"asymptote\"") == 1);
    CHECK(svg.find("stroke-dasharray=\"6,4\"") != std::string::npos);
    CHECK(count(svg, "paper reference: regularized asymptote") == 1);
    CHECK(count(svg, "paper reference: far away") == 1);
    CHECK(svg == report::render_svg(plot));
    // the embedded data comment stays one CSV row per point
    CHECK(svg.find("regularized; desk,2,3.6") != std::string::npos);
}

TEST_CASE("efficiency of an equal-alpha pair is the closed form") {
    const double A1 = 2.0, A2 = 0.8, alpha = 0.5, E = 3.0;
    ojson baseline{{"recipe", "standard"}, {"d_law", {{"A", A1}, {"alpha", alpha}, {"E", E}}}};
    ojson doc{{"recipe", "regularized"}, {"per_d", ojson::array()}};
    for (double d : {1e5, 4e5, 1.6e6}) {
        const double loss = E + A2 / std::pow(d / 1e6, alpha);
        doc["per_d"].push_back({{"D", d}, {"loss", loss}});
    }
    const auto rows = efficiency_rows(doc, baseline);
    REQUIRE(rows.size() == 3);
    const double want = std::pow(A1 / A2, 1.0 / alpha);
    for (const auto& r : rows) {
        CHECK(r.efficiency == doctest::Approx(want).epsilon(1e-9));
        CHECK(r.d_equiv == doctest::Approx(want * r.d).epsilon(1e-9));
        CHECK(r.recipe == "regularized");
        CHECK(r.baseline == "standard");
    }
    // below the baseline asymptote the equivalent data is unbounded
    doc["per_d"] = ojson::array({{{"D", 1e6}, {"loss", E - 0.1}}});
    CHECK(std::isinf(efficiency_rows(doc, baseline).front().efficiency));

    const auto csv = report::efficiency_csv(rows);
    CHECK(csv.rfind("recipe,baseline,D,loss,D_equivalent,efficiency\n", 0) == 0);
    CHECK(count(csv, "\n") == 4);
}

TEST_CASE("fit verb recovers a planted law") {
    const fs::path dir = fs::temp_directory_path() / "dclab_labcli_fit";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "pts.csv");
        os.precision(17);
        os << "x,loss\n";
        for (double x : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) os << x << ',' << 3.2 + 1.5 * std::pow(x, -0.6) << '\n';
    }
    FitArgs fa;
    fa.csv = dir / "pts.csv";
    std::ostringstream out;
    const auto doc = cmd_fit(fa, out);
    const auto& fit = doc["fits"][0]["fit"];
    CHECK(fit["E"].get<double>() == doctest::Approx(3.2).epsilon(1e-6));
    CHECK(fit["alpha"].get<double>() == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(fs::exists(dir / "pts-fit.svg"));
    CHECK(fs::exists(dir / "pts-fit.csv"));
    const auto svg = report::read_text(dir / "pts-fit.svg");
    CHECK(count(svg, "<circle class=\"point\"") == 6);
    fs::remove_all(dir);
}

TEST_CASE("unknown recipe is rejected before any work") {
    TempWorkspace t("badrecipe");
    auto ws = t.open();
    RecipeArgs ra;
    ra.recipe = "bogus";
    ra.d_list = {1000};
    ra.models = {"tiny"};
    std::ostringstream out;
    CHECK_THROWS_AS(cmd_recipe(ws, ra, out), LabError);
    ra.recipe = "standard";
    ra.models = {"nope"};
    CHECK_THROWS_AS(cmd_recipe(ws, ra, out), LabError);
    CHECK(ws.ledger().size() == 0);
    CHECK(fs::is_empty(ws.reports_dir()));
}

TEST_CASE("variance verb") {
    TempWorkspace t("variance");
    auto ws = t.open();
    VarianceArgs va;
    va.d = 2000;
    va.model = "tiny";
    va.hyper.epochs = 1;
    va.hyper.batch = 8;
    va.n_seeds = 1;
    std::ostringstream out;
    CHECK_THROWS_AS(cmd_variance(ws, va, out), LabError);
    CHECK(ws.ledger().size() == 0);

    va.n_seeds = 2;
    va.name = "var";
    const auto doc = cmd_variance(ws, va, out);
    const auto text = doc.dump();
    CHECK(text.find("0.008207") != std::string::npos);
    CHECK(text.find("0.007605") != std::string::npos);
    CHECK(text.find("0.007213") != std::string::npos);
    CHECK(fs::exists(ws.reports_dir() / "var.json"));
}

TEST_CASE("reports rerender byte for byte and audit closes over the ledger") {
    TempWorkspace t("audit");
    {
        auto ws = t.open();
        EnsembleArgs ea;
        ea.d = 2000;
        ea.model = "tiny";
        ea.k = 2;
        ea.hyper.epochs = 1;
        ea.hyper.batch = 8;
        ea.name = "ens";
        std::ostringstream out;
        cmd_ensemble(ws, ea, out);
        CHECK(ws.ledger().size() == 3);  // two members and the ensemble

        // same seeds and hyperparameters: served from the ledger
        VarianceArgs va;
        va.d = 2000;
        va.model = "tiny";
        va.modes = {trainer::SeedMode::Both};
        va.n_seeds = 2;
        va.hyper = ea.hyper;
        va.name = "var";
        cmd_variance(ws, va, out);
        CHECK(ws.ledger().size() == 3);
    }
    const fs::path doc_path = t.root / "reports" / "ens.json";
    REQUIRE(fs::exists(doc_path));

    std::map<fs::path, std::string> first;
    {
        auto ws = t.open();
        std::ostringstream out;
        for (const auto& p : cmd_report(ws, {}, std::nullopt, out)) first[p] = report::read_text(p);
        CHECK_FALSE(first.empty());
        for (const auto& p : cmd_report(ws, {}, std::nullopt, out)) CHECK(report::read_text(p) == first[p]);
    }

    {
        auto ws = t.open();
        std::ostringstream out;
        const auto res = cmd_audit(ws, true, out);
        CHECK(res.ok());
        CHECK(res.reports == 2);
        CHECK(res.keys == 3);
        CHECK(res.reexecuted == 3);
    }

    const ojson original = read_json(doc_path);

    SUBCASE("a tampered loss is caught") {
        ojson doc = original;
        bool changed = false;
        std::function<void(ojson&)> bump = [&](ojson& j) {
            if (changed) return;
            if (j.is_object()) {
                if (j.contains("ledger_key") && j.contains("val_loss") && j["val_loss"].is_number()) {
                    j["val_loss"] = j["val_loss"].get<double>() + 1e-9;
                    changed = true;
                    return;
                }
                for (auto& [k, v] : j.items()) bump(v);
            } else if (j.is_array()) {
                for (auto& v : j) bump(v);
            }
        };
        bump(doc);
        REQUIRE(changed);
        write_json(doc_path, doc);
        auto ws = t.open();
        std::ostringstream out;
        CHECK_FALSE(cmd_audit(ws, false, out).ok());
    }
    SUBCASE("a key missing from the ledger is caught") {
        ojson doc = original;
        doc["ledger_keys"].push_back("0000000000000000");
        write_json(doc_path, doc);
        auto ws = t.open();
        std::ostringstream out;
        CHECK_FALSE(cmd_audit(ws, false, out).ok());
    }
    SUBCASE("an unlisted citation is caught") {
        ojson doc = original;
        doc["ledger_keys"] = ojson::array();
        write_json(doc_path, doc);
        auto ws = t.open();
        std::ostringstream out;
        CHECK_FALSE(cmd_audit(ws, false, out).ok());
    }
    write_json(doc_path, original);
}

TEST_CASE("paper references are labeled annotations") {
    CHECK(paper_references("regularized").dump().find("3.43") != std::string::npos);
    CHECK(paper_references("ensemble").dump().find("3.34") != std::string::npos);
    CHECK(paper_references("joint").dump().find("3.17") != std::string::npos);
    const auto eff = paper_references("efficiency").dump();
    CHECK(eff.find("5.17") != std::string::npos);
    CHECK(eff.find("2.29") != std::string::npos);
}
