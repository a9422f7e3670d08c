// SPDX-License-Identifier: Apache-2.0
#include "dclab/workspace.hpp"

#include "dclab/common.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace dclab::lab {

namespace fs = std::filesystem;

std::map<std::string, model::ModelConfig> default_models(int context_len) {
    std::map<std::string, model::ModelConfig> m;
    model::ModelConfig base;
    base.context_len = context_len;
    auto xs = base, desk = base, md = base;
    xs.d_model = 32;
    xs.n_heads = 2;
    xs.n_kv_heads = 2;
    xs.d_ff = 128;
    md.d_model = 96;
    md.n_heads = 6;
    md.n_kv_heads = 6;
    md.d_ff = 384;
    m["xs"] = xs;
    m["desk"] = desk;
    m["m"] = md;
    return m;
}

ojson WorkspaceSettings::to_json() const {
    ojson models_j = ojson::object();
    for (const auto& [name, cfg] : models) models_j[name] = trainer::to_json(cfg);
    return ojson{{"version", 1},
                 {"source_kind", source_kind},
                 {"source", source_desc},
                 {"source_hash", source_hash},
                 {"source_tokens", source_tokens},
                 {"context_len", context_len},
                 {"val_windows", val_windows},
                 {"validation_hash", validation_hash},
                 {"models", models_j},
                 {"default_hyper", trainer::to_json(default_hyper)},
                 {"grid", grid.to_json()}};
}

WorkspaceSettings WorkspaceSettings::from_json(const ojson& j) {
    WorkspaceSettings s;
    s.source_kind = j.at("source_kind").get<std::string>();
    s.source_desc = j.at("source").get<std::string>();
    s.source_hash = j.at("source_hash").get<std::string>();
    s.source_tokens = j.at("source_tokens").get<std::size_t>();
    s.context_len = j.at("context_len").get<int>();
    s.val_windows = j.at("val_windows").get<std::size_t>();
    s.validation_hash = j.at("validation_hash").get<std::string>();
    for (const auto& [name, cfg] : j.at("models").items()) s.models[name] = trainer::config_from_json(cfg);
    s.default_hyper = trainer::hyper_from_json(j.at("default_hyper"));
    s.grid = search::GridAxes::from_json(j.at("grid"));
    return s;
}

namespace {

void write_json(const fs::path& path, const ojson& j) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
    os << j.dump(2) << '\n';
}

ojson read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Io, "cannot read " + path.string());
    try {
        return ojson::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::Format, path.string() + ": " + e.what());
    }
}

}  // namespace

Workspace Workspace::init(const fs::path& root, const InitOptions& opt) {
    require(!fs::exists(root / "workspace.json"), ErrorKind::Precondition,
            "workspace already exists at " + root.string());
    require(opt.context_len >= 2, ErrorKind::BadConfig, "context_len must be >= 2");
    require(opt.val_windows >= 1, ErrorKind::BadConfig, "val_windows must be >= 1");

    corpus::Tokenizer tok;
    std::vector<corpus::Token> all;
    WorkspaceSettings s;
    if (opt.source_text) {
        std::ifstream is(*opt.source_text, std::ios::binary);
        if (!is) fail(ErrorKind::Io, "cannot read source " + opt.source_text->string());
        const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        all = tok.encode(text);
        s.source_kind = "text";
        s.source_desc = opt.source_text->string();
    } else {
        all = tok.encode(corpus::synthetic_text(opt.synthetic_seed, opt.synthetic_bytes));
        s.source_kind = "synthetic";
        s.source_desc = "synthetic seed " + std::to_string(opt.synthetic_seed) + " bytes " +
                        std::to_string(opt.synthetic_bytes);
    }
    auto split = corpus::split_holdout(all, opt.val_windows, opt.context_len);

    fs::create_directories(root);
    const corpus::TokenPool source(split.train_source, tok.vocab_size);
    const auto& vw = split.validation.windows;
    const corpus::TokenPool val(std::vector<corpus::Token>(vw.flat().begin(), vw.flat().end()), tok.vocab_size);
    corpus::write_pool_file(root / "source.pool", source);
    corpus::write_pool_file(root / "validation.pool", val);

    s.context_len = opt.context_len;
    s.val_windows = opt.val_windows;
    s.validation_hash = split.validation.hash;
    s.source_hash = source.pool_hash();
    s.source_tokens = source.size_d();
    s.models = default_models(opt.context_len);
    for (const auto& [name, cfg] : opt.extra_models) {
        require(cfg.context_len == opt.context_len, ErrorKind::BadConfig,
                "preset " + name + " has a different context length than the workspace");
        cfg.validate();
        s.models[name] = cfg;
    }
    opt.grid.validate();
    s.grid = opt.grid;
    write_json(root / "workspace.json", s.to_json());
    for (const char* sub : {"checkpoints", "synth", "reports"}) fs::create_directories(root / sub);
    return open(root);
}

Workspace Workspace::open(const fs::path& root) {
    Workspace ws;
    ws.root_ = root;
    ws.load();
    return ws;
}

void Workspace::load() {
    require(fs::exists(root_ / "workspace.json"), ErrorKind::Precondition,
            "no workspace at " + root_.string() + " (run init first)");
    settings_ = WorkspaceSettings::from_json(read_json(root_ / "workspace.json"));
    const auto source = corpus::read_pool_file(root_ / "source.pool");
    require(source.pool_hash() == settings_.source_hash, ErrorKind::Format, "source.pool does not match workspace.json");
    source_.assign(source.tokens().begin(), source.tokens().end());
    const auto val = corpus::read_pool_file(root_ / "validation.pool");
    require(val.pool_hash() == settings_.validation_hash, ErrorKind::Format,
            "validation.pool does not match workspace.json");
    validation_.windows = corpus::WindowSet(std::vector<corpus::Token>(val.tokens().begin(), val.tokens().end()),
                                            settings_.context_len);
    validation_.hash = val.pool_hash();
    ledger_ = std::make_unique<Ledger>(root_ / "ledger.jsonl");
}

const corpus::TokenPool& Workspace::pool(std::size_t d) {
    auto& slot = pools_[d];
    if (!slot) slot = std::make_unique<corpus::TokenPool>(corpus::build_pool(source_, d, 257));
    return *slot;
}

model::ModelConfig Workspace::model(const std::string& preset) const {
    const auto it = settings_.models.find(preset);
    if (it == settings_.models.end()) {
        std::string known;
        for (const auto& [name, c] : settings_.models) known += (known.empty() ? "" : ", ") + name;
        fail(ErrorKind::BadConfig, "unknown model preset '" + preset + "' (known: " + known + ")");
    }
    return it->second;
}

trainer::RunEnv Workspace::env(std::size_t d) {
    trainer::RunEnv e;
    e.pool = &pool(d);
    e.validation = &validation_;
    e.ledger = ledger_.get();
    e.checkpoint_dir = checkpoints_dir();
    return e;
}

distill::DistillEnv Workspace::distill_env(std::size_t d) {
    return distill::DistillEnv{env(d), root_ / "synth", pool_name(d)};
}

trainer::RunSpec Workspace::base_spec(std::size_t d, const std::string& preset) {
    trainer::RunSpec s;
    const auto& p = pool(d);
    s.pool = {pool_name(d), p.size_d(), p.pool_hash(), validation_.hash};
    s.config = model(preset);
    s.hyper = settings_.default_hyper;
    return s;
}

fs::path resolve_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("DCLAB_WORKSPACE"); env && *env) return env;
    return "workspace";
}

namespace {

[[noreturn]] void config_error(const YAML::Node& node, const std::string& what) {
    const auto m = node.Mark();
    if (m.line >= 0) fail(ErrorKind::BadConfig, "line " + std::to_string(m.line + 1) + ": " + what);
    fail(ErrorKind::BadConfig, what);
}

template <class T>
T scalar(const YAML::Node& node, const std::string& field) {
    if (!node.IsScalar()) config_error(node, "field '" + field + "' must be a scalar");
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        config_error(node, "field '" + field + "' has an invalid value '" + node.Scalar() + "'");
    }
}

template <class T>
std::vector<T> list(const YAML::Node& node, const std::string& field) {
    if (!node.IsSequence()) config_error(node, "field '" + field + "' must be a list");
    std::vector<T> out;
    for (const auto& item : node) out.push_back(scalar<T>(item, field));
    if (out.empty()) config_error(node, "field '" + field + "' must not be empty");
    return out;
}

void check_keys(const YAML::Node& map, const std::set<std::string>& allowed, const std::string& where) {
    if (!map.IsMap()) config_error(map, "'" + where + "' must be a mapping");
    for (const auto& kv : map) {
        const auto key = kv.first.as<std::string>();
        if (!allowed.count(key)) config_error(kv.first, "unknown field '" + key + "' in " + where);
    }
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const trainer::Hyper& defaults) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        fail(ErrorKind::BadConfig, "line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    RunConfig c;
    c.hyper = defaults;
    check_keys(root, {"pool", "model", "hyper", "seeds", "sweep", "members", "seed_mode"}, "config");
    if (!root["pool"]) fail(ErrorKind::BadConfig, "missing required field 'pool'");
    const auto d = scalar<long long>(root["pool"], "pool");
    if (d <= 0) config_error(root["pool"], "field 'pool' must be positive");
    c.d = static_cast<std::size_t>(d);

    if (const auto m = root["model"]) {
        if (m.IsScalar()) {
            c.model_preset = m.as<std::string>();
        } else {
            check_keys(m, {"preset", "n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "init_scale"}, "model");
            if (m["preset"]) c.model_preset = scalar<std::string>(m["preset"], "model.preset");
            model::ModelConfig mc;  // overrides are applied on top of the preset later
            mc.n_layers = m["n_layers"] ? scalar<int>(m["n_layers"], "model.n_layers") : -1;
            mc.d_model = m["d_model"] ? scalar<int>(m["d_model"], "model.d_model") : -1;
            mc.n_heads = m["n_heads"] ? scalar<int>(m["n_heads"], "model.n_heads") : -1;
            mc.n_kv_heads = m["n_kv_heads"] ? scalar<int>(m["n_kv_heads"], "model.n_kv_heads") : -1;
            mc.d_ff = m["d_ff"] ? scalar<int>(m["d_ff"], "model.d_ff") : -1;
            mc.init_scale = m["init_scale"] ? scalar<double>(m["init_scale"], "model.init_scale") : -1.0;
            c.model = mc;
        }
    }
    if (const auto h = root["hyper"]) {
        check_keys(h, {"lr", "epochs", "wd", "batch"}, "hyper");
        if (h["lr"]) c.hyper.peak_lr = scalar<double>(h["lr"], "hyper.lr");
        if (h["epochs"]) c.hyper.epochs = scalar<int>(h["epochs"], "hyper.epochs");
        if (h["wd"]) c.hyper.weight_decay = scalar<double>(h["wd"], "hyper.wd");
        if (h["batch"]) c.hyper.batch_size = scalar<int>(h["batch"], "hyper.batch");
        try {
            c.hyper.validate();
        } catch (const LabError& e) {
            config_error(h, e.detail());
        }
    }
    if (const auto s = root["seeds"]) {
        check_keys(s, {"init", "data"}, "seeds");
        if (s["init"]) c.init_seed = scalar<std::uint64_t>(s["init"], "seeds.init");
        if (s["data"]) c.data_seed = scalar<std::uint64_t>(s["data"], "seeds.data");
    }
    if (const auto s = root["sweep"]) {
        check_keys(s, {"lr", "epochs", "wd"}, "sweep");
        if (s["lr"]) c.sweep_lr = list<double>(s["lr"], "sweep.lr");
        if (s["epochs"]) c.sweep_epochs = list<int>(s["epochs"], "sweep.epochs");
        if (s["wd"]) c.sweep_wd = list<double>(s["wd"], "sweep.wd");
    }
    if (root["members"]) {
        c.members = scalar<int>(root["members"], "members");
        if (c.members < 1) config_error(root["members"], "field 'members' must be >= 1");
    }
    if (root["seed_mode"]) {
        try {
            c.seed_mode = trainer::seed_mode_from_string(scalar<std::string>(root["seed_mode"], "seed_mode"));
        } catch (const LabError& e) {
            config_error(root["seed_mode"], e.detail());
        }
    }
    return c;
}

RunConfig load_run_config(const fs::path& path, const trainer::Hyper& defaults) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Io, "cannot read config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return parse_run_config(ss.str(), defaults);
    } catch (const LabError& e) {
        fail(e.kind(), path.string() + ": " + e.detail());
    }
}

std::vector<trainer::RunSpec> expand_runs(const RunConfig& cfg, Workspace& ws) {
    trainer::RunSpec base = ws.base_spec(cfg.d, cfg.model_preset);
    if (cfg.model) {
        const auto& o = *cfg.model;
        if (o.n_layers > 0) base.config.n_layers = o.n_layers;
        if (o.d_model > 0) base.config.d_model = o.d_model;
        if (o.n_heads > 0) base.config.n_heads = o.n_heads;
        if (o.n_kv_heads > 0) base.config.n_kv_heads = o.n_kv_heads;
        if (o.d_ff > 0) base.config.d_ff = o.d_ff;
        if (o.init_scale > 0) base.config.init_scale = o.init_scale;
    }
    base.config.validate();
    base.hyper = cfg.hyper;
    base.init_seed = cfg.init_seed;
    base.data_seed = cfg.data_seed;

    const auto lrs = cfg.sweep_lr.empty() ? std::vector<double>{cfg.hyper.peak_lr} : cfg.sweep_lr;
    const auto eps = cfg.sweep_epochs.empty() ? std::vector<int>{cfg.hyper.epochs} : cfg.sweep_epochs;
    const auto wds = cfg.sweep_wd.empty() ? std::vector<double>{cfg.hyper.weight_decay} : cfg.sweep_wd;
    std::vector<trainer::RunSpec> out;
    for (double lr : lrs)
        for (int e : eps)
            for (double wd : wds)
                for (int m = 0; m < cfg.members; ++m) {
                    trainer::RunSpec s = base;
                    s.hyper.peak_lr = lr;
                    s.hyper.epochs = e;
                    s.hyper.weight_decay = wd;
                    s.hyper.validate();
                    const auto off = static_cast<std::uint64_t>(m);
                    if (cfg.seed_mode != trainer::SeedMode::DataOnly) s.init_seed += off;
                    if (cfg.seed_mode != trainer::SeedMode::InitOnly) s.data_seed += off;
                    out.push_back(std::move(s));
                }
    return out;
}

}  // namespace dclab::lab
