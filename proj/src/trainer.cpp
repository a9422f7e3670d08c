// SPDX-License-Identifier: Apache-2.0
#include "dclab/trainer.hpp"

#include "dclab/common.hpp"
#include "dclab/digest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dclab::trainer {

namespace {

// Step buffers run to megabytes; glibc would mmap and unmap them on every
// step. Keep them on the heap instead.
[[maybe_unused]] const bool kAllocatorTuned = [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
    return true;
}();

}  // namespace

namespace {

constexpr std::size_t kEvalChunk = 16;
constexpr double kInf = std::numeric_limits<double>::infinity();

ojson finite_or_null(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }
double null_as_inf(const ojson& j) { return j.is_null() ? kInf : j.get<double>(); }

template <typename T>
double norm_impl(std::span<const T> g) {
    double s = 0.0;
    for (T v : g) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

template <typename T>
double clip_impl(std::span<T> g, double max_norm) {
    const double norm = norm_impl<T>(g);
    if (norm > max_norm && norm > 0.0) {
        const T scale = static_cast<T>(max_norm / norm);
        for (T& v : g) v *= scale;
    }
    return norm;
}

}  // namespace

void Hyper::validate() const {
    require(peak_lr > 0.0 && std::isfinite(peak_lr), ErrorKind::BadConfig, "peak_lr must be positive");
    require(epochs >= 1, ErrorKind::BadConfig, "epochs must be >= 1");
    require(weight_decay >= 0.0, ErrorKind::BadConfig, "weight_decay must be >= 0");
    require(batch_size >= 1, ErrorKind::BadConfig, "batch_size must be >= 1");
}

ojson to_json(const Hyper& h) {
    ojson j;
    j["lr"] = h.peak_lr;
    j["epochs"] = h.epochs;
    j["wd"] = h.weight_decay;
    j["batch"] = h.batch_size;
    return j;
}

Hyper hyper_from_json(const ojson& j) {
    Hyper h;
    h.peak_lr = j.at("lr").get<double>();
    h.epochs = j.at("epochs").get<int>();
    h.weight_decay = j.at("wd").get<double>();
    h.batch_size = j.at("batch").get<int>();
    return h;
}

ojson to_json(const model::ModelConfig& c) {
    ojson j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_kv_heads"] = c.n_kv_heads;
    j["d_ff"] = c.d_ff;
    j["context_len"] = c.context_len;
    j["vocab_size"] = c.vocab_size;
    j["bos_id"] = c.bos_id;
    j["init_scale"] = c.init_scale;
    j["rope_base"] = c.rope_base;
    return j;
}

model::ModelConfig config_from_json(const ojson& j) {
    model::ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_kv_heads = j.at("n_kv_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.bos_id = j.at("bos_id").get<int>();
    c.init_scale = j.at("init_scale").get<double>();
    c.rope_base = j.at("rope_base").get<double>();
    return c;
}

ojson RunSpec::to_json() const {
    ojson j;
    j["pool"] = {{"name", pool.name},
                 {"size_d", pool.size_d},
                 {"pool_hash", pool.pool_hash},
                 {"validation_hash", pool.validation_hash}};
    j["config"] = trainer::to_json(config);
    j["hyper"] = trainer::to_json(hyper);
    j["init_seed"] = init_seed;
    j["data_seed"] = data_seed;
    j["recipe_tag"] = recipe_tag;
    j["options"] = {{"warmup_frac", options.warmup_frac},
                    {"max_grad_norm", options.max_grad_norm},
                    {"beta1", options.adam.beta1},
                    {"beta2", options.adam.beta2},
                    {"eps", options.adam.eps},
                    {"curve_points", options.curve_points},
                    {"reshuffle_each_epoch", options.reshuffle_each_epoch},
                    {"train_eval_windows", options.train_eval_windows}};
    j["extra"] = extra;
    return j;
}

RunSpec RunSpec::from_json(const ojson& j) {
    RunSpec s;
    const auto& p = j.at("pool");
    s.pool = {p.at("name").get<std::string>(), p.at("size_d").get<std::size_t>(), p.at("pool_hash").get<std::string>(),
              p.at("validation_hash").get<std::string>()};
    s.config = config_from_json(j.at("config"));
    s.hyper = hyper_from_json(j.at("hyper"));
    s.init_seed = j.at("init_seed").get<std::uint64_t>();
    s.data_seed = j.at("data_seed").get<std::uint64_t>();
    s.recipe_tag = j.at("recipe_tag").get<std::string>();
    const auto& o = j.at("options");
    s.options.warmup_frac = o.at("warmup_frac").get<double>();
    s.options.max_grad_norm = o.at("max_grad_norm").get<double>();
    s.options.adam.beta1 = o.at("beta1").get<double>();
    s.options.adam.beta2 = o.at("beta2").get<double>();
    s.options.adam.eps = o.at("eps").get<double>();
    s.options.curve_points = o.at("curve_points").get<int>();
    s.options.reshuffle_each_epoch = o.at("reshuffle_each_epoch").get<bool>();
    s.options.train_eval_windows = o.at("train_eval_windows").get<std::size_t>();
    s.extra = j.value("extra", ojson::object());
    return s;
}

std::string RunSpec::ledger_key() const { return short_digest(to_json().dump()); }

double RunRecord::objective() const noexcept { return ok() && std::isfinite(final_val_loss) ? final_val_loss : kInf; }

ojson RunRecord::to_json() const {
    ojson j;
    j["ledger_key"] = ledger_key;
    j["kind"] = "run";
    j["status"] = ok() ? "ok" : "failed";
    j["D"] = spec.pool.size_d;
    j["N"] = spec.config.param_count();
    j["K"] = 1;
    j["lr"] = spec.hyper.peak_lr;
    j["epochs"] = spec.hyper.epochs;
    j["wd"] = spec.hyper.weight_decay;
    j["batch"] = spec.hyper.batch_size;
    j["init_seed"] = spec.init_seed;
    j["data_seed"] = spec.data_seed;
    j["recipe_tag"] = spec.recipe_tag;
    j["final_val_loss"] = finite_or_null(final_val_loss);
    j["final_train_loss"] = finite_or_null(final_train_loss);
    j["tokens_seen"] = tokens_seen;
    j["total_steps"] = total_steps;
    j["fail_step"] = fail_step ? ojson(*fail_step) : ojson(nullptr);
    j["message"] = message;
    j["spec"] = spec.to_json();
    ojson curve = ojson::array();
    for (const auto& c : loss_curve) curve.push_back({c.step, finite_or_null(c.train_loss), finite_or_null(c.val_loss)});
    j["loss_curve"] = std::move(curve);
    return j;
}

RunRecord RunRecord::from_json(const ojson& j) {
    RunRecord r;
    r.spec = RunSpec::from_json(j.at("spec"));
    r.ledger_key = j.at("ledger_key").get<std::string>();
    r.status = j.at("status").get<std::string>() == "ok" ? RunStatus::Ok : RunStatus::Failed;
    r.final_val_loss = null_as_inf(j.at("final_val_loss"));
    r.final_train_loss = null_as_inf(j.at("final_train_loss"));
    r.tokens_seen = j.at("tokens_seen").get<std::size_t>();
    r.total_steps = j.at("total_steps").get<std::size_t>();
    if (!j.at("fail_step").is_null()) r.fail_step = j.at("fail_step").get<std::size_t>();
    r.message = j.value("message", "");
    for (const auto& c : j.at("loss_curve")) {
        r.loss_curve.push_back({c.at(0).get<std::size_t>(), null_as_inf(c.at(1)), null_as_inf(c.at(2))});
    }
    return r;
}

double lr_at(std::size_t step, std::size_t total_steps, double peak_lr, double warmup_frac) {
    require(step <= total_steps, ErrorKind::Precondition, "step beyond schedule");
    require(warmup_frac > 0.0 && warmup_frac < 1.0, ErrorKind::Precondition, "warmup_frac must be in (0, 1)");
    const double total = static_cast<double>(total_steps);
    const double warm = warmup_frac * total;
    const double s = static_cast<double>(step);
    if (step == total_steps) return 0.0;
    if (s < warm) return peak_lr * s / warm;
    const double progress = (s - warm) / (total - warm);
    return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_norm(std::span<const float> grads) { return norm_impl(grads); }
double global_norm(std::span<const double> grads) { return norm_impl(grads); }
double clip_grads(std::span<float> grads, double max_norm) { return clip_impl(grads, max_norm); }
double clip_grads(std::span<double> grads, double max_norm) { return clip_impl(grads, max_norm); }

OptState OptState::zeros(std::size_t n) {
    OptState s;
    s.m.assign(n, 0.0f);
    s.v.assign(n, 0.0f);
    return s;
}

OptState OptState::for_params(const model::Parameters<float>& params) {
    OptState s = zeros(params.size());
    s.decay_mask.assign(params.size(), 0);
    for (const auto& t : params.layout().tensors()) {
        if (t.shape.size() == 2) {
            std::fill(s.decay_mask.begin() + static_cast<std::ptrdiff_t>(t.offset),
                      s.decay_mask.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size), 1);
        }
    }
    return s;
}

void adamw_step(OptState& state, std::span<float> params, std::span<const float> grads, double lr, double wd,
                const AdamConfig& cfg) {
    require(params.size() == grads.size() && state.m.size() == params.size() && state.v.size() == params.size(),
            ErrorKind::ShapeMismatch, "optimizer state, params and grads must agree in size");
    require(lr >= 0.0, ErrorKind::Precondition, "lr must be >= 0");
    require(state.decay_mask.empty() || state.decay_mask.size() == params.size(), ErrorKind::ShapeMismatch,
            "decay mask size mismatch");
    for (float g : grads) {
        if (!std::isfinite(g)) fail(ErrorKind::NonFinite, "non-finite gradient passed to AdamW");
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const float b1 = static_cast<float>(cfg.beta1);
    const float b2 = static_cast<float>(cfg.beta2);
    const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    const float eps = static_cast<float>(cfg.eps);
    const float flr = static_cast<float>(lr);
    const float fwd = static_cast<float>(wd);
    bool finite = true;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const float g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0f - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0f - b2) * g * g;
        const float mhat = state.m[i] * c1;
        const float vhat = state.v[i] * c2;
        const float decay = (state.decay_mask.empty() || state.decay_mask[i]) ? fwd : 0.0f;
        params[i] -= flr * (mhat / (std::sqrt(vhat) + eps) + decay * params[i]);
        finite = finite && std::isfinite(params[i]);
    }
    if (!finite) fail(ErrorKind::NonFinite, "parameters became non-finite after AdamW step");
}

EpochBatches::EpochBatches(const corpus::WindowSet& windows, corpus::EpochStream stream)
    : windows_(&windows), stream_(std::move(stream)) {}

std::vector<std::span<const corpus::Token>> EpochBatches::batch(std::size_t index) const {
    std::vector<std::span<const corpus::Token>> out;
    for (std::size_t w : stream_.batch(index)) out.push_back((*windows_)[w]);
    return out;
}

std::size_t EpochBatches::total_tokens() const {
    return windows_->size() * static_cast<std::size_t>(stream_.epochs()) *
           static_cast<std::size_t>(windows_->window_len());
}

std::vector<double> position_nlls(std::span<const model::Parameters<float>* const> members,
                                  const corpus::WindowSet& windows) {
    require(!members.empty(), ErrorKind::Precondition, "no models to evaluate");
    require(!windows.empty(), ErrorKind::EmptyPool, "no evaluation windows");
    const double k = static_cast<double>(members.size());
    std::vector<double> out;
    std::vector<model::Matrix<float>> logits(members.size());
    std::vector<corpus::Token> targets;
    Eigen::Array<double, 1, Eigen::Dynamic> acc;
    for (std::size_t begin = 0; begin < windows.size(); begin += kEvalChunk) {
        const std::size_t end = std::min(windows.size(), begin + kEvalChunk);
        std::vector<std::span<const corpus::Token>> chunk;
        for (std::size_t w = begin; w < end; ++w) chunk.push_back(windows[w]);
        for (std::size_t m = 0; m < members.size(); ++m) logits[m] = model::batch_logits(*members[m], chunk, &targets);
        const Eigen::Index rows = logits.front().rows();
        for (Eigen::Index r = 0; r < rows; ++r) {
            acc.setZero(logits.front().cols());
            for (const auto& lg : logits) acc += lg.row(r).cast<double>().array();
            acc /= k;
            const double mx = acc.maxCoeff();
            const double lse = mx + std::log((acc - mx).exp().sum());
            out.push_back(lse - acc(targets[static_cast<std::size_t>(r)]));
        }
    }
    return out;
}

double eval_loss_members(std::span<const model::Parameters<float>* const> members, const corpus::WindowSet& windows) {
    const auto nll = position_nlls(members, windows);
    double total = 0.0;
    for (double v : nll) total += v;
    return total / static_cast<double>(nll.size());
}

double eval_loss(const model::Parameters<float>& params, const corpus::WindowSet& windows) {
    const model::Parameters<float>* one[] = {&params};
    return eval_loss_members(one, windows);
}

double eval_loss(const model::Parameters<float>& params, const corpus::ValidationSet& validation) {
    return eval_loss(params, validation.windows);
}

RunRecord run_training(const RunSpec& spec, const BatchSource& source, const corpus::ValidationSet& validation,
                       const corpus::WindowSet& train_eval, model::Parameters<float>* final_params,
                       const std::function<void(const std::string&)>& log) {
    spec.config.validate();
    spec.hyper.validate();
    const std::size_t total = source.num_batches();
    require(total > 0, ErrorKind::EmptyPool, "schedule has no batches");
    require(spec.options.curve_points >= 1, ErrorKind::BadConfig, "curve_points must be >= 1");

    RunRecord rec;
    rec.spec = spec;
    rec.ledger_key = spec.ledger_key();
    rec.total_steps = total;
    rec.tokens_seen = source.total_tokens();

    auto params = model::init_params<float>(spec.config, spec.init_seed);
    auto opt = OptState::for_params(params);

    std::vector<std::size_t> marks;
    const std::size_t points = static_cast<std::size_t>(spec.options.curve_points);
    for (std::size_t i = 1; i <= points; ++i) {
        const std::size_t s = (i * total + points - 1) / points;
        if (s >= 1 && (marks.empty() || marks.back() != s)) marks.push_back(s);
    }
    std::size_t next_mark = 0;
    double run_sum = 0.0;
    std::size_t run_n = 0;
    std::size_t step = 0;
    try {
        for (; step < total; ++step) {
            const auto batch = source.batch(step);
            auto lg = model::loss_and_grad(params, batch);
            run_sum += lg.loss;
            ++run_n;
            clip_grads(lg.grads.values(), spec.options.max_grad_norm);
            const double lr = lr_at(step + 1, total, spec.hyper.peak_lr, spec.options.warmup_frac);
            adamw_step(opt, params.values(), lg.grads.values(), lr, spec.hyper.weight_decay, spec.options.adam);
            if (next_mark < marks.size() && marks[next_mark] == step + 1) {
                const double val = eval_loss(params, validation);
                rec.loss_curve.push_back({step + 1, run_sum / static_cast<double>(run_n), val});
                if (log) {
                    std::ostringstream os;
                    os << "step " << step + 1 << "/" << total << " train " << run_sum / static_cast<double>(run_n)
                       << " val " << val;
                    log(os.str());
                }
                run_sum = 0.0;
                run_n = 0;
                ++next_mark;
            }
        }
    } catch (const LabError& e) {
        if (e.kind() != ErrorKind::NonFinite) throw;
        rec.status = RunStatus::Failed;
        rec.fail_step = step;
        rec.message = e.what();
        rec.final_val_loss = kInf;
        rec.final_train_loss = kInf;
        return rec;
    }
    rec.final_val_loss = rec.loss_curve.back().val_loss;
    rec.final_train_loss = eval_loss(params, train_eval);
    if (!std::isfinite(rec.final_val_loss) || !std::isfinite(rec.final_train_loss)) {
        rec.status = RunStatus::Failed;
        rec.fail_step = total;
        rec.message = "NonFinite: final loss is not finite";
        rec.final_val_loss = kInf;
        rec.final_train_loss = kInf;
        return rec;
    }
    if (final_params) *final_params = std::move(params);
    return rec;
}

std::filesystem::path checkpoint_path(const RunEnv& env, const std::string& ledger_key) {
    return env.checkpoint_dir / (ledger_key + ".ckpt");
}

namespace {

void check_env(const RunSpec& spec, const RunEnv& env) {
    require(env.pool != nullptr && env.validation != nullptr, ErrorKind::Precondition,
            "run environment lacks a pool or validation set");
    require(env.pool->pool_hash() == spec.pool.pool_hash && env.pool->size_d() == spec.pool.size_d,
            ErrorKind::Precondition, "pool in the environment does not match the run spec");
    require(env.validation->hash == spec.pool.validation_hash, ErrorKind::Precondition,
            "validation set in the environment does not match the run spec");
}

}  // namespace

RunRecord train_uncached(const RunSpec& spec, const RunEnv& env, model::Parameters<float>* final_params) {
    check_env(spec, env);
    const corpus::WindowSet windows = corpus::make_windows(*env.pool, spec.config.context_len);
    require(!windows.empty(), ErrorKind::EmptyPool, "pool is smaller than one window");
    corpus::EpochStream stream(windows.size(), corpus::Permutation::from_seed(windows.size(), spec.data_seed),
                               spec.hyper.epochs, spec.hyper.batch_size, spec.options.reshuffle_each_epoch);
    EpochBatches source(windows, std::move(stream));
    const corpus::WindowSet train_eval = windows.head(spec.options.train_eval_windows);
    model::Parameters<float> params;
    RunRecord rec = run_training(spec, source, *env.validation, train_eval, &params, env.log);
    if (rec.ok() && !env.checkpoint_dir.empty()) {
        std::filesystem::create_directories(env.checkpoint_dir);
        model::save_checkpoint(checkpoint_path(env, rec.ledger_key), params, spec.init_seed, rec.total_steps);
    }
    if (final_params && rec.ok()) *final_params = std::move(params);
    return rec;
}

RunRecord train(const RunSpec& spec, const RunEnv& env) {
    check_env(spec, env);
    const std::string key = spec.ledger_key();
    if (env.ledger) {
        if (auto hit = env.ledger->find(key)) {
            RunRecord rec = RunRecord::from_json(*hit);
            rec.cached = true;
            return rec;
        }
    }
    RunRecord rec = train_uncached(spec, env);
    if (env.ledger) env.ledger->append(rec.to_json());
    return rec;
}

std::string to_string(SeedMode mode) {
    switch (mode) {
        case SeedMode::Both: return "both";
        case SeedMode::InitOnly: return "init-only";
        case SeedMode::DataOnly: return "data-only";
    }
    return "both";
}

SeedMode seed_mode_from_string(const std::string& s) {
    if (s == "both") return SeedMode::Both;
    if (s == "init-only" || s == "init") return SeedMode::InitOnly;
    if (s == "data-only" || s == "data") return SeedMode::DataOnly;
    fail(ErrorKind::BadConfig, "unknown seed mode '" + s + "' (expected both, init-only or data-only)");
}

SeedVariance seed_variance(const RunSpec& spec, SeedMode mode, int n_seeds, const RunEnv& env,
                           std::span<const std::uint64_t> seeds) {
    require(n_seeds >= 2, ErrorKind::Precondition, "seed variance needs at least 2 seeds");
    require(seeds.empty() || seeds.size() == static_cast<std::size_t>(n_seeds), ErrorKind::Precondition,
            "explicit seed list must have n_seeds entries");
    SeedVariance out;
    for (int i = 0; i < n_seeds; ++i) {
        RunSpec s = spec;
        const std::uint64_t off = static_cast<std::uint64_t>(i);
        const bool vary_init = mode != SeedMode::DataOnly;
        const bool vary_data = mode != SeedMode::InitOnly;
        if (vary_init) s.init_seed = seeds.empty() ? spec.init_seed + off : seeds[static_cast<std::size_t>(i)];
        if (vary_data) s.data_seed = seeds.empty() ? spec.data_seed + off : seeds[static_cast<std::size_t>(i)];
        out.runs.push_back(train(s, env));
    }
    double sum = 0.0;
    for (const auto& r : out.runs) sum += r.objective();
    out.mean = sum / n_seeds;
    double ss = 0.0;
    for (const auto& r : out.runs) ss += (r.objective() - out.mean) * (r.objective() - out.mean);
    out.stddev = std::sqrt(ss / (n_seeds - 1));
    return out;
}

}  // namespace dclab::trainer
