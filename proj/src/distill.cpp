// SPDX-License-Identifier: Apache-2.0
#include "dclab/distill.hpp"

#include "dclab/common.hpp"
#include "dclab/digest.hpp"
#include "dclab/rng.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace dclab::distill {

std::string to_string(SamplingMode m) {
    return m == SamplingMode::IndividualMembers ? "individual-members" : "averaged-ensemble";
}

SamplingMode sampling_mode_from_string(const std::string& s) {
    if (s == "individual-members" || s == "individual") return SamplingMode::IndividualMembers;
    if (s == "averaged-ensemble" || s == "averaged") return SamplingMode::AveragedEnsemble;
    fail(ErrorKind::BadConfig, "unknown sampling mode '" + s + "'");
}

namespace {

using model::Token;

// One context_len sequence from the logit-averaged members.
std::vector<Token> sample_averaged(std::span<const model::Parameters<float>* const> members, int len,
                                   double temperature, std::uint64_t seed) {
    const auto& cfg = members.front()->config();
    const Token start = static_cast<Token>(cfg.bos_id >= 0 ? cfg.bos_id : 0);
    Rng rng(derive_seed(seed, 0x5A4D));
    std::vector<model::Decoder<float>> decs;
    for (const auto* m : members) decs.emplace_back(*m);
    std::vector<double> row(static_cast<std::size_t>(cfg.vocab_size));
    std::vector<Token> out;
    Token tok = start;
    const double k = static_cast<double>(members.size());
    for (int i = 0; i < len; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        for (auto& d : decs) {
            const auto lg = d.step(tok);
            for (std::size_t v = 0; v < row.size(); ++v) row[v] += lg[v];
        }
        for (auto& v : row) v /= k;
        if (cfg.bos_id >= 0) row[static_cast<std::size_t>(cfg.bos_id)] = -std::numeric_limits<double>::infinity();
        tok = model::pick_token<double>(row, temperature, rng.uniform());
        out.push_back(tok);
    }
    return out;
}

}  // namespace

SynthPool generate_synthetic(std::span<const model::Parameters<float>* const> teacher,
                             std::span<const std::string> teacher_keys, const SynthOptions& options) {
    require(!teacher.empty(), ErrorKind::MissingMember, "teacher has no members");
    const auto& cfg = teacher.front()->config();
    for (const auto* m : teacher)
        require(m->config() == cfg, ErrorKind::ShapeMismatch, "teacher members have different configs");
    require(options.n_tokens >= static_cast<std::size_t>(cfg.context_len), ErrorKind::Precondition,
            "n_tokens must be at least one context length");
    require(options.temperature >= 0.0, ErrorKind::Precondition, "temperature must be >= 0");

    std::vector<Token> tokens;
    tokens.reserve(options.n_tokens);
    const std::size_t k = teacher.size();
    for (std::size_t seq = 0; tokens.size() < options.n_tokens; ++seq) {
        const std::uint64_t s = derive_seed(options.seed, seq, 0x53594E);
        std::vector<Token> piece;
        if (options.mode == SamplingMode::IndividualMembers || k == 1)
            piece = model::sample(*teacher[seq % k], static_cast<std::size_t>(cfg.context_len), options.temperature, s);
        else
            piece = sample_averaged(teacher, cfg.context_len, options.temperature, s);
        const std::size_t take = std::min(piece.size(), options.n_tokens - tokens.size());
        tokens.insert(tokens.end(), piece.begin(), piece.begin() + static_cast<std::ptrdiff_t>(take));
    }

    SynthPool out{corpus::TokenPool(std::move(tokens), cfg.vocab_size), {}};
    out.provenance = ojson{{"teacher_keys", std::vector<std::string>(teacher_keys.begin(), teacher_keys.end())},
                           {"n_tokens", options.n_tokens},
                           {"temperature", options.temperature},
                           {"seed", options.seed},
                           {"mode", to_string(options.mode)},
                           {"sequence_len", cfg.context_len},
                           {"pool_hash", out.pool.pool_hash()}};
    return out;
}

SynthPool generate_synthetic(const ensemble::EnsembleSpec& teacher, const trainer::RunEnv& env,
                             const SynthOptions& options) {
    require(teacher.k() >= 1, ErrorKind::MissingMember, "teacher has no members");
    std::vector<model::Parameters<float>> params;
    for (const auto& key : teacher.member_keys) params.push_back(ensemble::load_member(key, env));
    std::vector<const model::Parameters<float>*> ptrs;
    for (const auto& p : params) ptrs.push_back(&p);
    return generate_synthetic(ptrs, teacher.member_keys, options);
}

void write_synth_pool(const std::filesystem::path& pool_path, const SynthPool& synth) {
    corpus::write_pool_file(pool_path, synth.pool);
    std::ofstream os(pool_path.string() + ".json");
    if (!os) fail(ErrorKind::Io, "cannot write provenance for " + pool_path.string());
    os << synth.provenance.dump(2) << '\n';
}

SynthPool read_synth_pool(const std::filesystem::path& pool_path) {
    SynthPool s;
    s.pool = corpus::read_pool_file(pool_path);
    std::ifstream is(pool_path.string() + ".json");
    if (!is) fail(ErrorKind::Io, "missing provenance sidecar for " + pool_path.string());
    try {
        s.provenance = ojson::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::Format, pool_path.string() + ".json: " + e.what());
    }
    require(s.provenance.value("pool_hash", "") == s.pool.pool_hash(), ErrorKind::Format,
            "provenance hash does not match " + pool_path.string());
    return s;
}

MixedBatches::MixedBatches(const corpus::WindowSet& real, corpus::EpochStream real_stream,
                           const corpus::WindowSet& synth, MixingRatio ratio, int batch_size, int synth_epoch_cap,
                           std::size_t periods)
    : real_(&real), real_stream_(std::move(real_stream)), synth_(&synth), batch_size_(batch_size) {
    require(ratio.real >= 0 && ratio.synth >= 1, ErrorKind::Precondition,
            "mixing ratio needs a non-negative real count and a positive synthetic count");
    require(batch_size >= 1, ErrorKind::Precondition, "batch size must be positive");
    require(synth_epoch_cap >= 1, ErrorKind::Precondition, "synth_epoch_cap must be >= 1");
    require(!synth.empty(), ErrorKind::EmptyPool, "synthetic pool has no windows");
    const std::size_t r = static_cast<std::size_t>(ratio.real), s = static_cast<std::size_t>(ratio.synth);
    const std::size_t real_total = real_stream_.num_batches();
    if (periods == 0) {
        require(r > 0, ErrorKind::Precondition, "a synthetic-only schedule needs an explicit period count");
        periods = (real_total + r - 1) / r;
    }
    periods_ = periods;
    const std::size_t bs = static_cast<std::size_t>(batch_size);
    const std::size_t need = periods * s * bs;
    const std::size_t allowed = static_cast<std::size_t>(synth_epoch_cap) * synth.size();
    if (need > allowed)
        fail(ErrorKind::SynthExhausted, "schedule needs " + std::to_string(need) + " synthetic windows but the cap allows " +
                                            std::to_string(allowed));

    std::size_t real_next = 0, synth_next = 0;
    const std::size_t win = static_cast<std::size_t>(real.window_len());
    for (std::size_t p = 0; p < periods; ++p) {
        for (std::size_t i = 0; i < r && real_next < real_total; ++i) {
            schedule_.push_back({false, real_next});
            total_tokens_ += real_stream_.batch(real_next).size() * win;
            ++real_next;
        }
        for (std::size_t i = 0; i < s; ++i) {
            schedule_.push_back({true, synth_next});
            synth_next += bs;
            total_tokens_ += bs * static_cast<std::size_t>(synth.window_len());
        }
    }
    synth_used_ = synth_next;
}

std::vector<std::span<const corpus::Token>> MixedBatches::batch(std::size_t index) const {
    const Slot& slot = schedule_.at(index);
    std::vector<std::span<const corpus::Token>> out;
    if (!slot.synthetic) {
        for (std::size_t w : real_stream_.batch(slot.index)) out.push_back((*real_)[w]);
    } else {
        for (std::size_t j = 0; j < static_cast<std::size_t>(batch_size_); ++j)
            out.push_back((*synth_)[(slot.index + j) % synth_->size()]);
    }
    return out;
}

void DistillSpec::validate() const {
    require(teacher.k() >= 1, ErrorKind::MissingMember, "distillation needs a teacher");
    require(ratio.synth >= 1, ErrorKind::Precondition, "mixing ratio needs a positive synthetic count");
    require(ratio.real >= 0, ErrorKind::Precondition, "mixing ratio real count must be non-negative");
    require(ratio.real > 0 || periods > 0, ErrorKind::Precondition, "a synthetic-only schedule needs periods");
    require(synth_epoch_cap >= 1, ErrorKind::Precondition, "synth_epoch_cap must be >= 1");
    student_config.validate();
    student_hyper.validate();
}

ojson DistillSpec::to_json() const {
    return ojson{{"teacher_keys", teacher.member_keys},
                 {"synth_tokens", sampling.n_tokens},
                 {"temperature", sampling.temperature},
                 {"sample_seed", sampling.seed},
                 {"mode", to_string(sampling.mode)},
                 {"ratio", {ratio.real, ratio.synth}},
                 {"student_config", trainer::to_json(student_config)},
                 {"student_hyper", trainer::to_json(student_hyper)},
                 {"init_seed", init_seed},
                 {"data_seed", data_seed},
                 {"synth_epoch_cap", synth_epoch_cap},
                 {"periods", periods}};
}

DistillSpec DistillSpec::from_json(const ojson& j) {
    DistillSpec s;
    s.teacher.member_keys = j.at("teacher_keys").get<std::vector<std::string>>();
    s.sampling.n_tokens = j.at("synth_tokens").get<std::size_t>();
    s.sampling.temperature = j.value("temperature", 1.0);
    s.sampling.seed = j.value("sample_seed", std::uint64_t{0});
    s.sampling.mode = sampling_mode_from_string(j.value("mode", std::string("individual-members")));
    const auto r = j.at("ratio");
    s.ratio = {r.at(0).get<int>(), r.at(1).get<int>()};
    s.student_config = trainer::config_from_json(j.at("student_config"));
    s.teacher.member_config = s.student_config;
    s.student_hyper = trainer::hyper_from_json(j.at("student_hyper"));
    s.init_seed = j.value("init_seed", std::uint64_t{0});
    s.data_seed = j.value("data_seed", std::uint64_t{0});
    s.synth_epoch_cap = j.value("synth_epoch_cap", 3);
    s.periods = j.value("periods", std::size_t{0});
    return s;
}

std::size_t mixed_periods(const DistillSpec& spec, std::size_t real_windows) {
    if (spec.periods > 0) return spec.periods;
    require(spec.ratio.real > 0, ErrorKind::Precondition, "a synthetic-only schedule needs periods");
    const std::size_t bs = static_cast<std::size_t>(spec.student_hyper.batch_size);
    const std::size_t real_batches = ((real_windows + bs - 1) / bs) * static_cast<std::size_t>(spec.student_hyper.epochs);
    const std::size_t r = static_cast<std::size_t>(spec.ratio.real);
    return (real_batches + r - 1) / r;
}

DistillSpec no_mixing_control(const DistillSpec& mixed, std::size_t real_windows) {
    DistillSpec c = mixed;
    c.periods = mixed_periods(mixed, real_windows);
    c.ratio = {0, mixed.ratio.real + mixed.ratio.synth};
    return c;
}

namespace {

std::filesystem::path synth_cache_path(const DistillEnv& env, const DistillSpec& spec) {
    const ojson id{{"teacher_keys", spec.teacher.member_keys},
                   {"n_tokens", spec.sampling.n_tokens},
                   {"temperature", spec.sampling.temperature},
                   {"seed", spec.sampling.seed},
                   {"mode", to_string(spec.sampling.mode)}};
    return env.synth_dir / ("synth-" + short_digest(id.dump()) + ".pool");
}

SynthPool obtain_synth(const DistillSpec& spec, const DistillEnv& env, bool reuse_cached) {
    if (!reuse_cached) return generate_synthetic(spec.teacher, env.run, spec.sampling);
    if (!env.synth_dir.empty()) {
        const auto path = synth_cache_path(env, spec);
        if (std::filesystem::exists(path)) return read_synth_pool(path);
        SynthPool s = generate_synthetic(spec.teacher, env.run, spec.sampling);
        std::filesystem::create_directories(env.synth_dir);
        write_synth_pool(path, s);
        return s;
    }
    return generate_synthetic(spec.teacher, env.run, spec.sampling);
}

}  // namespace

trainer::RunRecord distill_train(const DistillSpec& spec, const DistillEnv& env, bool reuse_cached) {
    spec.validate();
    const auto& renv = env.run;
    require(renv.pool != nullptr && renv.validation != nullptr, ErrorKind::Precondition,
            "run environment lacks a pool or validation set");
    const SynthPool synth = obtain_synth(spec, env, reuse_cached);

    const corpus::WindowSet real = corpus::make_windows(*renv.pool, spec.student_config.context_len);
    require(!real.empty() || spec.ratio.real == 0, ErrorKind::EmptyPool, "real pool is smaller than one window");
    const std::size_t periods = spec.periods > 0 ? spec.periods : mixed_periods(spec, real.size());

    trainer::RunSpec rs;
    rs.pool = {env.pool_name, renv.pool->size_d(), renv.pool->pool_hash(), renv.validation->hash};
    rs.config = spec.student_config;
    rs.hyper = spec.student_hyper;
    rs.init_seed = spec.init_seed;
    rs.data_seed = spec.data_seed;
    rs.recipe_tag = "distill";
    rs.extra = spec.to_json();
    rs.extra["periods"] = periods;
    rs.extra["synth_pool_hash"] = synth.pool.pool_hash();
    const std::string key = rs.ledger_key();
    if (renv.ledger && reuse_cached) {
        if (auto hit = renv.ledger->find(key)) {
            auto rec = trainer::RunRecord::from_json(*hit);
            rec.cached = true;
            return rec;
        }
    }

    const corpus::WindowSet synth_windows = corpus::make_windows(synth.pool, spec.student_config.context_len);
    corpus::EpochStream stream(real.size(), corpus::Permutation::from_seed(real.size(), spec.data_seed),
                               spec.student_hyper.epochs, spec.student_hyper.batch_size,
                               rs.options.reshuffle_each_epoch);
    MixedBatches source(real, std::move(stream), synth_windows, spec.ratio, spec.student_hyper.batch_size,
                        spec.synth_epoch_cap, periods);
    const corpus::WindowSet train_eval = real.head(rs.options.train_eval_windows);
    model::Parameters<float> params;
    auto rec = trainer::run_training(rs, source, *renv.validation, train_eval, &params, renv.log);
    if (!reuse_cached) return rec;
    if (rec.ok() && !renv.checkpoint_dir.empty()) {
        std::filesystem::create_directories(renv.checkpoint_dir);
        model::save_checkpoint(trainer::checkpoint_path(renv, rec.ledger_key), params, rs.init_seed, rec.total_steps);
    }
    if (renv.ledger) renv.ledger->append(rec.to_json());
    return rec;
}

}  // namespace dclab::distill
