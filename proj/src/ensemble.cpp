// SPDX-License-Identifier: Apache-2.0
#include "dclab/ensemble.hpp"

#include "dclab/common.hpp"
#include "dclab/digest.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace dclab::ensemble {

std::string EnsembleSpec::ledger_key(const std::string& validation_hash) const {
    std::vector<std::string> keys = member_keys;
    std::sort(keys.begin(), keys.end());
    const ojson j{{"kind", "ensemble"}, {"members", keys}, {"validation_hash", validation_hash}};
    return short_digest(j.dump());
}

ojson EnsembleSpec::to_json() const {
    return ojson{{"member_keys", member_keys},
                 {"K", k()},
                 {"member_config", trainer::to_json(member_config)},
                 {"total_params", total_params()}};
}

EnsembleSpec EnsembleSpec::from_json(const ojson& j) {
    EnsembleSpec s;
    s.member_keys = j.at("member_keys").get<std::vector<std::string>>();
    if (j.contains("member_config")) s.member_config = trainer::config_from_json(j.at("member_config"));
    return s;
}

std::vector<double> logit_avg_probs(std::span<const std::vector<double>> rows) {
    require(!rows.empty(), ErrorKind::Precondition, "no member rows");
    const std::size_t v = rows.front().size();
    std::vector<double> mean(v, 0.0);
    for (const auto& r : rows) {
        require(r.size() == v, ErrorKind::ShapeMismatch, "member rows differ in width");
        for (std::size_t i = 0; i < v; ++i) mean[i] += r[i];
    }
    const double k = static_cast<double>(rows.size());
    for (auto& m : mean) m /= k;
    const double mx = *std::max_element(mean.begin(), mean.end());
    double z = 0.0;
    for (auto& m : mean) z += (m = std::exp(m - mx));
    for (auto& m : mean) m /= z;
    return mean;
}

model::Parameters<float> load_member(const std::string& key, const trainer::RunEnv& env) {
    if (env.ledger) {
        const auto rec = env.ledger->find(key);
        if (!rec) fail(ErrorKind::MissingMember, "member " + key + " is not in the ledger");
        if (rec->value("status", "") != "ok") fail(ErrorKind::MissingMember, "member " + key + " is a failed run");
    }
    require(!env.checkpoint_dir.empty(), ErrorKind::MissingMember,
            "member " + key + ": no checkpoint directory configured");
    const auto path = trainer::checkpoint_path(env, key);
    if (!std::filesystem::exists(path)) fail(ErrorKind::MissingMember, "member " + key + ": no checkpoint at " + path.string());
    return model::load_checkpoint(path).params;
}

namespace {

trainer::RunRecord member_record(const std::string& key, const trainer::RunEnv& env) {
    require(env.ledger != nullptr, ErrorKind::Precondition, "ensemble evaluation needs a ledger");
    const auto rec = env.ledger->find(key);
    if (!rec) fail(ErrorKind::MissingMember, "member " + key + " is not in the ledger");
    if (rec->value("kind", "") != "run") fail(ErrorKind::MissingMember, "member " + key + " is not a training run");
    return trainer::RunRecord::from_json(*rec);
}

}  // namespace

EnsembleResult ensemble_eval(const EnsembleSpec& spec_in, const trainer::RunEnv& env, bool reuse_cached) {
    require(spec_in.k() >= 1, ErrorKind::Precondition, "ensemble needs at least one member");
    require(env.validation != nullptr, ErrorKind::Precondition, "no validation set in the environment");
    EnsembleSpec spec = spec_in;
    std::sort(spec.member_keys.begin(), spec.member_keys.end());
    require(std::adjacent_find(spec.member_keys.begin(), spec.member_keys.end()) == spec.member_keys.end(),
            ErrorKind::Precondition, "duplicate member key");

    EnsembleResult res;
    res.spec = spec;
    res.ledger_key = spec.ledger_key(env.validation->hash);

    std::vector<trainer::RunRecord> recs;
    for (const auto& key : spec.member_keys) recs.push_back(member_record(key, env));
    for (const auto& r : recs) {
        if (!r.ok()) fail(ErrorKind::MissingMember, "member " + r.ledger_key + " is a failed run");
        require(r.spec.config == recs.front().spec.config, ErrorKind::ShapeMismatch,
                "member " + r.ledger_key + " has a different model config");
        require(r.spec.hyper == recs.front().spec.hyper, ErrorKind::Precondition,
                "member " + r.ledger_key + " has different hyperparameters");
        require(r.spec.pool.pool_hash == recs.front().spec.pool.pool_hash, ErrorKind::Precondition,
                "member " + r.ledger_key + " was trained on a different pool");
        require(r.spec.pool.validation_hash == env.validation->hash, ErrorKind::Precondition,
                "member " + r.ledger_key + " was scored on a different validation set");
    }
    res.spec.member_config = recs.front().spec.config;
    res.member_hyper = recs.front().spec.hyper;
    res.d = recs.front().spec.pool.size_d;
    double sum = 0.0;
    for (const auto& r : recs) {
        res.member_losses.push_back(r.final_val_loss);
        sum += r.final_val_loss;
    }
    res.mean_member_loss = sum / static_cast<double>(recs.size());

    if (spec.k() > 1 && env.ledger && reuse_cached) {
        if (auto hit = env.ledger->find(res.ledger_key)) {
            EnsembleResult cached = EnsembleResult::from_json(*hit);
            cached.cached = true;
            return cached;
        }
    }

    std::vector<model::Parameters<float>> params;
    params.reserve(spec.k());
    for (const auto& key : spec.member_keys) params.push_back(load_member(key, env));
    std::vector<const model::Parameters<float>*> ptrs;
    for (const auto& p : params) ptrs.push_back(&p);
    res.loss = trainer::eval_loss_members(ptrs, env.validation->windows);

    if (spec.k() > 1 && env.ledger && reuse_cached) env.ledger->append(res.to_json());
    return res;
}

ojson EnsembleResult::to_json() const {
    return ojson{{"ledger_key", ledger_key},
                 {"kind", "ensemble"},
                 {"status", "ok"},
                 {"D", d},
                 {"N", spec.member_config.param_count()},
                 {"K", spec.k()},
                 {"lr", member_hyper.peak_lr},
                 {"epochs", member_hyper.epochs},
                 {"wd", member_hyper.weight_decay},
                 {"batch", member_hyper.batch_size},
                 {"recipe_tag", recipe_tag},
                 {"final_val_loss", loss},
                 {"mean_member_loss", mean_member_loss},
                 {"member_losses", member_losses},
                 {"spec", spec.to_json()}};
}

EnsembleResult EnsembleResult::from_json(const ojson& j) {
    EnsembleResult r;
    r.ledger_key = j.at("ledger_key").get<std::string>();
    r.spec = EnsembleSpec::from_json(j.at("spec"));
    r.d = j.at("D").get<std::size_t>();
    r.member_hyper = {j.at("lr").get<double>(), j.at("epochs").get<int>(), j.at("wd").get<double>(),
                      j.at("batch").get<int>()};
    r.recipe_tag = j.at("recipe_tag").get<std::string>();
    r.loss = j.at("final_val_loss").get<double>();
    r.mean_member_loss = j.at("mean_member_loss").get<double>();
    r.member_losses = j.at("member_losses").get<std::vector<double>>();
    return r;
}

std::vector<trainer::RunRecord> train_members(const trainer::RunSpec& base, int k, trainer::SeedMode mode,
                                              const trainer::RunEnv& env) {
    require(k >= 1, ErrorKind::Precondition, "need at least one member");
    std::vector<trainer::RunRecord> out;
    for (int i = 0; i < k; ++i) {
        trainer::RunSpec s = base;
        const auto off = static_cast<std::uint64_t>(i);
        if (mode != trainer::SeedMode::DataOnly) s.init_seed = base.init_seed + off;
        if (mode != trainer::SeedMode::InitOnly) s.data_seed = base.data_seed + off;
        out.push_back(trainer::train(s, env));
    }
    return out;
}

EnsembleSpec spec_for(std::span<const trainer::RunRecord> members) {
    require(!members.empty(), ErrorKind::Precondition, "no members");
    EnsembleSpec s;
    s.member_config = members.front().spec.config;
    for (const auto& m : members) s.member_keys.push_back(m.ledger_key);
    return s;
}

BatchComparison compare_batches(std::span<const model::Parameters<float>* const> members,
                                const corpus::WindowSet& windows, std::size_t batch_windows) {
    require(batch_windows > 0, ErrorKind::Precondition, "batch size must be positive");
    const auto ens = trainer::position_nlls(members, windows);
    std::vector<std::vector<double>> each;
    for (const auto* m : members) {
        const model::Parameters<float>* one[] = {m};
        each.push_back(trainer::position_nlls(one, windows));
    }
    const std::size_t per = ens.size() / windows.size();
    const std::size_t stride = per * batch_windows;
    BatchComparison out;
    for (std::size_t b = 0; b < ens.size(); b += stride) {
        const std::size_t e = std::min(ens.size(), b + stride);
        double se = 0.0, sm = 0.0;
        for (std::size_t i = b; i < e; ++i) se += ens[i];
        for (const auto& v : each)
            for (std::size_t i = b; i < e; ++i) sm += v[i];
        const double n = static_cast<double>(e - b);
        out.ensemble_nll.push_back(se / n);
        out.mean_member_nll.push_back(sm / (n * static_cast<double>(each.size())));
    }
    return out;
}

model::Parameters<float> soup(std::span<const model::Parameters<float>* const> members) {
    require(!members.empty(), ErrorKind::Precondition, "soup needs at least one member");
    const auto& first = *members.front();
    for (const auto* m : members)
        require(m->config() == first.config() && m->size() == first.size(), ErrorKind::ShapeMismatch,
                "soup members have different shapes");
    model::Parameters<float> out = first.zeros_like();
    std::vector<double> acc(first.size(), 0.0);
    for (const auto* m : members) {
        const auto v = m->values();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
    }
    const double k = static_cast<double>(members.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out.values()[i] = static_cast<float>(acc[i] / k);
    return out;
}

HeuristicHyper heuristic_ensemble_hyper(const trainer::Hyper& certified, const search::GridAxes& axes) {
    axes.validate();
    HeuristicHyper out;
    out.hyper = certified;
    const int doubled = certified.epochs * 2;
    out.hyper.epochs = std::min(doubled, axes.epochs.back());
    out.clamped = doubled > axes.epochs.back();
    const double half = certified.weight_decay * 0.5;
    double best = axes.wd.front();
    for (double w : axes.wd)
        if (std::abs(w - half) < std::abs(best - half) - 1e-15) best = w;
    out.hyper.weight_decay = best;
    return out;
}

}  // namespace dclab::ensemble
