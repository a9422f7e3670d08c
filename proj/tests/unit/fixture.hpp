// SPDX-License-Identifier: Apache-2.0
//
// A tiny in-memory workspace for tests that need real training runs.

#pragma once

#include "dclab/corpus.hpp"
#include "dclab/ledger.hpp"
#include "dclab/trainer.hpp"

#include <memory>

namespace fixture {

struct Tiny {
    dclab::corpus::Tokenizer tok;
    dclab::corpus::HeldOutSplit split;
    std::unique_ptr<dclab::corpus::TokenPool> pool;
    dclab::Ledger ledger;
    dclab::trainer::RunEnv env;
    dclab::trainer::RunSpec spec;

    explicit Tiny(std::size_t d = 2048, int context = 16) {
        const std::string text = dclab::corpus::synthetic_text(11, d + 64 * context + 512);
        const auto all = tok.encode(text);
        split = dclab::corpus::split_holdout(all, 8, context);
        pool = std::make_unique<dclab::corpus::TokenPool>(
            dclab::corpus::build_pool(std::span<const dclab::corpus::Token>(split.train_source), d, tok.vocab_size));
        env.pool = pool.get();
        env.validation = &split.validation;
        env.ledger = &ledger;

        spec.pool = {"tiny", pool->size_d(), pool->pool_hash(), split.validation.hash};
        spec.config.n_layers = 1;
        spec.config.d_model = 16;
        spec.config.n_heads = 2;
        spec.config.n_kv_heads = 1;
        spec.config.d_ff = 32;
        spec.config.context_len = context;
        spec.hyper = {3e-3, 1, 0.1, 8};
        spec.init_seed = 1;
        spec.data_seed = 1;
    }
};

}  // namespace fixture
