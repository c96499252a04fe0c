#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "hylm/meta_tokens.hpp"
#include "testutil.hpp"

using namespace hylm;

namespace {

ModelConfig meta_cfg(int m) {
    ModelConfig c = preset_config("toy");
    c.blocks = 3;
    c.hidden = 24;
    c.attn_heads = 2;
    c.query_groups = 2;
    c.d_inner = 48;
    c.ssm_state = 4;
    c.window = 3;
    c.num_full_attn = 1;
    c.meta_tokens = m;
    c.mlp_hidden = 32;
    c.vocab = 41;
    return c;
}

std::vector<int> some_tokens(std::size_t n, int vocab, std::uint64_t seed) {
    RngStream rng(seed);
    std::vector<int> t(n);
    for (auto& x : t) {
        x = static_cast<int>(rng.below(vocab));
    }
    return t;
}

} // namespace

TEST_CASE("prepend bookkeeping") {
    std::vector<int> x{10, 11, 12, 13};
    auto a0 = prepend(x, 0);
    CHECK(a0.length() == 4);
    CHECK(a0.tokens == x);

    auto a = prepend(x, 128);
    CHECK(a.length() == 132);
    auto mask = a.loss_mask();
    REQUIRE(mask.size() == 132);
    for (std::size_t i = 0; i < 128; ++i) {
        CHECK(mask[i] == 0.0);
        CHECK(a.is_meta(i));
    }
    CHECK(mask[128] == 1.0);
    CHECK(mask[131] == 0.0); // final position has no target
    CHECK(!a.is_meta(128));
}

TEST_CASE("offline equivalence: seeded inference equals prepended inference") {
    auto cfg = meta_cfg(5);
    auto model = build_model<double>(cfg, 101);
    auto init = precompute_init(model);
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        auto toks = some_tokens(4 + seed * 3, cfg.vocab, 1000 + seed);
        auto prepended = forward(model, toks); // meta handled internally
        auto cache = seeded_cache(init, model);
        auto seeded = forward(model, toks, &cache);
        CHECK(testutil::max_abs_diff(prepended.value(), seeded.value()) <= 1e-10);
    }
}

TEST_CASE("m=0: empty init leaves forward bitwise unchanged") {
    auto cfg = meta_cfg(0);
    auto model = build_model<double>(cfg, 103);
    auto init = precompute_init(model);
    auto toks = some_tokens(7, cfg.vocab, 42);
    auto plain = forward(model, toks);
    auto cache = seeded_cache(init, model);
    auto seeded = forward(model, toks, &cache);
    REQUIRE(plain.size() == seeded.size());
    for (std::size_t i = 0; i < plain.size(); ++i) {
        CHECK(plain.value()[i] == seeded.value()[i]);
    }
}

TEST_CASE("stale fingerprint is rejected") {
    auto cfg = meta_cfg(4);
    auto model = build_model<double>(cfg, 107);
    auto init = precompute_init(model);
    model.meta_r.value_mut()[0] += 1.0; // parameter update invalidates the init
    CHECK_THROWS_AS(seeded_cache(init, model), CacheError);
    // and a cache already seeded from the old init is rejected by forward
    auto model2 = build_model<double>(cfg, 107);
    auto cache = seeded_cache(init, model2);
    model2.embedding.value_mut()[0] += 1.0;
    std::vector<int> tok{1};
    CHECK_THROWS_AS(forward(model2, tok, &cache), CacheError);
}

TEST_CASE("meta embeddings receive gradients, meta positions carry no labels") {
    auto cfg = meta_cfg(3);
    auto model = build_model<double>(cfg, 109);
    auto toks = some_tokens(8, cfg.vocab, 7);
    model.zero_grads();
    auto loss = lm_loss(model, toks);
    backward(loss);
    double r_grad = 0;
    for (double g : model.meta_r.grad()) {
        r_grad += g * g;
    }
    CHECK(r_grad > 0.0);
    // logits cover only real positions: loss rows == token count
    auto logits = forward(model, toks);
    CHECK(logits.rows() == toks.size());
}

TEST_CASE("precomputed init stores per-layer kv and ssm state for meta positions") {
    auto cfg = meta_cfg(5);
    auto model = build_model<double>(cfg, 113);
    auto init = precompute_init(model);
    CHECK(init.cache.meta_consumed);
    CHECK(init.cache.next_position == 5);
    for (const auto& g : init.cache.groups) {
        CHECK(g.row_count() == 5);
        for (auto f : g.meta) {
            CHECK(f == 1);
        }
    }
    for (const auto& s : init.cache.ssm) {
        CHECK(!s.h.empty());
    }
}
