#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <optional>
#include <vector>

#include "hylm/hybrid_head.hpp"
#include "testutil.hpp"

using namespace hylm;
using T = Tensor<double>;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.blocks = 1;
    c.hidden = 16;
    c.attn_heads = 2;
    c.query_groups = 1;
    c.d_inner = 32;
    c.ssm_state = 4;
    c.conv_width = 4;
    c.window = 4;
    c.num_full_attn = 0;
    c.meta_tokens = 0;
    c.mlp_hidden = 32;
    return c;
}

std::vector<long> iota_positions(std::size_t n) {
    std::vector<long> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = static_cast<long>(i);
    }
    return p;
}

// alpha(i,j,c) for captured scan inputs; matches Eq-style data-controlled form.
double alpha_entry(const SsmCapture<double>& cap, std::size_t S, std::size_t C, std::size_t i,
                   std::size_t j, std::size_t c) {
    double out = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
        double prod = 1.0;
        for (std::size_t k = j + 1; k <= i; ++k) {
            prod *= std::exp(cap.a[c * S + s] * cap.dt[k * C + c]);
        }
        out += cap.c[i * S + s] * prod * cap.b[j * S + s] * cap.dt[j * C + c];
    }
    return out;
}

} // namespace

TEST_CASE("attn_forward with L=1 returns the value row") {
    auto cfg = tiny_cfg();
    RngStream rng(123);
    auto p = init_hybrid_head<double>(cfg, true, rng);
    T x = T::gaussian({1, 16}, rng, 1.0);
    auto spec = layer_attn_spec(cfg, 0);
    auto y = attn_forward(x, p, spec, cfg, {0}, {0});
    auto v = matmul(x, p.w_v);
    // softmax over one key is 1, so each head emits its group's value row
    const std::size_t H = cfg.attn_heads, dhv = cfg.v_head_dim();
    const std::size_t heads_per_group = H / cfg.query_groups;
    REQUIRE(y.size() == H * dhv);
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t g = h / heads_per_group;
        for (std::size_t e = 0; e < dhv; ++e) {
            CHECK(y.at(0, h * dhv + e) ==
                  doctest::Approx(v.at(0, g * dhv + e)).epsilon(1e-14));
        }
    }
}

TEST_CASE("materialized attention map times values equals attn_forward") {
    auto cfg = tiny_cfg();
    RngStream rng(7);
    for (int rep = 0; rep < 8; ++rep) {
        const std::size_t L = 2 + rng.below(30);
        auto p = init_hybrid_head<double>(cfg, true, rng);
        T x = T::gaussian({L, 16}, rng, 1.0);
        auto spec = layer_attn_spec(cfg, 0);
        auto pos = iota_positions(L);
        std::vector<std::uint8_t> meta(L, 0);
        AttnCapture<double> cap;
        auto y = attn_forward(x, p, spec, cfg, pos, meta, &cap);
        auto v = matmul(x, p.w_v);
        const std::size_t H = cfg.attn_heads, dhv = cfg.v_head_dim();
        const std::size_t heads_per_group = H / cfg.query_groups;
        std::vector<double> recon(L * H * dhv, 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t g = h / heads_per_group;
            for (std::size_t i = 0; i < L; ++i) {
                for (std::size_t j = 0; j < L; ++j) {
                    const double pij = cap.probs[h][i * L + j];
                    for (std::size_t e = 0; e < dhv; ++e) {
                        recon[i * H * dhv + h * dhv + e] +=
                            pij * v.at(j, g * dhv + e);
                    }
                }
            }
        }
        CHECK(testutil::max_rel_diff(y.value(), recon) <= 1e-10);
    }
}

TEST_CASE("attention map rows are stochastic and causal") {
    auto cfg = tiny_cfg();
    RngStream rng(42);
    const std::size_t L = 12;
    auto p = init_hybrid_head<double>(cfg, true, rng);
    T x = T::gaussian({L, 16}, rng, 1.0);
    auto spec = layer_attn_spec(cfg, 0); // sliding window, width 4
    auto pos = iota_positions(L);
    std::vector<std::uint8_t> meta(L, 0);
    AttnCapture<double> cap;
    attn_forward(x, p, spec, cfg, pos, meta, &cap);
    for (const auto& probs : cap.probs) {
        for (std::size_t i = 0; i < L; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < L; ++j) {
                if (j > i) {
                    CHECK(probs[i * L + j] == 0.0);
                }
                if (i >= spec.window && j + spec.window <= i) {
                    CHECK(probs[i * L + j] == 0.0); // outside the window
                }
                s += probs[i * L + j];
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("meta tokens stay visible through a sliding window") {
    // window=2, m=3 metas, n=4 reals: real query x_3 (abs pos 5) sees all
    // metas plus reals at distance < 2.
    AttnSpec spec;
    spec.kind = AttnKind::SlidingWindow;
    spec.window = 2;
    std::vector<long> pos{0, 1, 2, 3, 4, 5, 6};
    std::vector<std::uint8_t> meta{1, 1, 1, 0, 0, 0, 0};
    auto m = visibility_mask(pos, pos, meta, spec);
    // row of the real token at abs position 5 (x_3)
    CHECK(m.at(5, 0) == 1);
    CHECK(m.at(5, 1) == 1);
    CHECK(m.at(5, 2) == 1); // all meta visible
    CHECK(m.at(5, 3) == 0); // real, distance 2 = outside (i-window, i]
    CHECK(m.at(5, 4) == 1); // distance 1
    CHECK(m.at(5, 5) == 1); // self
    CHECK(m.at(5, 6) == 0); // future
}

TEST_CASE("causality: perturbing a future token leaves earlier outputs bitwise unchanged") {
    auto cfg = tiny_cfg();
    RngStream rng(77);
    const std::size_t L = 9;
    auto p = init_hybrid_head<double>(cfg, true, rng);
    T x1 = T::gaussian({L, 16}, rng, 1.0);
    T x2 = x1.detached();
    x2.value_mut()[(L - 1) * 16 + 3] += 5.0; // perturb the last token
    auto spec = layer_attn_spec(cfg, 0);
    auto pos = iota_positions(L);
    std::vector<std::uint8_t> meta(L, 0);
    for (bool use_ssm : {false, true}) {
        T y1, y2;
        if (use_ssm) {
            y1 = ssm_forward(x1, p, cfg);
            y2 = ssm_forward(x2, p, cfg);
        } else {
            y1 = attn_forward(x1, p, spec, cfg, pos, meta);
            y2 = attn_forward(x2, p, spec, cfg, pos, meta);
        }
        const std::size_t w = y1.cols();
        for (std::size_t i = 0; i + 1 < L; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                CHECK(y1.at(i, j) == y2.at(i, j)); // bitwise
            }
        }
    }
}

TEST_CASE("layer-level scan equals alpha-matrix product, conv on and off") {
    for (bool conv : {false, true}) {
        auto cfg = tiny_cfg();
        cfg.conv_enabled = conv;
        RngStream rng(conv ? 11 : 13);
        const std::size_t L = 20, C = cfg.d_inner, S = cfg.ssm_state;
        auto p = init_hybrid_head<double>(cfg, true, rng);
        T x = T::gaussian({L, 16}, rng, 1.0);
        SsmCapture<double> cap;
        ssm_forward(x, p, cfg, static_cast<SsmStreamState<double>*>(nullptr), &cap);
        // y_pre_gate[:,c] must equal the alpha matrix acting on the scan input column c
        double worst = 0;
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < L; ++i) {
                double acc = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    acc += alpha_entry(cap, S, C, i, j, c) * cap.scan_in[j * C + c];
                }
                const double got = cap.y_pre_gate[i * C + c];
                const double denom = std::max({std::abs(acc), std::abs(got), 1e-12});
                worst = std::max(worst, std::abs(acc - got) / denom);
            }
        }
        CHECK(worst <= 1e-8);
    }
}

TEST_CASE("ssm streaming with carried state and conv tail equals one-shot") {
    auto cfg = tiny_cfg();
    RngStream rng(21);
    const std::size_t L = 14;
    auto p = init_hybrid_head<double>(cfg, true, rng);
    T x = T::gaussian({L, 16}, rng, 1.0);
    auto whole = ssm_forward(x, p, cfg);

    SsmStreamState<double> st;
    auto a = slice_rows(x, 0, 5).detached();
    auto b = slice_rows(x, 5, 9).detached();
    auto c = slice_rows(x, 9, L).detached();
    auto ya = ssm_forward(a, p, cfg, &st);
    auto yb = ssm_forward(b, p, cfg, &st);
    auto yc = ssm_forward(c, p, cfg, &st);
    std::vector<double> chunked;
    for (const auto* t : {&ya, &yb, &yc}) {
        chunked.insert(chunked.end(), t->value().begin(), t->value().end());
    }
    CHECK(testutil::max_abs_diff(whole.value(), chunked) <= 1e-10);
}

TEST_CASE("fuse: zeroing one branch reduces exactly to the other") {
    auto cfg = tiny_cfg();
    RngStream rng(31);
    auto p = init_hybrid_head<double>(cfg, true, rng);
    const std::size_t L = 6;
    T y_attn = T::gaussian({L, static_cast<std::size_t>(cfg.d_inner)}, rng, 1.0);
    T y_ssm = T::gaussian({L, static_cast<std::size_t>(cfg.d_inner)}, rng, 2.0);

    auto p_no_ssm = zero_branch(p, Branch::Ssm);
    auto fused = fuse<double>(y_attn, y_ssm, p_no_ssm, 1e-6);
    // pure attention route through norm, beta, mean, out-projection
    auto pure = matmul(
        scale(mul_rowvec(rmsnorm_rows(y_attn, p.norm_attn_gain, 1e-6), p.beta_attn), 0.5),
        p.w_out);
    for (std::size_t i = 0; i < fused.size(); ++i) {
        CHECK(fused.value()[i] == pure.value()[i]); // exact
    }

    auto p_no_attn = zero_branch(p, Branch::Attn);
    auto fused2 = fuse<double>(y_attn, y_ssm, p_no_attn, 1e-6);
    auto pure2 = matmul(
        scale(mul_rowvec(rmsnorm_rows(y_ssm, p.norm_ssm_gain, 1e-6), p.beta_ssm), 0.5),
        p.w_out);
    for (std::size_t i = 0; i < fused2.size(); ++i) {
        CHECK(fused2.value()[i] == pure2.value()[i]);
    }

    // both branches zeroed -> exact zero output
    auto p_none = zero_branch(p_no_attn, Branch::Ssm);
    auto fused3 = fuse<double>(y_attn, y_ssm, p_none, 1e-6);
    for (double v : fused3.value()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("fusion is invariant to positive rescaling of a branch input") {
    auto cfg = tiny_cfg();
    RngStream rng(37);
    auto p = init_hybrid_head<double>(cfg, true, rng);
    T y_attn = T::gaussian({4, static_cast<std::size_t>(cfg.d_inner)}, rng, 1.0);
    T y_ssm = T::gaussian({4, static_cast<std::size_t>(cfg.d_inner)}, rng, 1.0);
    auto base = fuse<double>(y_attn, y_ssm, p, 1e-6);
    for (double c : {0.5, 2.0, 10.0}) {
        auto scaled = fuse<double>(scale(y_attn, c), std::optional<T>(y_ssm), p, 1e-6);
        CHECK(testutil::max_abs_diff(base.value(), scaled.value()) <= 1e-5);
    }
}

TEST_CASE("branch magnitude observability") {
    auto cfg = tiny_cfg();
    RngStream rng(41);
    auto p = init_hybrid_head<double>(cfg, true, rng);
    T x = T::gaussian({8, 16}, rng, 1.0);
    auto out = hybrid_head_forward(x, p, layer_attn_spec(cfg, 0), cfg, iota_positions(8),
                                   std::vector<std::uint8_t>(8, 0));
    CHECK(out.stats.rms_attn > 0.0);
    CHECK(out.stats.rms_ssm > 0.0);
    CHECK(std::isfinite(out.stats.rms_attn));
    CHECK(std::isfinite(out.stats.rms_ssm));
}

TEST_CASE("every parameter receives gradient from a generic loss") {
    auto cfg = tiny_cfg();
    RngStream rng(43);
    auto p = init_hybrid_head<double>(cfg, true, rng);
    T x = T::gaussian({7, 16}, rng, 1.0, true);
    auto out = hybrid_head_forward(x, p, layer_attn_spec(cfg, 0), cfg, iota_positions(7),
                                   std::vector<std::uint8_t>(7, 0));
    backward(sum(mul(out.fused, out.fused)));
    auto grad_norm = [](const T& t) {
        double s = 0;
        for (double g : t.grad()) {
            s += g * g;
        }
        return std::sqrt(s);
    };
    for (const T* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_ssm, &p.w_gate, &p.conv_w, &p.conv_b,
                       &p.a_log, &p.w_b, &p.w_c, &p.w_dt, &p.norm_attn_gain, &p.norm_ssm_gain,
                       &p.beta_attn, &p.beta_ssm, &p.w_out}) {
        CHECK(grad_norm(*t) > 0.0);
    }
}

TEST_CASE("hybrid head gradients match finite differences") {
    auto cfg = tiny_cfg();
    cfg.hidden = 8;
    cfg.attn_heads = 2;
    cfg.query_groups = 2;
    cfg.d_inner = 8;
    cfg.ssm_state = 2;
    RngStream rng(47);
    auto p = init_hybrid_head<double>(cfg, true, rng);
    T x = T::gaussian({5, 8}, rng, 1.0, true);
    auto spec = layer_attn_spec(cfg, 0);
    auto f = [&] {
        auto out = hybrid_head_forward(x, p, spec, cfg, iota_positions(5),
                                       std::vector<std::uint8_t>(5, 0));
        return sum(mul(out.fused, out.fused));
    };
    std::vector<T> params{x,       p.w_q,  p.w_k,          p.w_v,         p.w_ssm,
                          p.w_gate, p.conv_w, p.conv_b,     p.a_log,       p.w_b,
                          p.w_c,   p.w_dt, p.norm_attn_gain, p.norm_ssm_gain, p.beta_attn,
                          p.beta_ssm, p.w_out};
    auto res = testutil::grad_check(params, f);
    CHECK(res.max_rel_err <= 1e-4);
}
