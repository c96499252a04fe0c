#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "hylm/config.hpp"
#include "hylm/tensor.hpp"

namespace hylm {

enum class Branch { Attn, Ssm };

// All learnable symbols of one fused layer. Key/value projections are absent
// (undefined tensors) on layers that follow a shared KV group; such layers
// read the owner's K/V instead of projecting their own.
template <class Real>
struct HybridHeadParams {
    // attention: queries for every head, keys/values per query group
    Tensor<Real> w_q; // [d, H*dh]
    Tensor<Real> w_k; // [d, G*dh]   (owner only)
    Tensor<Real> w_v; // [d, G*dhv]  (owner only)

    // ssm branch
    Tensor<Real> w_ssm;   // [d, C]
    Tensor<Real> w_gate;  // [d, C]
    Tensor<Real> conv_w;  // [C, K]
    Tensor<Real> conv_b;  // [C]
    Tensor<Real> a_log;   // [C, S]; A = -exp(a_log), so exp(A*dt) decays in (0,1)
    Tensor<Real> w_b;     // [C, S]
    Tensor<Real> w_c;     // [C, S]
    Tensor<Real> w_dt;    // [C, C]

    // fusion
    Tensor<Real> norm_attn_gain; // [C]
    Tensor<Real> norm_ssm_gain;  // [C]
    Tensor<Real> beta_attn;      // [C]
    Tensor<Real> beta_ssm;       // [C]
    Tensor<Real> w_out;          // [C, d]

    bool owns_kv() const { return w_k.defined(); }
};

template <class Real>
HybridHeadParams<Real> init_hybrid_head(const ModelConfig& cfg, bool owns_kv, RngStream& rng) {
    const std::size_t d = cfg.hidden, C = cfg.d_inner;
    const std::size_t dh = cfg.head_dim(), dhv = cfg.v_head_dim();
    const Real std02 = Real(0.02);
    HybridHeadParams<Real> p;
    p.w_q = Tensor<Real>::gaussian({d, cfg.attn_heads * dh}, rng, std02, true);
    if (owns_kv) {
        p.w_k = Tensor<Real>::gaussian({d, cfg.query_groups * dh}, rng, std02, true);
        p.w_v = Tensor<Real>::gaussian({d, cfg.query_groups * dhv}, rng, std02, true);
    }
    if (cfg.ssm_enabled) {
        const std::size_t S = cfg.ssm_state;
        p.w_ssm = Tensor<Real>::gaussian({d, C}, rng, std02, true);
        p.w_gate = Tensor<Real>::gaussian({d, C}, rng, std02, true);
        if (cfg.conv_enabled) {
            p.conv_w = Tensor<Real>::gaussian({C, static_cast<std::size_t>(cfg.conv_width)},
                                              rng, std02, true);
            p.conv_b = Tensor<Real>::zeros({C}, true);
        }
        // A init: state s decays at rate -(s+1), the usual S4/Mamba ladder.
        p.a_log = Tensor<Real>::zeros({C, S}, true);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t s = 0; s < S; ++s) {
                p.a_log.value_mut()[c * S + s] = std::log(Real(s + 1));
            }
        }
        p.w_b = Tensor<Real>::gaussian({C, S}, rng, std02, true);
        p.w_c = Tensor<Real>::gaussian({C, S}, rng, std02, true);
        p.w_dt = Tensor<Real>::gaussian({C, C}, rng, std02, true);
        p.norm_ssm_gain = Tensor<Real>::filled({C}, Real(1), true);
        p.beta_ssm = Tensor<Real>::filled({C}, Real(1), true);
    }
    p.norm_attn_gain = Tensor<Real>::filled({C}, Real(1), true);
    p.beta_attn = Tensor<Real>::filled({C}, Real(1), true);
    p.w_out = Tensor<Real>::gaussian({C, d}, rng, std02, true);
    return p;
}

// View with the selected branch's rescale vector zeroed; everything else is
// shared with the original parameters.
template <class Real>
HybridHeadParams<Real> zero_branch(const HybridHeadParams<Real>& p, Branch branch) {
    HybridHeadParams<Real> q = p;
    if (branch == Branch::Attn) {
        q.beta_attn = Tensor<Real>::zeros(p.beta_attn.shape());
    } else if (q.beta_ssm.defined()) {
        q.beta_ssm = Tensor<Real>::zeros(p.beta_ssm.shape());
    }
    return q;
}

// ---------------------------------------------------------------------------
// Attention branch
// ---------------------------------------------------------------------------

// Keys/values a set of queries attends over, with position bookkeeping.
template <class Real>
struct KvBlock {
    Tensor<Real> k; // [T, G*dh], rotary already applied
    Tensor<Real> v; // [T, G*dhv]
    std::vector<long> positions;     // absolute position per row
    std::vector<std::uint8_t> meta;  // 1 = meta token (never masked by the window)
};

// Causal visibility: key j is visible to query i when key_pos <= query_pos and
// (the key is a meta token, or the layer is global, or the key lies inside the
// sliding window (query_pos - key_pos < window)).
inline BoolMat visibility_mask(const std::vector<long>& q_pos,
                               const std::vector<long>& k_pos,
                               const std::vector<std::uint8_t>& k_meta, const AttnSpec& spec) {
    BoolMat m(q_pos.size(), k_pos.size(), false);
    for (std::size_t i = 0; i < q_pos.size(); ++i) {
        for (std::size_t j = 0; j < k_pos.size(); ++j) {
            if (k_pos[j] > q_pos[i]) {
                continue;
            }
            if (k_meta[j] || spec.kind == AttnKind::Global ||
                q_pos[i] - k_pos[j] < spec.window) {
                m.at(i, j) = 1;
            }
        }
    }
    return m;
}

// Optional per-head capture of the row-stochastic score matrices actually
// used, for the analysis module.
template <class Real>
struct AttnCapture {
    std::vector<std::vector<Real>> probs; // per head, Lq x T row-major
    std::size_t key_count = 0;
};

// Scaled dot-product attention over the given keys/values, grouped-query
// style (head h reads group h / (H/G)). Returns [Lq, H*dhv].
template <class Real>
Tensor<Real> attn_attend(const Tensor<Real>& q_roped, const KvBlock<Real>& kv,
                         const std::vector<long>& q_pos, const AttnSpec& spec,
                         const ModelConfig& cfg, AttnCapture<Real>* capture = nullptr) {
    const std::size_t H = cfg.attn_heads, G = cfg.query_groups;
    const std::size_t dh = cfg.head_dim(), dhv = cfg.v_head_dim();
    const std::size_t heads_per_group = H / G;
    const BoolMat mask = visibility_mask(q_pos, kv.positions, kv.meta, spec);
    const Real inv_sqrt = Real(1) / std::sqrt(Real(dh));
    std::vector<Tensor<Real>> head_outs;
    head_outs.reserve(H);
    if (capture) {
        capture->probs.clear();
        capture->key_count = kv.positions.size();
    }
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t g = h / heads_per_group;
        auto qh = slice_cols(q_roped, h * dh, (h + 1) * dh);
        auto kg = slice_cols(kv.k, g * dh, (g + 1) * dh);
        auto vg = slice_cols(kv.v, g * dhv, (g + 1) * dhv);
        auto scores = scale(matmul(qh, transpose(kg)), inv_sqrt);
        auto probs = softmax_rows(scores, &mask);
        if (capture) {
            capture->probs.emplace_back(probs.value().begin(), probs.value().end());
        }
        head_outs.push_back(matmul(probs, vg));
    }
    return concat_cols(head_outs);
}

// Projects this layer's keys/values from its (normed) input and applies
// rotary embedding to the keys.
template <class Real>
KvBlock<Real> project_kv(const Tensor<Real>& x_norm, const HybridHeadParams<Real>& p,
                         const ModelConfig& cfg, const std::vector<long>& positions,
                         const std::vector<std::uint8_t>& meta) {
    KvBlock<Real> kv;
    kv.k = matmul(x_norm, p.w_k);
    if (cfg.rope) {
        kv.k = rope_rows(kv.k, positions, cfg.head_dim(), cfg.rope_base);
    }
    kv.v = matmul(x_norm, p.w_v);
    kv.positions = positions;
    kv.meta = meta;
    return kv;
}

// Self-contained attention branch: project Q (and K/V here) and attend.
// The model-level forward goes through project_kv/attn_attend directly so
// that shared KV groups reuse one projection.
template <class Real>
Tensor<Real> attn_forward(const Tensor<Real>& x_norm, const HybridHeadParams<Real>& p,
                          const AttnSpec& spec, const ModelConfig& cfg,
                          const std::vector<long>& positions,
                          const std::vector<std::uint8_t>& meta,
                          AttnCapture<Real>* capture = nullptr) {
    auto q = matmul(x_norm, p.w_q);
    if (cfg.rope) {
        q = rope_rows(q, positions, cfg.head_dim(), cfg.rope_base);
    }
    const auto kv = project_kv(x_norm, p, cfg, positions, meta);
    return attn_attend(q, kv, positions, spec, cfg, capture);
}

// ---------------------------------------------------------------------------
// SSM branch
// ---------------------------------------------------------------------------

// Streaming state carried between chunks.
template <class Real>
struct SsmStreamState {
    std::vector<Real> h;         // [C * S]
    std::vector<Real> conv_tail; // [(K-1) * C], most recent rows last
};

template <class Real>
struct SsmCapture {
    std::vector<Real> scan_in; // conv output (or raw x_ssm), [L, C]
    std::vector<Real> dt;      // [L, C]
    std::vector<Real> b;       // [L, S]
    std::vector<Real> c;       // [L, S]
    std::vector<Real> a;       // [C, S]
    std::vector<Real> y_pre_gate; // [L, C]
};

// Selective-scan branch: x_ssm = x W_ssm, short causal conv (toggleable),
// data-dependent B/C/dt, recurrent scan, then the linear output gate G = x W_g.
template <class Real>
Tensor<Real> ssm_forward(const Tensor<Real>& x_norm, const HybridHeadParams<Real>& p,
                         const ModelConfig& cfg, SsmStreamState<Real>* state = nullptr,
                         SsmCapture<Real>* capture = nullptr) {
    const std::size_t C = cfg.d_inner;
    const std::size_t K = cfg.conv_width;
    auto x_ssm = matmul(x_norm, p.w_ssm);
    Tensor<Real> scan_in = x_ssm;
    if (cfg.conv_enabled) {
        const std::vector<Real>* tail = nullptr;
        if (state) {
            if (state->conv_tail.empty()) {
                state->conv_tail.assign((K - 1) * C, Real(0));
            }
            tail = &state->conv_tail;
        }
        scan_in = silu(causal_conv1d(x_ssm, p.conv_w, p.conv_b, tail));
        if (state) {
            // carry the last K-1 raw input rows for the next chunk
            const std::size_t L = x_ssm.rows();
            std::vector<Real> next((K - 1) * C, Real(0));
            for (std::size_t r = 0; r < K - 1; ++r) {
                const long src = static_cast<long>(L) - static_cast<long>(K - 1 - r);
                for (std::size_t c2 = 0; c2 < C; ++c2) {
                    next[r * C + c2] = src >= 0
                        ? x_ssm.value()[static_cast<std::size_t>(src) * C + c2]
                        : state->conv_tail[(static_cast<std::size_t>(src + static_cast<long>(K) - 1)) * C + c2];
                }
            }
            state->conv_tail = std::move(next);
        }
    }
    auto dt = softplus(matmul(scan_in, p.w_dt));
    auto b = matmul(scan_in, p.w_b);
    auto c = matmul(scan_in, p.w_c);
    auto a = neg(exp(p.a_log));
    const std::vector<Real>* h_in = nullptr;
    if (state) {
        if (state->h.empty()) {
            state->h.assign(C * cfg.ssm_state, Real(0));
        }
        h_in = &state->h;
    }
    std::vector<Real> h_final;
    auto y = ssm_scan(scan_in, dt, b, c, a, h_in, state ? &h_final : nullptr);
    if (state) {
        state->h = std::move(h_final);
    }
    if (capture) {
        capture->scan_in.assign(scan_in.value().begin(), scan_in.value().end());
        capture->dt.assign(dt.value().begin(), dt.value().end());
        capture->b.assign(b.value().begin(), b.value().end());
        capture->c.assign(c.value().begin(), c.value().end());
        capture->a.assign(a.value().begin(), a.value().end());
        capture->y_pre_gate.assign(y.value().begin(), y.value().end());
    }
    auto gate = matmul(x_norm, p.w_gate);
    return mul(gate, y);
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

template <class Real>
Real rms_of(std::span<const Real> v) {
    Real s = 0;
    for (Real x : v) {
        s += x * x;
    }
    return std::sqrt(s / Real(v.size() ? v.size() : 1));
}

// Normalize each branch, rescale per channel, average, project out.
// With only the attention branch present (attention-only stacks) the mean is
// over that single branch.
template <class Real>
Tensor<Real> fuse(const Tensor<Real>& y_attn, const std::optional<Tensor<Real>>& y_ssm,
                  const HybridHeadParams<Real>& p, Real eps) {
    if (y_ssm && y_ssm->cols() != y_attn.cols()) {
        throw ShapeError("fuse: branch widths differ, " + shape_str(y_attn.shape()) + " vs " +
                         shape_str(y_ssm->shape()));
    }
    auto na = mul_rowvec(rmsnorm_rows(y_attn, p.norm_attn_gain, eps), p.beta_attn);
    if (!y_ssm) {
        return matmul(na, p.w_out);
    }
    auto ns = mul_rowvec(rmsnorm_rows(*y_ssm, p.norm_ssm_gain, eps), p.beta_ssm);
    return matmul(scale(add(na, ns), Real(0.5)), p.w_out);
}

// Per-branch pre-norm output magnitudes, observable per layer.
struct BranchStats {
    double rms_attn = 0.0;
    double rms_ssm = 0.0;
};

template <class Real>
struct HybridHeadOut {
    Tensor<Real> fused;
    Tensor<Real> y_attn;
    std::optional<Tensor<Real>> y_ssm;
    BranchStats stats;
};

// One layer's worth of the fused module, self-owned KV path. The model-level
// forward splits these steps to thread shared KV groups and caches through.
template <class Real>
HybridHeadOut<Real> hybrid_head_forward(const Tensor<Real>& x_norm,
                                        const HybridHeadParams<Real>& p, const AttnSpec& spec,
                                        const ModelConfig& cfg,
                                        const std::vector<long>& positions,
                                        const std::vector<std::uint8_t>& meta) {
    HybridHeadOut<Real> out;
    out.y_attn = attn_forward(x_norm, p, spec, cfg, positions, meta);
    out.stats.rms_attn = static_cast<double>(rms_of<Real>(out.y_attn.value()));
    if (cfg.ssm_enabled) {
        out.y_ssm = ssm_forward(x_norm, p, cfg);
        out.stats.rms_ssm = static_cast<double>(rms_of<Real>(out.y_ssm->value()));
    }
    out.fused = fuse(out.y_attn, out.y_ssm, p, static_cast<Real>(cfg.norm_eps));
    return out;
}

} // namespace hylm
