#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hylm/cache.hpp"
#include "hylm/config.hpp"
#include "hylm/hybrid_head.hpp"
#include "hylm/tensor.hpp"

namespace hylm {

template <class Real>
struct LayerParams {
    HybridHeadParams<Real> head;
    Tensor<Real> norm1_gain; // pre-norm before the hybrid module
    Tensor<Real> norm2_gain; // pre-norm before the MLP
    Tensor<Real> mlp_gate;   // [d, mlp]
    Tensor<Real> mlp_up;     // [d, mlp]
    Tensor<Real> mlp_down;   // [mlp, d]
};

template <class Real>
struct Model {
    ModelConfig cfg;
    std::vector<BlockWiring> wiring;
    Tensor<Real> embedding;       // [V, d]
    Tensor<Real> lm_head;         // [d, V], absent when tied
    Tensor<Real> meta_r;          // [m, d], absent when m == 0
    std::vector<LayerParams<Real>> layers;
    Tensor<Real> final_norm_gain; // [d]

    // Named parameters in a stable order (registry order defines the
    // checkpoint layout and the fingerprint).
    std::vector<std::pair<std::string, Tensor<Real>>> parameters() const {
        std::vector<std::pair<std::string, Tensor<Real>>> out;
        auto push = [&](const std::string& name, const Tensor<Real>& t) {
            if (t.defined()) {
                out.emplace_back(name, t);
            }
        };
        push("embed", embedding);
        push("lm_head", lm_head);
        push("meta.r", meta_r);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            const auto& lp = layers[l];
            push(p + "norm1", lp.norm1_gain);
            push(p + "w_q", lp.head.w_q);
            push(p + "w_k", lp.head.w_k);
            push(p + "w_v", lp.head.w_v);
            push(p + "w_ssm", lp.head.w_ssm);
            push(p + "w_gate", lp.head.w_gate);
            push(p + "conv_w", lp.head.conv_w);
            push(p + "conv_b", lp.head.conv_b);
            push(p + "a_log", lp.head.a_log);
            push(p + "w_b", lp.head.w_b);
            push(p + "w_c", lp.head.w_c);
            push(p + "w_dt", lp.head.w_dt);
            push(p + "norm_attn", lp.head.norm_attn_gain);
            push(p + "beta_attn", lp.head.beta_attn);
            push(p + "norm_ssm", lp.head.norm_ssm_gain);
            push(p + "beta_ssm", lp.head.beta_ssm);
            push(p + "w_out", lp.head.w_out);
            push(p + "norm2", lp.norm2_gain);
            push(p + "mlp_gate", lp.mlp_gate);
            push(p + "mlp_up", lp.mlp_up);
            push(p + "mlp_down", lp.mlp_down);
        }
        push("final_norm", final_norm_gain);
        return out;
    }

    long long param_count() const {
        long long n = 0;
        for (const auto& [name, t] : parameters()) {
            n += static_cast<long long>(t.size());
        }
        return n;
    }

    void zero_grads() const {
        for (auto& [name, t] : parameters()) {
            const_cast<Tensor<Real>&>(t).zero_grad();
        }
    }

    // FNV-1a over the canonical config text and all parameter bytes.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 14695981039346656037ULL;
        auto feed = [&h](const void* data, std::size_t n) {
            const auto* p = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= p[i];
                h *= 1099511628211ULL;
            }
        };
        const std::string cfg_text = config_to_text(cfg);
        feed(cfg_text.data(), cfg_text.size());
        for (const auto& [name, t] : parameters()) {
            feed(name.data(), name.size());
            feed(t.value().data(), t.value().size() * sizeof(Real));
        }
        return h;
    }
};

template <class Real>
Model<Real> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.check();
    Model<Real> m;
    m.cfg = cfg;
    m.wiring = build_wiring(cfg);
    RngStream rng(seed);
    const std::size_t d = cfg.hidden;
    m.embedding = Tensor<Real>::gaussian({static_cast<std::size_t>(cfg.vocab), d}, rng,
                                         Real(0.02), true);
    if (!cfg.tie_embedding) {
        m.lm_head = Tensor<Real>::gaussian({d, static_cast<std::size_t>(cfg.vocab)}, rng,
                                           Real(0.02), true);
    }
    if (cfg.meta_tokens > 0) {
        m.meta_r = Tensor<Real>::gaussian({static_cast<std::size_t>(cfg.meta_tokens), d}, rng,
                                          Real(0.02), true);
    }
    m.layers.resize(cfg.blocks);
    for (int l = 0; l < cfg.blocks; ++l) {
        auto& lp = m.layers[l];
        lp.head = init_hybrid_head<Real>(cfg, !m.wiring[l].shares_kv_with.has_value(), rng);
        lp.norm1_gain = Tensor<Real>::filled({d}, Real(1), true);
        lp.norm2_gain = Tensor<Real>::filled({d}, Real(1), true);
        lp.mlp_gate = Tensor<Real>::gaussian({d, static_cast<std::size_t>(cfg.mlp_hidden)}, rng,
                                             Real(0.02), true);
        lp.mlp_up = Tensor<Real>::gaussian({d, static_cast<std::size_t>(cfg.mlp_hidden)}, rng,
                                           Real(0.02), true);
        lp.mlp_down = Tensor<Real>::gaussian({static_cast<std::size_t>(cfg.mlp_hidden), d}, rng,
                                             Real(0.02), true);
    }
    m.final_norm_gain = Tensor<Real>::filled({d}, Real(1), true);
    return m;
}

// Attention-only sibling for ERF/cache comparisons.
template <class Real>
Model<Real> reference_transformer(const ModelConfig& cfg, std::uint64_t seed,
                                  bool rebalance = true) {
    return build_model<Real>(reference_transformer_config(cfg, rebalance), seed);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Per-layer observations collected during a full (uncached) forward.
template <class Real>
struct ForwardTrace {
    bool want_maps = false;
    std::vector<AttnCapture<Real>> attn;       // per layer (filled when want_maps)
    std::vector<SsmCapture<Real>> ssm;         // per layer (filled when want_maps)
    std::vector<std::vector<Real>> attn_v;     // per layer: V rows [T x G*dhv]
    std::vector<BranchStats> stats;            // per layer, always filled
    std::vector<long> positions;
    std::vector<std::uint8_t> meta_flags;
    std::size_t meta_rows = 0;
};

namespace detail {

template <class Real>
Tensor<Real> rows_tensor(const std::vector<Real>& data, std::size_t width) {
    const std::size_t rows = width ? data.size() / width : 0;
    return Tensor<Real>::from({rows, width}, data);
}

} // namespace detail

// Causal logits over the real tokens of this call. Without a cache the meta
// tokens are prepended internally (training view); with a cache they are
// consumed on the first call unless the cache was seeded from a precomputed
// init. Token-by-token cached decode reproduces the full forward.
template <class Real>
Tensor<Real> forward(const Model<Real>& model, std::span<const int> tokens,
                     CacheState<Real>* cache = nullptr, ForwardTrace<Real>* trace = nullptr) {
    const ModelConfig& cfg = model.cfg;
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab) {
            throw ContractError("forward: token id " + std::to_string(t) + " outside vocab " +
                                std::to_string(cfg.vocab));
        }
    }
    std::optional<NoGradGuard> guard;
    if (cache) {
        guard.emplace();
        if (config_to_text(cache->cfg) != config_to_text(cfg)) {
            throw CacheError("forward: cache was built for a different model config");
        }
        if (cache->param_fingerprint != 0 && cache->param_fingerprint != model.fingerprint()) {
            throw CacheError("forward: cache init fingerprint does not match current parameters "
                             "(stale precomputed init)");
        }
        if (!cache->meta_consumed && cache->next_position != 0) {
            throw CacheError("forward: cache position bookkeeping is inconsistent");
        }
    }
    const bool add_meta = cfg.meta_tokens > 0 && (cache ? !cache->meta_consumed : true);
    const long base_pos = cache ? cache->next_position : 0;
    const std::size_t n_real = tokens.size();
    const std::size_t m_rows = add_meta ? static_cast<std::size_t>(cfg.meta_tokens) : 0;
    const std::size_t total = m_rows + n_real;
    if (total == 0) {
        throw ContractError("forward: nothing to process (no tokens, no pending meta)");
    }

    std::vector<long> positions(total);
    std::vector<std::uint8_t> meta_flags(total, 0);
    for (std::size_t i = 0; i < m_rows; ++i) {
        positions[i] = static_cast<long>(i);
        meta_flags[i] = 1;
    }
    for (std::size_t i = 0; i < n_real; ++i) {
        positions[m_rows + i] = base_pos + static_cast<long>(m_rows + i);
    }
    std::vector<long> rope_pos(total);
    for (std::size_t i = 0; i < total; ++i) {
        rope_pos[i] = (cfg.rope_offset_meta && !meta_flags[i]) ? positions[i] - cfg.meta_tokens
                                                               : positions[i];
    }

    Tensor<Real> x;
    {
        std::vector<Tensor<Real>> parts;
        if (add_meta) {
            parts.push_back(model.meta_r);
        }
        if (n_real > 0) {
            parts.push_back(embedding_rows(model.embedding,
                                           std::vector<int>(tokens.begin(), tokens.end())));
        }
        x = parts.size() == 1 ? parts[0] : concat_rows(parts);
    }

    if (trace) {
        trace->attn.assign(cfg.blocks, {});
        trace->ssm.assign(cfg.blocks, {});
        trace->attn_v.assign(cfg.blocks, {});
        trace->stats.assign(cfg.blocks, {});
        trace->positions = positions;
        trace->meta_flags = meta_flags;
        trace->meta_rows = m_rows;
    }

    const Real eps = static_cast<Real>(cfg.norm_eps);
    std::vector<std::optional<KvBlock<Real>>> scratch(unique_kv_groups(cfg));
    for (int l = 0; l < cfg.blocks; ++l) {
        const auto& lp = model.layers[l];
        const auto& wire = model.wiring[l];
        auto x_norm = rmsnorm_rows(x, lp.norm1_gain, eps);

        auto q = matmul(x_norm, lp.head.w_q);
        if (cfg.rope) {
            q = rope_rows(q, rope_pos, cfg.head_dim(), cfg.rope_base);
        }
        if (!scratch[wire.kv_group]) {
            // This layer owns the group's projections.
            KvBlock<Real> fresh;
            fresh.k = matmul(x_norm, lp.head.w_k);
            if (cfg.rope) {
                fresh.k = rope_rows(fresh.k, rope_pos, cfg.head_dim(), cfg.rope_base);
            }
            fresh.v = matmul(x_norm, lp.head.w_v);
            fresh.positions = positions;
            fresh.meta = meta_flags;
            if (cache) {
                auto& g = cache->groups[wire.kv_group];
                KvBlock<Real> full;
                if (g.row_count() > 0) {
                    full.k = concat_rows<Real>(
                        {detail::rows_tensor(g.k_rows, g.k_width), fresh.k});
                    full.v = concat_rows<Real>(
                        {detail::rows_tensor(g.v_rows, g.v_width), fresh.v});
                    full.positions = g.positions;
                    full.positions.insert(full.positions.end(), positions.begin(),
                                          positions.end());
                    full.meta = g.meta;
                    full.meta.insert(full.meta.end(), meta_flags.begin(), meta_flags.end());
                } else {
                    full = fresh;
                }
                g.append(fresh.k.value(), fresh.v.value(), positions, meta_flags,
                         wire.spec.window);
                scratch[wire.kv_group] = std::move(full);
            } else {
                scratch[wire.kv_group] = std::move(fresh);
            }
        }
        const KvBlock<Real>& kv = *scratch[wire.kv_group];

        AttnCapture<Real>* cap = trace && trace->want_maps ? &trace->attn[l] : nullptr;
        auto y_attn = attn_attend(q, kv, positions, wire.spec, cfg, cap);
        if (trace) {
            trace->stats[l].rms_attn = static_cast<double>(rms_of<Real>(y_attn.value()));
            if (trace->want_maps) {
                trace->attn_v[l].assign(kv.v.value().begin(), kv.v.value().end());
            }
        }

        std::optional<Tensor<Real>> y_ssm;
        if (cfg.ssm_enabled) {
            SsmCapture<Real>* scap = trace && trace->want_maps ? &trace->ssm[l] : nullptr;
            y_ssm = ssm_forward(x_norm, lp.head, cfg, cache ? &cache->ssm[l] : nullptr, scap);
            if (trace) {
                trace->stats[l].rms_ssm = static_cast<double>(rms_of<Real>(y_ssm->value()));
            }
        }
        x = add(x, fuse(y_attn, y_ssm, lp.head, eps));

        auto x_norm2 = rmsnorm_rows(x, lp.norm2_gain, eps);
        auto h = mul(silu(matmul(x_norm2, lp.mlp_gate)), matmul(x_norm2, lp.mlp_up));
        x = add(x, matmul(h, lp.mlp_down));
    }

    if (cache) {
        if (add_meta) {
            cache->meta_consumed = true;
        }
        cache->next_position += static_cast<long>(total);
        cache->real_tokens += static_cast<long>(n_real);
    }

    if (n_real == 0) {
        return Tensor<Real>::zeros({std::size_t(0), static_cast<std::size_t>(cfg.vocab)});
    }
    auto xf = rmsnorm_rows(x, model.final_norm_gain, eps);
    auto logits = cfg.tie_embedding ? matmul(xf, transpose(model.embedding))
                                    : matmul(xf, model.lm_head);
    if (m_rows > 0) {
        logits = slice_rows(logits, m_rows, total);
    }
    return logits;
}

// Next-token LM loss over the real positions (meta rows carry no labels by
// construction; the last row has no target).
template <class Real>
Tensor<Real> lm_loss(const Model<Real>& model, std::span<const int> tokens) {
    if (tokens.size() < 2) {
        throw ContractError("lm_loss: need at least two tokens");
    }
    auto logits = forward(model, tokens);
    std::vector<int> targets(tokens.size(), 0);
    std::vector<Real> weights(tokens.size(), Real(0));
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        targets[i] = tokens[i + 1];
        weights[i] = Real(1);
    }
    return cross_entropy_rows(logits, targets, weights);
}

} // namespace hylm
