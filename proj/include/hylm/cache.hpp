#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hylm/config.hpp"
#include "hylm/hybrid_head.hpp"

namespace hylm {

// ---------------------------------------------------------------------------
// Runtime cache
// ---------------------------------------------------------------------------

// One shared KV buffer. Meta entries are pinned and never evicted; real
// entries behind a sliding window are dropped once out of reach.
template <class Real>
struct KvGroupCache {
    int group_id = 0;
    std::vector<int> layers;
    AttnSpec spec;
    std::size_t k_width = 0, v_width = 0;

    std::vector<Real> k_rows, v_rows;   // row-major, one row per cached position
    std::vector<long> positions;        // absolute position per row
    std::vector<std::uint8_t> meta;     // pinned flag per row
    long next_position = 0;             // append-order bookkeeping

    std::size_t row_count() const { return positions.size(); }

    void append(std::span<const Real> k_new, std::span<const Real> v_new,
                const std::vector<long>& pos, const std::vector<std::uint8_t>& is_meta,
                int window_for_evict) {
        if (k_new.size() != pos.size() * k_width || v_new.size() != pos.size() * v_width) {
            throw CacheError("kv append: row width mismatch");
        }
        for (std::size_t i = 0; i < pos.size(); ++i) {
            if (pos[i] != next_position) {
                throw ContractError("kv append out of order: got position " +
                                    std::to_string(pos[i]) + ", expected " +
                                    std::to_string(next_position));
            }
            ++next_position;
        }
        k_rows.insert(k_rows.end(), k_new.begin(), k_new.end());
        v_rows.insert(v_rows.end(), v_new.begin(), v_new.end());
        positions.insert(positions.end(), pos.begin(), pos.end());
        meta.insert(meta.end(), is_meta.begin(), is_meta.end());
        if (spec.kind == AttnKind::SlidingWindow) {
            evict(window_for_evict);
        }
    }

    // Keep all meta rows and the most recent `window` real rows.
    void evict(int window) {
        std::size_t reals = 0;
        for (auto f : meta) {
            if (!f) {
                ++reals;
            }
        }
        if (reals <= static_cast<std::size_t>(window)) {
            return;
        }
        std::size_t drop = reals - static_cast<std::size_t>(window);
        std::vector<Real> k2, v2;
        std::vector<long> p2;
        std::vector<std::uint8_t> m2;
        k2.reserve(k_rows.size());
        v2.reserve(v_rows.size());
        for (std::size_t r = 0; r < positions.size(); ++r) {
            if (!meta[r] && drop > 0) {
                --drop;
                continue;
            }
            k2.insert(k2.end(), k_rows.begin() + r * k_width, k_rows.begin() + (r + 1) * k_width);
            v2.insert(v2.end(), v_rows.begin() + r * v_width, v_rows.begin() + (r + 1) * v_width);
            p2.push_back(positions[r]);
            m2.push_back(meta[r]);
        }
        k_rows = std::move(k2);
        v_rows = std::move(v2);
        positions = std::move(p2);
        meta = std::move(m2);
    }
};

// Full decode-time state: one KV buffer per unique group, one recurrent state
// per layer, and position bookkeeping. Single-owner; never shared across
// concurrent decode sessions.
template <class Real>
struct CacheState {
    ModelConfig cfg;
    std::vector<KvGroupCache<Real>> groups; // indexed by kv_group id
    std::vector<SsmStreamState<Real>> ssm;  // indexed by layer
    long next_position = 0;  // absolute (meta + real)
    long real_tokens = 0;
    bool meta_consumed = false;
    std::uint64_t param_fingerprint = 0; // set when seeded from a precomputed init

    explicit CacheState(const ModelConfig& config) : cfg(config) {
        const auto wiring = build_wiring(cfg);
        groups.resize(unique_kv_groups(cfg));
        for (const auto& b : wiring) {
            auto& g = groups[b.kv_group];
            g.group_id = b.kv_group;
            g.layers.push_back(b.layer);
            g.spec = b.spec;
            g.k_width = static_cast<std::size_t>(cfg.query_groups) * cfg.head_dim();
            g.v_width = static_cast<std::size_t>(cfg.query_groups) * cfg.v_head_dim();
        }
        ssm.resize(cfg.blocks);
    }

    KvGroupCache<Real>& group_for_layer(int layer) {
        const auto wiring = build_wiring(cfg);
        return groups[wiring[layer].kv_group];
    }

    // Total cached elements (KV rows plus recurrent state), the quantity the
    // cost model prices.
    std::size_t element_count(bool include_ssm_state = true) const {
        std::size_t n = 0;
        for (const auto& g : groups) {
            n += g.k_rows.size() + g.v_rows.size();
        }
        if (include_ssm_state && cfg.ssm_enabled) {
            for (const auto& s : ssm) {
                n += s.h.size() + s.conv_tail.size();
            }
        }
        return n;
    }
};

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

// Conventions fixed to reproduce the published accounting: FP16 entries
// (2 bytes) and decimal megabytes. Sliding-window groups hold at most
// window real positions plus all pinned meta entries; global groups hold
// every consumed position (meta included).
struct CostModel {
    long bytes_per_element = 2;
    bool include_ssm_state = true;
    bool include_conv_state = true;
    bool count_meta_in_global = true;
};

struct GroupCost {
    std::vector<int> layers;
    AttnKind kind = AttnKind::Global;
    long effective_len = 0;
    long long bytes = 0;
};

struct CacheCostReport {
    std::string config_name;
    long seq_len = 0;
    std::vector<GroupCost> groups;
    long long kv_bytes = 0;
    long long ssm_bytes = 0;
    long long total_bytes = 0;
    double total_mb = 0.0;
    CostModel conventions;
};

inline CacheCostReport cache_bytes(const ModelConfig& cfg, long L,
                                   const CostModel& cm = CostModel{}) {
    if (L < 1) {
        throw ContractError("cache_bytes: sequence length must be >= 1");
    }
    CacheCostReport rep;
    rep.config_name = cfg.name;
    rep.seq_len = L;
    rep.conventions = cm;
    const long long row_elems =
        static_cast<long long>(cfg.query_groups) * (cfg.head_dim() + cfg.v_head_dim());
    const auto wiring = build_wiring(cfg);
    std::vector<GroupCost> groups(unique_kv_groups(cfg));
    for (const auto& b : wiring) {
        groups[b.kv_group].layers.push_back(b.layer);
        groups[b.kv_group].kind = b.spec.kind;
        long eff = 0;
        if (b.spec.kind == AttnKind::Global) {
            eff = L + (cm.count_meta_in_global ? cfg.meta_tokens : 0);
        } else {
            eff = std::min<long>(L, b.spec.window) + cfg.meta_tokens;
        }
        groups[b.kv_group].effective_len = eff;
        groups[b.kv_group].bytes = eff * row_elems * cm.bytes_per_element;
    }
    for (auto& g : groups) {
        rep.kv_bytes += g.bytes;
    }
    rep.groups = std::move(groups);
    if (cfg.ssm_enabled && cm.include_ssm_state) {
        long long per_layer = static_cast<long long>(cfg.d_inner) * cfg.ssm_state;
        if (cfg.conv_enabled && cm.include_conv_state) {
            per_layer += static_cast<long long>(cfg.conv_width - 1) * cfg.d_inner;
        }
        rep.ssm_bytes = per_layer * cfg.blocks * cm.bytes_per_element;
    }
    rep.total_bytes = rep.kv_bytes + rep.ssm_bytes;
    rep.total_mb = static_cast<double>(rep.total_bytes) / 1e6; // decimal MB
    return rep;
}

// Candidate accounting layouts for reconciling a hybrid preset against a
// published figure whose exact composition is unstated.
struct ReconciliationRow {
    std::string label;
    double total_mb = 0.0;
};

inline std::vector<ReconciliationRow> cache_reconciliation(const ModelConfig& cfg, long L) {
    std::vector<ReconciliationRow> rows;
    auto push = [&](const std::string& label, const ModelConfig& c, const CostModel& cm) {
        rows.push_back({label, cache_bytes(c, L, cm).total_mb});
    };
    CostModel base;
    push("paired swa sharing, global unshared, ssm+conv state counted", cfg, base);
    CostModel no_state = base;
    no_state.include_ssm_state = false;
    push("paired swa sharing, kv only", cfg, no_state);
    CostModel no_conv = base;
    no_conv.include_conv_state = false;
    push("paired swa sharing, ssm state without conv tail", cfg, no_conv);
    CostModel lean = no_state;
    lean.count_meta_in_global = false;
    push("paired swa sharing, kv only, meta excluded from global count", cfg, lean);
    ModelConfig unshared = cfg;
    unshared.kv_share_factor = 1;
    unshared.kv_share_map.clear();
    push("no cross-layer sharing, ssm+conv state counted", unshared, base);
    ModelConfig share_all = cfg;
    share_all.share_global = true;
    push("paired sharing incl. globals, ssm+conv state counted", share_all, base);
    return rows;
}

// ---------------------------------------------------------------------------
// Analytic multiply-accumulate estimate
// ---------------------------------------------------------------------------

struct FlopsBreakdown {
    long long attn_proj = 0;
    long long attn_scores = 0; // QK^T plus PV, global + windowed
    long long ssm = 0;         // conv + dt/B/C projections + scan
    long long mlp = 0;
    long long lm_head = 0;
    long long total() const { return attn_proj + attn_scores + ssm + mlp + lm_head; }
};

inline FlopsBreakdown flops_estimate(const ModelConfig& cfg, long L) {
    FlopsBreakdown f;
    const long long d = cfg.hidden, C = cfg.d_inner, S = cfg.ssm_state;
    const long long H = cfg.attn_heads, G = cfg.query_groups;
    const long long dh = cfg.head_dim(), dhv = cfg.v_head_dim();
    const long long m = cfg.meta_tokens;
    const auto wiring = build_wiring(cfg);
    // visible-key total over all query positions 1..L (1-indexed count i)
    auto visible_sum = [&](const AttnSpec& spec) -> long long {
        if (spec.kind == AttnKind::Global) {
            return (static_cast<long long>(L) * (L + 1)) / 2 + m * L;
        }
        const long long W = spec.window;
        long long s = 0;
        if (L <= W) {
            s = (static_cast<long long>(L) * (L + 1)) / 2;
        } else {
            s = (W * (W + 1)) / 2 + (L - W) * W;
        }
        return s + m * L;
    };
    for (const auto& b : wiring) {
        f.attn_proj += static_cast<long long>(L) * d * H * dh; // W_Q
        if (!b.shares_kv_with) {
            f.attn_proj += static_cast<long long>(L) * d * G * (dh + dhv);
        }
        const long long vis = visible_sum(b.spec);
        f.attn_scores += vis * H * (dh + dhv);
        f.attn_proj += static_cast<long long>(L) * C * d; // W_out
        if (cfg.ssm_enabled) {
            long long ssm = 2LL * L * d * C;       // W_SSM, W_G
            if (cfg.conv_enabled) {
                ssm += static_cast<long long>(L) * C * cfg.conv_width;
            }
            ssm += static_cast<long long>(L) * C * C;      // W_dt
            ssm += 2LL * L * C * S;                         // W_B, W_C  (per-state projections)
            ssm += 3LL * L * C * S;                         // scan update + output
            f.ssm += ssm;
        }
        f.mlp += 3LL * L * d * cfg.mlp_hidden;
    }
    f.lm_head += static_cast<long long>(L) * d * cfg.vocab;
    return f;
}

} // namespace hylm
