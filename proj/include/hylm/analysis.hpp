#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hylm/model.hpp"

namespace hylm {

enum class MapKind { Attn, Ssm };

inline const char* map_kind_name(MapKind k) { return k == MapKind::Attn ? "attn" : "ssm"; }

// Mass of one map row split by target class: meta columns, the BOS column
// (position m), the diagonal, and everything else.
struct CategorySums {
    double meta = 0, bos = 0, self = 0, cross = 0;
    double total() const { return meta + bos + self + cross; }
};

// One materialized row-stochastic map plus its derived statistics.
struct HeadMap {
    int layer = 0;
    int head = 0;
    MapKind kind = MapKind::Attn;
    std::size_t length = 0;
    std::vector<double> map; // L x L row-major, rows sum to 1
    double entropy_mean = 0;
    double erf_contribution = 0; // this map's term of the ERF sum (needs report context)
    CategorySums categories;
};

struct AttentionMapReport {
    std::size_t length = 0;
    int meta_count = 0;
    int blocks = 0;
    int heads_attn = 0;
    int heads_ssm = 0;
    std::vector<HeadMap> maps;
    double erf_total = 0, erf_attn = 0, erf_ssm = 0;
};

namespace detail {

inline double row_entropy(const double* row, std::size_t n) {
    double h = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (row[j] > 0) {
            h -= row[j] * std::log(row[j]);
        }
    }
    return h;
}

} // namespace detail

inline double map_mean_entropy(const std::vector<double>& map, std::size_t L) {
    double acc = 0;
    for (std::size_t i = 0; i < L; ++i) {
        acc += detail::row_entropy(map.data() + i * L, L);
    }
    return L ? acc / static_cast<double>(L) : 0.0;
}

// Per-row category split over real-token rows (positions after the BOS at
// index m). Each row carries unit mass, so the sums normalized by the row
// count partition into fractions totalling 1.
inline CategorySums categorize_map(const std::vector<double>& map, std::size_t L, int m) {
    CategorySums c;
    const std::size_t first_row = static_cast<std::size_t>(m) + 1;
    if (first_row >= L) {
        return c;
    }
    const double rows = static_cast<double>(L - first_row);
    for (std::size_t i = first_row; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
            const double v = map[i * L + j];
            if (j < static_cast<std::size_t>(m)) {
                c.meta += v;
            } else if (j == static_cast<std::size_t>(m)) {
                c.bos += v;
            } else if (j == i) {
                c.self += v;
            } else {
                c.cross += v;
            }
        }
    }
    c.meta /= rows;
    c.bos /= rows;
    c.self /= rows;
    c.cross /= rows;
    return c;
}

// ---------------------------------------------------------------------------
// Map materialization
// ---------------------------------------------------------------------------

// Signed per-channel data-controlled operator: entry (i,j) is the weight the
// scan gives input row j, channel c, when producing output row i. The
// unnormalized map applied to the scan-input column reproduces the scan.
inline std::vector<double> ssm_channel_operator(const SsmCapture<double>& cap, std::size_t L,
                                                std::size_t C, std::size_t S, std::size_t c) {
    std::vector<double> alpha(L * L, 0.0);
    std::vector<double> p(S, 0.0);
    for (std::size_t j = 0; j < L; ++j) {
        for (std::size_t s = 0; s < S; ++s) {
            p[s] = cap.b[j * S + s] * cap.dt[j * C + c];
        }
        for (std::size_t i = j; i < L; ++i) {
            if (i > j) {
                for (std::size_t s = 0; s < S; ++s) {
                    p[s] *= std::exp(cap.a[c * S + s] * cap.dt[i * C + c]);
                }
            }
            double acc = 0;
            for (std::size_t s = 0; s < S; ++s) {
                acc += cap.c[i * S + s] * p[s];
            }
            alpha[i * L + j] = acc;
        }
    }
    return alpha;
}

struct AnalysisOptions {
    std::size_t max_length = 512;
};

inline double erf_of_report(const AttentionMapReport& rep, std::optional<MapKind> filter);
inline double erf_map_term(const HeadMap& hm, int blocks, int heads_of_kind);

// Materializes every head's row-stochastic map for one input, via a traced
// forward pass (so attention maps are exactly the weights the forward used).
// SSM maps aggregate mean |alpha| over each head's channels, then row-
// normalize per the published convention.
template <class Real>
AttentionMapReport analyze_maps(const Model<Real>& model, std::span<const int> tokens,
                                const AnalysisOptions& opts = {}) {
    const ModelConfig& cfg = model.cfg;
    const std::size_t L_total = static_cast<std::size_t>(cfg.meta_tokens) + tokens.size();
    if (L_total > opts.max_length) {
        throw ContractError("analysis limit exceeded: sequence needs " +
                            std::to_string(L_total) + " positions, limit is " +
                            std::to_string(opts.max_length));
    }
    ForwardTrace<Real> trace;
    trace.want_maps = true;
    forward(model, tokens, static_cast<CacheState<Real>*>(nullptr), &trace);

    AttentionMapReport rep;
    rep.length = L_total;
    rep.meta_count = cfg.meta_tokens;
    rep.blocks = cfg.blocks;
    rep.heads_attn = cfg.attn_heads;
    rep.heads_ssm = cfg.ssm_heads();
    const std::size_t L = L_total;
    for (int l = 0; l < cfg.blocks; ++l) {
        for (int h = 0; h < cfg.attn_heads; ++h) {
            HeadMap hm;
            hm.layer = l;
            hm.head = h;
            hm.kind = MapKind::Attn;
            hm.length = L;
            hm.map.assign(trace.attn[l].probs[h].begin(), trace.attn[l].probs[h].end());
            hm.entropy_mean = map_mean_entropy(hm.map, L);
            hm.categories = categorize_map(hm.map, L, cfg.meta_tokens);
            rep.maps.push_back(std::move(hm));
        }
        if (!cfg.ssm_enabled) {
            continue;
        }
        const std::size_t C = cfg.d_inner, S = cfg.ssm_state;
        const int heads = cfg.ssm_heads();
        const std::size_t chans_per_head = C / heads;
        const auto& cap = trace.ssm[l];
        for (int h = 0; h < heads; ++h) {
            std::vector<double> agg(L * L, 0.0);
            for (std::size_t c = h * chans_per_head; c < (h + 1) * chans_per_head; ++c) {
                auto alpha = ssm_channel_operator(cap, L, C, S, c);
                for (std::size_t i = 0; i < L * L; ++i) {
                    agg[i] += std::abs(alpha[i]);
                }
            }
            for (auto& v : agg) {
                v /= static_cast<double>(chans_per_head);
            }
            // row-normalize so every row sums to 1
            for (std::size_t i = 0; i < L; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < L; ++j) {
                    s += agg[i * L + j];
                }
                if (s > 0) {
                    for (std::size_t j = 0; j < L; ++j) {
                        agg[i * L + j] /= s;
                    }
                } else {
                    agg[i * L + i] = 1.0; // degenerate all-zero row: self mass
                }
            }
            HeadMap hm;
            hm.layer = l;
            hm.head = h;
            hm.kind = MapKind::Ssm;
            hm.length = L;
            hm.map = std::move(agg);
            hm.entropy_mean = map_mean_entropy(hm.map, L);
            hm.categories = categorize_map(hm.map, L, cfg.meta_tokens);
            rep.maps.push_back(std::move(hm));
        }
    }
    for (auto& hm : rep.maps) {
        hm.erf_contribution = erf_map_term(
            hm, rep.blocks, hm.kind == MapKind::Attn ? rep.heads_attn : rep.heads_ssm);
    }
    rep.erf_attn = erf_of_report(rep, MapKind::Attn);
    rep.erf_ssm = cfg.ssm_enabled ? erf_of_report(rep, MapKind::Ssm) : 0.0;
    rep.erf_total = erf_of_report(rep, std::nullopt);
    return rep;
}

// Single-map views of the report builder.
template <class Real>
std::vector<double> materialize_attn(const Model<Real>& model, std::span<const int> tokens,
                                     int layer, int head, const AnalysisOptions& opts = {}) {
    auto rep = analyze_maps(model, tokens, opts);
    for (auto& hm : rep.maps) {
        if (hm.kind == MapKind::Attn && hm.layer == layer && hm.head == head) {
            return std::move(hm.map);
        }
    }
    throw ContractError("materialize_attn: no such layer/head");
}

template <class Real>
std::vector<double> materialize_ssm(const Model<Real>& model, std::span<const int> tokens,
                                    int layer, int head, const AnalysisOptions& opts = {}) {
    auto rep = analyze_maps(model, tokens, opts);
    for (auto& hm : rep.maps) {
        if (hm.kind == MapKind::Ssm && hm.layer == layer && hm.head == head) {
            return std::move(hm.map);
        }
    }
    throw ContractError("materialize_ssm: no such layer/head");
}

// ---------------------------------------------------------------------------
// Effective receptive field
// ---------------------------------------------------------------------------

// ERF over a stack of per-layer maps: with 1-indexed layers n <= N, heads
// h <= H and key positions s <= S,
//   ERF = sum_n sum_h sum_s 2*M^{n,h}(S,s)*(S-s)*(N-n+1) / (H*N*(N+1)),
// reading M at the last query row. Maps are grouped per layer; every layer
// must contribute the same head count H.
inline double erf_from_maps(const std::vector<const HeadMap*>& maps, int blocks) {
    if (maps.empty() || blocks <= 0) {
        return 0.0;
    }
    const std::size_t per_layer = maps.size() / static_cast<std::size_t>(blocks);
    if (per_layer == 0 || maps.size() % static_cast<std::size_t>(blocks) != 0) {
        throw ContractError("erf: maps do not tile evenly across layers");
    }
    const double N = static_cast<double>(blocks);
    const double H = static_cast<double>(per_layer);
    double acc = 0.0;
    for (const HeadMap* hm : maps) {
        const double n = static_cast<double>(hm->layer + 1);
        const std::size_t L = hm->length;
        const double S = static_cast<double>(L);
        const double* last_row = hm->map.data() + (L - 1) * L;
        for (std::size_t sj = 0; sj < L; ++sj) {
            const double s = static_cast<double>(sj + 1);
            acc += 2.0 * last_row[sj] * (S - s) * (N - n + 1.0) / (H * N * (N + 1.0));
        }
    }
    return acc;
}

inline double erf_of_report(const AttentionMapReport& rep, std::optional<MapKind> filter) {
    std::vector<const HeadMap*> maps;
    for (const auto& hm : rep.maps) {
        if (!filter || hm.kind == *filter) {
            maps.push_back(&hm);
        }
    }
    return erf_from_maps(maps, rep.blocks);
}

// One map's term of the per-kind ERF sum.
inline double erf_map_term(const HeadMap& hm, int blocks, int heads_of_kind) {
    if (heads_of_kind <= 0) {
        return 0.0;
    }
    const double N = static_cast<double>(blocks);
    const double H = static_cast<double>(heads_of_kind);
    const double n = static_cast<double>(hm.layer + 1);
    const std::size_t L = hm.length;
    const double S = static_cast<double>(L);
    const double* last_row = hm.map.data() + (L - 1) * L;
    double acc = 0.0;
    for (std::size_t sj = 0; sj < L; ++sj) {
        const double s = static_cast<double>(sj + 1);
        acc += 2.0 * last_row[sj] * (S - s) * (N - n + 1.0) / (H * N * (N + 1.0));
    }
    return acc;
}

template <class Real>
double erf(const Model<Real>& model, std::span<const int> tokens,
           std::optional<MapKind> filter = {}, const AnalysisOptions& opts = {}) {
    auto rep = analyze_maps(model, tokens, opts);
    return erf_of_report(rep, filter);
}

// Uniform-attention map stack: row i spreads mass evenly over its visible
// positions (causal, optionally windowed). The analytic comparison point for
// global-vs-SWA receptive fields.
inline std::vector<HeadMap> uniform_attention_maps(int blocks, int heads, std::size_t L,
                                                   int window = 0) {
    std::vector<HeadMap> maps;
    for (int l = 0; l < blocks; ++l) {
        for (int h = 0; h < heads; ++h) {
            HeadMap hm;
            hm.layer = l;
            hm.head = h;
            hm.kind = MapKind::Attn;
            hm.length = L;
            hm.map.assign(L * L, 0.0);
            for (std::size_t i = 0; i < L; ++i) {
                const std::size_t lo =
                    window > 0 && i + 1 > static_cast<std::size_t>(window)
                        ? i + 1 - static_cast<std::size_t>(window)
                        : 0;
                const double mass = 1.0 / static_cast<double>(i - lo + 1);
                for (std::size_t j = lo; j <= i; ++j) {
                    hm.map[i * L + j] = mass;
                }
            }
            maps.push_back(std::move(hm));
        }
    }
    return maps;
}

inline double erf_uniform(int blocks, int heads, std::size_t L, int window = 0) {
    auto maps = uniform_attention_maps(blocks, heads, L, window);
    std::vector<const HeadMap*> ptrs;
    for (const auto& m : maps) {
        ptrs.push_back(&m);
    }
    return erf_from_maps(ptrs, blocks);
}

// ---------------------------------------------------------------------------
// Head importance
// ---------------------------------------------------------------------------

// accuracy(model) - accuracy(model with the branch's rescale vector zeroed at
// one layer). The evaluator must be a pure function of the model.
template <class Real>
double head_importance(const Model<Real>& model,
                       const std::function<double(const Model<Real>&)>& evaluate, int layer,
                       Branch branch) {
    const double base = evaluate(model);
    Model<Real> ablated = model;
    ablated.layers[layer].head = zero_branch(ablated.layers[layer].head, branch);
    return base - evaluate(ablated);
}

// Full sweep: rows are layers, columns {attn, ssm} accuracy deltas.
template <class Real>
std::vector<std::array<double, 2>> importance_sweep(
    const Model<Real>& model, const std::function<double(const Model<Real>&)>& evaluate) {
    std::vector<std::array<double, 2>> out(model.cfg.blocks);
    const double base = evaluate(model);
    for (int l = 0; l < model.cfg.blocks; ++l) {
        for (int b = 0; b < 2; ++b) {
            Model<Real> ablated = model;
            ablated.layers[l].head =
                zero_branch(ablated.layers[l].head, b == 0 ? Branch::Attn : Branch::Ssm);
            out[l][b] = base - evaluate(ablated);
        }
    }
    return out;
}

// Per-layer mean entropies split by head kind (the layer-wise entropy series).
struct LayerEntropy {
    int layer = 0;
    double attn = 0;
    double ssm = 0;
};

inline std::vector<LayerEntropy> entropy_series(const AttentionMapReport& rep) {
    std::vector<LayerEntropy> out(rep.blocks);
    std::vector<int> na(rep.blocks, 0), ns(rep.blocks, 0);
    for (int l = 0; l < rep.blocks; ++l) {
        out[l].layer = l;
    }
    for (const auto& hm : rep.maps) {
        if (hm.kind == MapKind::Attn) {
            out[hm.layer].attn += hm.entropy_mean;
            ++na[hm.layer];
        } else {
            out[hm.layer].ssm += hm.entropy_mean;
            ++ns[hm.layer];
        }
    }
    for (int l = 0; l < rep.blocks; ++l) {
        if (na[l]) {
            out[l].attn /= na[l];
        }
        if (ns[l]) {
            out[l].ssm /= ns[l];
        }
    }
    return out;
}

// Kind-level category aggregation (means over maps of that kind).
inline CategorySums categories_of_kind(const AttentionMapReport& rep, MapKind kind) {
    CategorySums acc;
    int n = 0;
    for (const auto& hm : rep.maps) {
        if (hm.kind != kind) {
            continue;
        }
        acc.meta += hm.categories.meta;
        acc.bos += hm.categories.bos;
        acc.self += hm.categories.self;
        acc.cross += hm.categories.cross;
        ++n;
    }
    if (n) {
        acc.meta /= n;
        acc.bos /= n;
        acc.self /= n;
        acc.cross /= n;
    }
    return acc;
}

} // namespace hylm
