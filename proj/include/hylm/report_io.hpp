#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "hylm/analysis.hpp"
#include "hylm/cache.hpp"
#include "hylm/model.hpp"
#include "hylm/training.hpp"

namespace hylm {

using json = nlohmann::json;

// Round-trip-stable decimal rendering; CSV outputs must be byte-identical
// across identical runs.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Cache report
// ---------------------------------------------------------------------------

inline json cache_report_json(const CacheCostReport& rep,
                              const std::vector<ReconciliationRow>& reconciliation = {}) {
    json groups = json::array();
    for (const auto& g : rep.groups) {
        groups.push_back({{"layers", g.layers},
                          {"kind", attn_kind_name(g.kind)},
                          {"effective_len", g.effective_len},
                          {"bytes", g.bytes}});
    }
    json j{{"config_name", rep.config_name},
           {"L", rep.seq_len},
           {"per_group", groups},
           {"kv_bytes", rep.kv_bytes},
           {"ssm_bytes", rep.ssm_bytes},
           {"total_MB", rep.total_mb},
           {"conventions",
            {{"bytes_per_element", rep.conventions.bytes_per_element},
             {"megabyte", "decimal"},
             {"include_ssm_state", rep.conventions.include_ssm_state},
             {"include_conv_state", rep.conventions.include_conv_state},
             {"count_meta_in_global", rep.conventions.count_meta_in_global}}}};
    if (!reconciliation.empty()) {
        json rows = json::array();
        for (const auto& r : reconciliation) {
            rows.push_back({{"layout", r.label}, {"total_MB", r.total_mb}});
        }
        j["reconciliation"] = rows;
    }
    return j;
}

inline json flops_json(const FlopsBreakdown& f) {
    return json{{"attn_proj", f.attn_proj}, {"attn_scores", f.attn_scores},
                {"ssm", f.ssm},             {"mlp", f.mlp},
                {"lm_head", f.lm_head},     {"total", f.total()}};
}

// ---------------------------------------------------------------------------
// Analysis report
// ---------------------------------------------------------------------------

inline json analysis_report_json(const AttentionMapReport& rep, bool include_maps = false) {
    json heads = json::array();
    for (const auto& hm : rep.maps) {
        json h{{"layer", hm.layer},
               {"head", hm.head},
               {"kind", map_kind_name(hm.kind)},
               {"entropy_mean", hm.entropy_mean},
               {"erf_contribution", hm.erf_contribution},
               {"categories",
                {{"meta", hm.categories.meta},
                 {"bos", hm.categories.bos},
                 {"self", hm.categories.self},
                 {"cross", hm.categories.cross}}}};
        if (include_maps) {
            h["map"] = hm.map;
        }
        heads.push_back(std::move(h));
    }
    json per_layer = json::array();
    for (const auto& e : entropy_series(rep)) {
        per_layer.push_back({{"layer", e.layer}, {"attn", e.attn}, {"ssm", e.ssm}});
    }
    return json{{"input", {{"length", rep.length}, {"meta_tokens", rep.meta_count}}},
                {"heads", heads},
                {"erf", {{"total", rep.erf_total}, {"attn", rep.erf_attn}, {"ssm", rep.erf_ssm}}},
                {"per_layer_entropy", per_layer}};
}

// Long format: layer,head,kind,metric,value.
inline std::string analysis_report_csv(const AttentionMapReport& rep) {
    std::string out = "layer,head,kind,metric,value\n";
    for (const auto& hm : rep.maps) {
        const std::string base = std::to_string(hm.layer) + "," + std::to_string(hm.head) + "," +
                                 map_kind_name(hm.kind) + ",";
        out += base + "entropy_mean," + fmt_double(hm.entropy_mean) + "\n";
        out += base + "erf_contribution," + fmt_double(hm.erf_contribution) + "\n";
        out += base + "cat_meta," + fmt_double(hm.categories.meta) + "\n";
        out += base + "cat_bos," + fmt_double(hm.categories.bos) + "\n";
        out += base + "cat_self," + fmt_double(hm.categories.self) + "\n";
        out += base + "cat_cross," + fmt_double(hm.categories.cross) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training / evaluation outputs
// ---------------------------------------------------------------------------

inline std::string loss_trace_csv(const std::vector<TraceRow>& trace) {
    std::string out = "step,lr,loss\n";
    for (const auto& r : trace) {
        out += std::to_string(r.step) + "," + fmt_double(r.lr) + "," + fmt_double(r.loss) + "\n";
    }
    return out;
}

inline std::string needle_grid_csv(const std::vector<NeedleCell>& grid) {
    std::string out = "length,depth,accuracy\n";
    for (const auto& c : grid) {
        out += std::to_string(c.length) + "," + fmt_double(c.depth) + "," +
               fmt_double(c.accuracy) + "\n";
    }
    return out;
}

inline json needle_grid_json(const std::vector<NeedleCell>& grid) {
    json cells = json::array();
    for (const auto& c : grid) {
        cells.push_back(
            {{"length", c.length}, {"depth", c.depth}, {"accuracy", c.accuracy}});
    }
    return json{{"task", "needle"}, {"cells", cells}};
}

inline json kv_recall_json(int n_pairs, int episodes, double accuracy) {
    return json{{"task", "kv_recall"},
                {"pairs", n_pairs},
                {"episodes", episodes},
                {"accuracy", accuracy}};
}

inline std::string importance_csv(const std::vector<std::array<double, 2>>& sweep) {
    std::string out = "layer,attn_delta,ssm_delta\n";
    for (std::size_t l = 0; l < sweep.size(); ++l) {
        out += std::to_string(l) + "," + fmt_double(sweep[l][0]) + "," +
               fmt_double(sweep[l][1]) + "\n";
    }
    return out;
}

inline json importance_json(const std::vector<std::array<double, 2>>& sweep) {
    json layers = json::array();
    for (std::size_t l = 0; l < sweep.size(); ++l) {
        layers.push_back(
            {{"layer", l}, {"attn_delta", sweep[l][0]}, {"ssm_delta", sweep[l][1]}});
    }
    json j{{"deltas", layers}};
    if (!sweep.empty()) {
        // the first layer's SSM branch gets a dedicated callout in the report
        j["first_layer_ssm_delta"] = sweep[0][1];
    }
    return j;
}

// ---------------------------------------------------------------------------
// Parameter audit (export)
// ---------------------------------------------------------------------------

template <class Real>
json export_params_json(const Model<Real>& model) {
    json params = json::array();
    long long total = 0;
    for (const auto& [name, t] : model.parameters()) {
        double mn = t.value()[0], mx = t.value()[0], sum = 0, sq = 0;
        for (Real v : t.value()) {
            const double x = static_cast<double>(v);
            mn = std::min(mn, x);
            mx = std::max(mx, x);
            sum += x;
            sq += x * x;
        }
        const double n = static_cast<double>(t.size());
        params.push_back({{"name", name},
                          {"shape", t.shape()},
                          {"count", t.size()},
                          {"mean", sum / n},
                          {"rms", std::sqrt(sq / n)},
                          {"min", mn},
                          {"max", mx}});
        total += static_cast<long long>(t.size());
    }
    return json{{"config_name", model.cfg.name},
                {"param_count", total},
                {"fingerprint", model.fingerprint()},
                {"params", params}};
}

} // namespace hylm
