#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hylm/error.hpp"

namespace hylm {

enum class AttnKind { Global, SlidingWindow };

inline const char* attn_kind_name(AttnKind k) {
    return k == AttnKind::Global ? "global" : "sliding_window";
}

// Attention flavor of one layer.
struct AttnSpec {
    AttnKind kind = AttnKind::Global;
    int window = 0; // real-token span, used when kind == SlidingWindow
    bool rope = true;
    double rope_base = 10000.0;

    bool operator==(const AttnSpec& o) const {
        return kind == o.kind && (kind == AttnKind::Global || window == o.window) &&
               rope == o.rope && rope_base == o.rope_base;
    }
};

// Complete architecture description. Defaults give the shipping desk-scale toy.
struct ModelConfig {
    std::string name = "custom";
    int blocks = 4;
    int hidden = 64;
    int vocab = 257; // 256 bytes + BOS
    int mlp_hidden = 128;
    bool tie_embedding = true;
    int meta_tokens = 8;

    // attention
    int attn_heads = 4;
    int query_groups = 2;
    int num_full_attn = 1; // placed {first, middle, last} when == 3
    int window = 16;
    bool rope = true;
    double rope_base = 10000.0;
    bool rope_offset_meta = false; // true: real tokens restart at position 0

    // ssm branch
    bool ssm_enabled = true;
    int d_inner = 128;
    int ssm_state = 8;
    int head_count_ssm = 0; // 0 -> d_inner / ssm_state
    bool conv_enabled = true;
    int conv_width = 4;

    // cross-layer KV sharing
    int kv_share_factor = 2;  // consecutive layers per shared group; 1 disables
    bool share_global = false; // full-attention layers join sharing groups
    std::vector<int> kv_share_map; // explicit layer -> group id override; empty = derived

    double norm_eps = 1e-6;

    int head_dim() const { return attn_heads > 0 ? hidden / attn_heads : 0; }
    int v_head_dim() const { return attn_heads > 0 ? d_inner / attn_heads : 0; }
    int ssm_heads() const {
        if (!ssm_enabled) {
            return 0;
        }
        return head_count_ssm > 0 ? head_count_ssm : d_inner / ssm_state;
    }

    std::vector<std::string> validate() const;
    void check() const {
        auto v = validate();
        if (!v.empty()) {
            throw ValidationError(std::move(v));
        }
    }
};

// Full-attention placement: three layers go to {first, middle, last}; other
// counts spread evenly across the stack (endpoints included).
inline std::vector<int> full_attention_layers(int blocks, int num_full) {
    std::vector<int> out;
    if (num_full <= 0 || blocks <= 0) {
        return out;
    }
    if (num_full >= blocks) {
        for (int i = 0; i < blocks; ++i) {
            out.push_back(i);
        }
        return out;
    }
    if (num_full == 1) {
        return {0};
    }
    if (num_full == 3) {
        out = {0, blocks / 2, blocks - 1};
    } else {
        for (int k = 0; k < num_full; ++k) {
            const long num = static_cast<long>(k) * (blocks - 1);
            const int idx = static_cast<int>((2 * num + (num_full - 1)) / (2L * (num_full - 1)));
            out.push_back(idx);
        }
    }
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline AttnSpec layer_attn_spec(const ModelConfig& cfg, int layer) {
    const auto full = full_attention_layers(cfg.blocks, cfg.num_full_attn);
    AttnSpec spec;
    spec.rope = cfg.rope;
    spec.rope_base = cfg.rope_base;
    if (std::find(full.begin(), full.end(), layer) != full.end()) {
        spec.kind = AttnKind::Global;
    } else {
        spec.kind = AttnKind::SlidingWindow;
        spec.window = cfg.window;
    }
    return spec;
}

// Wiring of one block: which KV group it reads and whether it owns the K/V
// projections (a follower owns none, reusing the group owner's cache).
struct BlockWiring {
    int layer = 0;
    AttnSpec spec;
    int kv_group = 0;
    std::optional<int> shares_kv_with; // owner layer when this one is a follower
};

inline std::vector<BlockWiring> build_wiring(const ModelConfig& cfg) {
    std::vector<BlockWiring> w(cfg.blocks);
    if (!cfg.kv_share_map.empty()) {
        // explicit map: owner of each group is its lowest layer
        std::map<int, int> owner;
        for (int l = 0; l < cfg.blocks; ++l) {
            w[l].layer = l;
            w[l].spec = layer_attn_spec(cfg, l);
            w[l].kv_group = cfg.kv_share_map[l];
            auto it = owner.find(w[l].kv_group);
            if (it == owner.end()) {
                owner[w[l].kv_group] = l;
            } else {
                w[l].shares_kv_with = it->second;
            }
        }
        return w;
    }
    int next_group = 0;
    int open_owner = -1, open_count = 0;
    AttnSpec open_spec;
    for (int l = 0; l < cfg.blocks; ++l) {
        w[l].layer = l;
        w[l].spec = layer_attn_spec(cfg, l);
        const bool shareable =
            cfg.kv_share_factor > 1 &&
            (w[l].spec.kind != AttnKind::Global || cfg.share_global);
        if (open_owner >= 0 && shareable && open_count < cfg.kv_share_factor &&
            w[l].spec == open_spec) {
            w[l].kv_group = w[open_owner].kv_group;
            w[l].shares_kv_with = open_owner;
            ++open_count;
            continue;
        }
        w[l].kv_group = next_group++;
        if (shareable) {
            open_owner = l;
            open_count = 1;
            open_spec = w[l].spec;
        } else {
            open_owner = -1;
        }
    }
    return w;
}

inline int unique_kv_groups(const ModelConfig& cfg) {
    const auto w = build_wiring(cfg);
    int mx = -1;
    for (const auto& b : w) {
        mx = std::max(mx, b.kv_group);
    }
    return mx + 1;
}

inline std::vector<std::string> ModelConfig::validate() const {
    std::vector<std::string> bad;
    if (blocks < 1) bad.push_back("blocks must be >= 1");
    if (hidden < 1) bad.push_back("hidden must be >= 1");
    if (vocab < 2) bad.push_back("vocab must be >= 2");
    if (mlp_hidden < 1) bad.push_back("mlp_hidden must be >= 1");
    if (meta_tokens < 0) bad.push_back("meta_tokens must be >= 0");
    if (attn_heads < 1) {
        bad.push_back("attn_heads must be >= 1");
    } else {
        if (query_groups < 1) {
            bad.push_back("query_groups must be >= 1");
        } else if (attn_heads % query_groups != 0) {
            bad.push_back("attn_heads (" + std::to_string(attn_heads) +
                          ") must be a multiple of query_groups (" +
                          std::to_string(query_groups) + ")");
        }
        if (hidden % attn_heads != 0) {
            bad.push_back("hidden must be divisible by attn_heads");
        } else if (rope && head_dim() % 2 != 0) {
            bad.push_back("rotary embedding needs an even head_dim");
        }
    }
    if (num_full_attn < 0 || num_full_attn > blocks) {
        bad.push_back("num_full_attn must be in [0, blocks]");
    }
    if (num_full_attn < blocks && window < 1) {
        bad.push_back("window must be >= 1 when any layer uses sliding-window attention");
    }
    if (ssm_enabled) {
        if (d_inner < 1) bad.push_back("d_inner must be >= 1");
        if (ssm_state < 1) bad.push_back("ssm_state must be >= 1");
        if (head_count_ssm < 0) bad.push_back("head_count_ssm must be >= 0");
        const int heads = head_count_ssm > 0 ? head_count_ssm : (ssm_state > 0 ? d_inner / ssm_state : 0);
        if (heads > 0 && d_inner % heads != 0) {
            bad.push_back("d_inner must be divisible by the SSM head count");
        }
        if (conv_enabled && conv_width < 1) {
            bad.push_back("conv_width must be >= 1");
        }
    }
    if (attn_heads >= 1 && d_inner >= 1 && d_inner % attn_heads != 0) {
        bad.push_back("d_inner must be divisible by attn_heads (value head width)");
    }
    if (kv_share_factor < 1) {
        bad.push_back("kv_share_factor must be >= 1");
    }
    if (!kv_share_map.empty()) {
        if (static_cast<int>(kv_share_map.size()) != blocks) {
            bad.push_back("kv_share_map must assign a group to every layer");
        } else {
            // groups must hold consecutive layers with identical attention spec
            std::map<int, std::vector<int>> groups;
            for (int l = 0; l < blocks; ++l) {
                groups[kv_share_map[l]].push_back(l);
            }
            for (const auto& [gid, layers] : groups) {
                for (std::size_t i = 1; i < layers.size(); ++i) {
                    if (layers[i] != layers[i - 1] + 1) {
                        bad.push_back("kv group " + std::to_string(gid) +
                                      " holds non-consecutive layers");
                        break;
                    }
                    if (!(layer_attn_spec(*this, layers[i]) ==
                          layer_attn_spec(*this, layers[0]))) {
                        bad.push_back("kv group " + std::to_string(gid) +
                                      " mixes attention specs");
                        break;
                    }
                }
            }
        }
    }
    return bad;
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

inline long long param_count(const ModelConfig& cfg) {
    const long long d = cfg.hidden, C = cfg.d_inner;
    const long long dh = cfg.head_dim(), dhv = cfg.v_head_dim();
    const long long G = cfg.query_groups;
    long long total = 0;
    total += static_cast<long long>(cfg.vocab) * d; // embedding
    if (!cfg.tie_embedding) {
        total += static_cast<long long>(cfg.vocab) * d;
    }
    total += static_cast<long long>(cfg.meta_tokens) * d;
    total += d; // final norm gain
    const auto wiring = build_wiring(cfg);
    for (const auto& b : wiring) {
        total += 2 * d; // pre-norm gains
        total += d * (static_cast<long long>(cfg.attn_heads) * dh); // W_Q
        if (!b.shares_kv_with) {
            total += d * (G * dh);  // W_K
            total += d * (G * dhv); // W_V
        }
        if (cfg.ssm_enabled) {
            total += d * C;     // W_SSM
            total += d * C;     // W_G
            if (cfg.conv_enabled) {
                total += C * cfg.conv_width + C;
            }
            total += C * cfg.ssm_state;     // A
            total += 2 * C * cfg.ssm_state; // W_B, W_C
            total += C * C;                 // W_dt
            total += 2 * C;                 // norm_ssm gain + beta2
        }
        total += 2 * C;  // norm_attn gain + beta1
        total += C * d;  // W_out
        total += 3 * d * cfg.mlp_hidden; // gated MLP
    }
    return total;
}

// Attention-only sibling of a hybrid config: SSM branch removed, every layer
// global, sharing off. With rebalance, mlp_hidden absorbs the removed
// parameters so totals stay comparable.
inline ModelConfig reference_transformer_config(const ModelConfig& cfg, bool rebalance = true) {
    ModelConfig ref = cfg;
    ref.name = cfg.name + "-ref-transformer";
    ref.ssm_enabled = false;
    ref.num_full_attn = ref.blocks;
    ref.kv_share_factor = 1;
    ref.kv_share_map.clear();
    ref.conv_enabled = false;
    if (rebalance) {
        const long long gap = param_count(cfg) - param_count(ref);
        if (gap > 0) {
            ref.mlp_hidden += static_cast<int>(gap / (3LL * ref.hidden * ref.blocks));
        }
    }
    return ref;
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

inline ModelConfig preset_config(std::string name) {
    std::transform(name.begin(), name.end(), name.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    ModelConfig c;
    c.name = name;
    if (name == "toy") {
        return c; // struct defaults
    }
    if (name == "125m") {
        c.blocks = 24;
        c.hidden = 512;
        c.ssm_state = 16;
        c.attn_heads = 8;
        c.query_groups = 4;
        c.num_full_attn = 3;
        c.window = 1024;
        c.mlp_hidden = 1664;
        c.d_inner = 1024;
        c.meta_tokens = 128;
        c.vocab = 32768;
        return c;
    }
    if (name == "350m") {
        c.blocks = 32;
        c.hidden = 768;
        c.ssm_state = 16;
        c.attn_heads = 12;
        c.query_groups = 4;
        c.num_full_attn = 3;
        c.window = 1024;
        c.mlp_hidden = 2432;
        c.d_inner = 1536;
        c.meta_tokens = 128;
        c.vocab = 32768;
        return c;
    }
    if (name == "1.5b") {
        c.blocks = 32;
        c.hidden = 1600;
        c.ssm_state = 16;
        c.attn_heads = 25;
        c.query_groups = 5;
        c.num_full_attn = 3;
        c.window = 1024;
        c.mlp_hidden = 5504;
        c.d_inner = 3200;
        c.meta_tokens = 128;
        c.vocab = 32768;
        return c;
    }
    if (name == "llama3.2-1b") {
        // attention-only reference for cache accounting: 16 layers, 8 KV
        // heads of width 64, all global, unshared.
        c.blocks = 16;
        c.hidden = 2048;
        c.attn_heads = 32;
        c.query_groups = 8;
        c.num_full_attn = 16;
        c.window = 1024;
        c.mlp_hidden = 8192;
        c.d_inner = 2048; // value heads match key width: 2048/32 = 64
        c.ssm_enabled = false;
        c.conv_enabled = false;
        c.kv_share_factor = 1;
        c.meta_tokens = 0;
        c.vocab = 128256;
        return c;
    }
    throw ValidationError({"unknown preset '" + name + "' (expected toy, 125m, 350m, 1.5b, "
                           "llama3.2-1b)"});
}

// ---------------------------------------------------------------------------
// Canonical text form (used in checkpoints and resolved-config snapshots)
// ---------------------------------------------------------------------------

inline std::string config_to_text(const ModelConfig& c) {
    std::ostringstream os;
    os << "name=" << c.name << "\n";
    os << "blocks=" << c.blocks << "\n";
    os << "hidden=" << c.hidden << "\n";
    os << "vocab=" << c.vocab << "\n";
    os << "mlp_hidden=" << c.mlp_hidden << "\n";
    os << "tie_embedding=" << (c.tie_embedding ? 1 : 0) << "\n";
    os << "meta_tokens=" << c.meta_tokens << "\n";
    os << "attn_heads=" << c.attn_heads << "\n";
    os << "query_groups=" << c.query_groups << "\n";
    os << "num_full_attn=" << c.num_full_attn << "\n";
    os << "window=" << c.window << "\n";
    os << "rope=" << (c.rope ? 1 : 0) << "\n";
    os << "rope_base=" << c.rope_base << "\n";
    os << "rope_offset_meta=" << (c.rope_offset_meta ? 1 : 0) << "\n";
    os << "ssm_enabled=" << (c.ssm_enabled ? 1 : 0) << "\n";
    os << "d_inner=" << c.d_inner << "\n";
    os << "ssm_state=" << c.ssm_state << "\n";
    os << "head_count_ssm=" << c.head_count_ssm << "\n";
    os << "conv_enabled=" << (c.conv_enabled ? 1 : 0) << "\n";
    os << "conv_width=" << c.conv_width << "\n";
    os << "kv_share_factor=" << c.kv_share_factor << "\n";
    os << "share_global=" << (c.share_global ? 1 : 0) << "\n";
    if (!c.kv_share_map.empty()) {
        os << "kv_share_map=";
        for (std::size_t i = 0; i < c.kv_share_map.size(); ++i) {
            os << (i ? "," : "") << c.kv_share_map[i];
        }
        os << "\n";
    }
    os << "norm_eps=" << c.norm_eps << "\n";
    return os.str();
}

// Applies one key=value pair; returns false for unknown keys.
inline bool apply_config_kv(ModelConfig& c, const std::string& k, const std::string& v) {
    auto as_int = [](const std::string& s) { return std::stoi(s); };
    auto as_bool = [](const std::string& s) { return s == "1" || s == "true"; };
    if (k == "name") c.name = v;
    else if (k == "blocks") c.blocks = as_int(v);
    else if (k == "hidden") c.hidden = as_int(v);
    else if (k == "vocab") c.vocab = as_int(v);
    else if (k == "mlp_hidden") c.mlp_hidden = as_int(v);
    else if (k == "tie_embedding") c.tie_embedding = as_bool(v);
    else if (k == "meta_tokens") c.meta_tokens = as_int(v);
    else if (k == "attn_heads") c.attn_heads = as_int(v);
    else if (k == "query_groups") c.query_groups = as_int(v);
    else if (k == "num_full_attn") c.num_full_attn = as_int(v);
    else if (k == "window") c.window = as_int(v);
    else if (k == "rope") c.rope = as_bool(v);
    else if (k == "rope_base") c.rope_base = std::stod(v);
    else if (k == "rope_offset_meta") c.rope_offset_meta = as_bool(v);
    else if (k == "ssm_enabled") c.ssm_enabled = as_bool(v);
    else if (k == "d_inner") c.d_inner = as_int(v);
    else if (k == "ssm_state") c.ssm_state = as_int(v);
    else if (k == "head_count_ssm") c.head_count_ssm = as_int(v);
    else if (k == "conv_enabled") c.conv_enabled = as_bool(v);
    else if (k == "conv_width") c.conv_width = as_int(v);
    else if (k == "kv_share_factor") c.kv_share_factor = as_int(v);
    else if (k == "share_global") c.share_global = as_bool(v);
    else if (k == "norm_eps") c.norm_eps = std::stod(v);
    else if (k == "kv_share_map") {
        c.kv_share_map.clear();
        std::istringstream vs(v);
        std::string tok;
        while (std::getline(vs, tok, ',')) {
            c.kv_share_map.push_back(as_int(tok));
        }
    } else {
        return false;
    }
    return true;
}

inline ModelConfig config_from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError({"bad config line: '" + line + "'"});
        }
        const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (!apply_config_kv(c, k, v)) {
            throw ValidationError({"unknown config key '" + k + "'"});
        }
    }
    return c;
}

} // namespace hylm
