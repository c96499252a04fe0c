#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hylm/cache.hpp"
#include "hylm/model.hpp"

namespace hylm {

// Token-level view of a sequence with meta positions prepended. The learnable
// embeddings themselves live in Model::meta_r; this is the position/loss
// bookkeeping layer.
struct AugmentedSequence {
    int meta_count = 0;
    std::vector<int> tokens; // real tokens (BOS first when the encoder emits one)

    std::size_t length() const { return static_cast<std::size_t>(meta_count) + tokens.size(); }

    bool is_meta(std::size_t pos) const { return pos < static_cast<std::size_t>(meta_count); }

    // Loss mask over the combined sequence: zero on meta positions (they carry
    // no labels) and on the final position (no next-token target).
    std::vector<double> loss_mask() const {
        std::vector<double> w(length(), 0.0);
        for (std::size_t i = meta_count; i < length(); ++i) {
            w[i] = 1.0;
        }
        if (!w.empty()) {
            w.back() = 0.0;
        }
        return w;
    }
};

inline AugmentedSequence prepend(std::span<const int> tokens, int meta_count) {
    if (meta_count < 0) {
        throw ContractError("prepend: meta_count must be >= 0");
    }
    AugmentedSequence s;
    s.meta_count = meta_count;
    s.tokens.assign(tokens.begin(), tokens.end());
    return s;
}

// Frozen per-layer KV entries and SSM states after consuming the meta tokens
// alone. Computed offline once per parameter set; seeding a decode session
// from it reproduces the prepended forward exactly.
template <class Real>
struct PrecomputedInit {
    CacheState<Real> cache;
    std::uint64_t fingerprint = 0;

    explicit PrecomputedInit(const ModelConfig& cfg) : cache(cfg) {}
};

template <class Real>
PrecomputedInit<Real> precompute_init(const Model<Real>& model) {
    PrecomputedInit<Real> init(model.cfg);
    init.fingerprint = model.fingerprint();
    if (model.cfg.meta_tokens > 0) {
        forward<Real>(model, std::span<const int>{}, &init.cache);
    } else {
        init.cache.meta_consumed = true; // nothing to precompute
    }
    init.cache.param_fingerprint = init.fingerprint;
    return init;
}

// Fresh decode cache seeded with the precomputed state. Rejects inits built
// from different (stale) parameters.
template <class Real>
CacheState<Real> seeded_cache(const PrecomputedInit<Real>& init, const Model<Real>& model) {
    if (init.fingerprint != model.fingerprint()) {
        throw CacheError("seeded_cache: precomputed init is stale (parameters changed since it "
                         "was built)");
    }
    return init.cache; // copy; the init itself stays immutable
}

} // namespace hylm
