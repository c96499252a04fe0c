#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hylm/model.hpp"

namespace hylm {

// ---------------------------------------------------------------------------
// Byte-level tokens
// ---------------------------------------------------------------------------

// Byte vocabulary plus a BOS special. No external tokenizer dependencies.
struct ByteTokenizer {
    static constexpr int kBos = 256;
    static constexpr int kVocab = 257;

    static std::vector<int> encode(std::string_view text, bool add_bos = true) {
        std::vector<int> out;
        out.reserve(text.size() + 1);
        if (add_bos) {
            out.push_back(kBos);
        }
        for (unsigned char c : text) {
            out.push_back(static_cast<int>(c));
        }
        return out;
    }

    static std::string decode(std::span<const int> tokens) {
        std::string out;
        for (int t : tokens) {
            if (t >= 0 && t < 256) {
                out.push_back(static_cast<char>(t));
            }
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Warmup-stable-decay schedule
// ---------------------------------------------------------------------------

// Linear warmup over the first warmup_frac of steps, constant peak plateau,
// then a linear decay to lr_min over the final decay_frac.
struct WsdSchedule {
    long total_steps = 2000;
    double warmup_frac = 0.01;
    double decay_frac = 0.20;
    double lr_peak = 3e-4; // desk-scale default; pass 3e-3 for the published recipe
    double lr_min = 1e-5;

    long warmup_steps() const {
        return static_cast<long>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
    }
    long decay_start() const {
        return total_steps -
               static_cast<long>(std::ceil(decay_frac * static_cast<double>(total_steps)));
    }
};

inline double lr_at(const WsdSchedule& s, long step) {
    if (step < 0 || step > s.total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(s.total_steps) + "]");
    }
    const long W = s.warmup_steps();
    const long D0 = s.decay_start();
    if (W > D0) {
        throw ContractError("lr_at: warmup and decay phases overlap");
    }
    if (step <= W) {
        // ratio first: exactly 0 at step 0 and exactly lr_peak at step W
        return W == 0 ? s.lr_peak
                      : s.lr_peak * (static_cast<double>(step) / static_cast<double>(W));
    }
    if (step < D0) {
        return s.lr_peak;
    }
    const double u = static_cast<double>(step - D0) / static_cast<double>(s.total_steps - D0);
    return s.lr_peak * (1.0 - u) + s.lr_min * u; // exact at both endpoints
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adaptive moments with decoupled weight decay and global-norm gradient
// clipping. Decay applies to matrices only (gains, biases and rescale vectors
// are exempt).
template <class Real>
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip = 1.0;

    std::vector<std::vector<double>> m, v;
    long t = 0;

    void step(std::vector<std::pair<std::string, Tensor<Real>>>& params, double lr) {
        if (m.empty()) {
            m.resize(params.size());
            v.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m[i].assign(params[i].second.size(), 0.0);
                v[i].assign(params[i].second.size(), 0.0);
            }
        }
        double norm_sq = 0;
        for (auto& [name, p] : params) {
            for (double g : p.grad()) {
                norm_sq += g * g;
            }
        }
        const double norm = std::sqrt(norm_sq);
        const double scale_g = clip > 0 && norm > clip ? clip / norm : 1.0;
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].second;
            auto vals = p.value_mut();
            auto grads = p.grad();
            const bool decay_this = p.rank() == 2 && weight_decay > 0;
            for (std::size_t j = 0; j < vals.size(); ++j) {
                const double g = static_cast<double>(grads[j]) * scale_g;
                m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
                v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
                const double mhat = m[i][j] / bc1;
                const double vhat = v[i][j] / bc2;
                double upd = lr * mhat / (std::sqrt(vhat) + eps);
                if (decay_this) {
                    upd += lr * weight_decay * static_cast<double>(vals[j]);
                }
                vals[j] = static_cast<Real>(static_cast<double>(vals[j]) - upd);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Sequence sources
// ---------------------------------------------------------------------------

using SequenceSampler = std::function<std::vector<int>(RngStream&)>;

// Random windows of a byte corpus, BOS-prefixed.
inline SequenceSampler corpus_sampler(std::string corpus, int seq_len) {
    if (corpus.size() < static_cast<std::size_t>(seq_len) + 1) {
        throw ContractError("corpus shorter than the training sequence length");
    }
    return [corpus = std::move(corpus), seq_len](RngStream& rng) {
        const std::size_t start = rng.below(corpus.size() - seq_len);
        return ByteTokenizer::encode(std::string_view(corpus).substr(start, seq_len));
    };
}

// Key/value recall episodes: pairs "k=v;" then a query "?k=" whose next token
// is the value. Keys are distinct; the queried key is always one of the
// presented ones.
struct KvRecallTask {
    int n_pairs = 1;
    int key_alphabet = 16;   // keys 'a'..'
    int value_alphabet = 16; // values 'A'..

    struct Episode {
        std::vector<int> tokens; // BOS + prompt + answer
        std::size_t answer_index; // position of the answer token in `tokens`
        int answer = 0;
    };

    Episode sample(RngStream& rng) const {
        std::vector<int> keys(key_alphabet);
        for (int i = 0; i < key_alphabet; ++i) {
            keys[i] = 'a' + i;
        }
        // partial Fisher-Yates for distinct keys
        for (int i = 0; i < n_pairs; ++i) {
            const std::size_t j = i + rng.below(key_alphabet - i);
            std::swap(keys[i], keys[j]);
        }
        std::string text;
        std::vector<int> values(n_pairs);
        for (int i = 0; i < n_pairs; ++i) {
            values[i] = 'A' + static_cast<int>(rng.below(value_alphabet));
            text.push_back(static_cast<char>(keys[i]));
            text.push_back('=');
            text.push_back(static_cast<char>(values[i]));
            text.push_back(';');
        }
        const int q = static_cast<int>(rng.below(n_pairs)); // presented key only
        text.push_back('?');
        text.push_back(static_cast<char>(keys[q]));
        text.push_back('=');
        Episode ep;
        ep.tokens = ByteTokenizer::encode(text);
        ep.answer = values[q];
        ep.answer_index = ep.tokens.size();
        ep.tokens.push_back(ep.answer);
        return ep;
    }

    SequenceSampler sampler() const {
        return [task = *this](RngStream& rng) { return task.sample(rng).tokens; };
    }
};

// Needle retrieval episodes: seeded filler text, one needle sentence
// "#k=v#" at a depth fraction, and a trailing query "?k=". The filler
// alphabet excludes the needle delimiters, so the needle occurs exactly once
// and the answer is recoverable from it alone.
struct NeedleTask {
    int context_length = 256; // bytes of haystack (query and needle included)
    double depth = 0.5;       // 0 = needle at the start, 1 = at the end
    int key_alphabet = 16;
    int value_alphabet = 16;

    struct Episode {
        std::vector<int> tokens;
        std::size_t answer_index;
        int answer = 0;
        std::size_t needle_offset = 0; // byte offset of the needle in the text
    };

    Episode sample(RngStream& rng) const {
        static constexpr char kFiller[] = "bcdfghjklmnpqrstvwxz ";
        const int key = 'a' + static_cast<int>(rng.below(key_alphabet));
        const int value = 'A' + static_cast<int>(rng.below(value_alphabet));
        const std::string needle = std::string("#") + static_cast<char>(key) + "=" +
                                   static_cast<char>(value) + "#";
        const std::string query = std::string("?") + static_cast<char>(key) + "=";
        const long filler_len =
            std::max<long>(0, context_length - static_cast<long>(needle.size()) -
                                  static_cast<long>(query.size()));
        std::string text(filler_len, ' ');
        for (auto& ch : text) {
            ch = kFiller[rng.below(sizeof(kFiller) - 1)];
        }
        const auto offset =
            static_cast<std::size_t>(std::llround(depth * static_cast<double>(filler_len)));
        text.insert(std::min<std::size_t>(offset, text.size()), needle);
        text += query;
        Episode ep;
        ep.tokens = ByteTokenizer::encode(text);
        ep.answer = value;
        ep.answer_index = ep.tokens.size();
        ep.tokens.push_back(ep.answer);
        ep.needle_offset = std::min<std::size_t>(offset, static_cast<std::size_t>(filler_len));
        return ep;
    }

    SequenceSampler sampler() const {
        return [task = *this](RngStream& rng) { return task.sample(rng).tokens; };
    }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TraceRow {
    long step = 0;
    double lr = 0;
    double loss = 0;
};

struct TrainOptions {
    long steps = 2000;
    int batch = 4;
    std::uint64_t seed = 0;
    WsdSchedule schedule;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double clip = 1.0;
};

// Deterministic given the seed: the data stream, the step order, and the
// optimizer state all derive from it. Throws NumericError on a non-finite
// loss, naming the step and learning rate.
template <class Real>
std::vector<TraceRow> train(Model<Real>& model, const SequenceSampler& sample,
                            TrainOptions opts) {
    opts.schedule.total_steps = opts.steps;
    auto params = model.parameters();
    AdamW<Real> optim;
    optim.weight_decay = opts.weight_decay;
    optim.beta1 = opts.beta1;
    optim.beta2 = opts.beta2;
    optim.clip = opts.clip;
    RngStream rng(opts.seed);
    std::vector<TraceRow> trace;
    trace.reserve(opts.steps);
    for (long step = 0; step < opts.steps; ++step) {
        const double lr = lr_at(opts.schedule, step);
        model.zero_grads();
        double loss_sum = 0;
        for (int b = 0; b < opts.batch; ++b) {
            auto seq = sample(rng);
            auto loss = scale(lm_loss(model, seq), Real(1) / Real(opts.batch));
            backward(loss);
            loss_sum += static_cast<double>(loss.item()) * opts.batch;
        }
        const double loss_avg = loss_sum / opts.batch;
        if (!std::isfinite(loss_avg)) {
            throw NumericError("training aborted: non-finite loss at step " +
                               std::to_string(step) + " (lr=" + std::to_string(lr) + ")");
        }
        optim.step(params, lr);
        trace.push_back({step, lr, loss_avg});
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Exact-match accuracy of the argmax prediction at each episode's answer
// position, using a full forward pass.
template <class Real, class Task>
double eval_exact_match(const Model<Real>& model, const Task& task, int episodes,
                        std::uint64_t seed, bool use_cache = false) {
    NoGradGuard guard;
    RngStream rng(seed);
    int hits = 0;
    for (int e = 0; e < episodes; ++e) {
        auto ep = task.sample(rng);
        std::vector<int> prompt(ep.tokens.begin(),
                                ep.tokens.begin() + static_cast<long>(ep.answer_index));
        Tensor<Real> logits;
        if (use_cache) {
            CacheState<Real> cache(model.cfg);
            logits = forward(model, prompt, &cache);
        } else {
            logits = forward(model, prompt);
        }
        const std::size_t last = logits.rows() - 1;
        int best = 0;
        Real best_v = logits.at(last, 0);
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits.at(last, j) > best_v) {
                best_v = logits.at(last, j);
                best = static_cast<int>(j);
            }
        }
        if (best == ep.answer) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(episodes);
}

template <class Real>
double eval_kv_recall(const Model<Real>& model, int n_pairs, int episodes, std::uint64_t seed,
                      bool use_cache = false) {
    KvRecallTask task;
    task.n_pairs = n_pairs;
    return eval_exact_match(model, task, episodes, seed, use_cache);
}

struct NeedleCell {
    int length = 0;
    double depth = 0;
    double accuracy = 0;
};

// Grid evaluation over (context length, needle depth) cells, one seeded
// generator per cell so the grid is reproducible cell-by-cell.
template <class Real>
std::vector<NeedleCell> eval_needle(const Model<Real>& model, const std::vector<int>& lengths,
                                    const std::vector<double>& depths, int episodes,
                                    std::uint64_t seed, bool use_cache = false) {
    std::vector<NeedleCell> grid;
    for (int len : lengths) {
        for (double depth : depths) {
            NeedleTask task;
            task.context_length = len;
            task.depth = depth;
            RngStream salt(seed);
            const std::uint64_t cell_seed =
                salt.fork(static_cast<std::uint64_t>(len) * 1000003ULL +
                          static_cast<std::uint64_t>(depth * 1000.0))
                    .next_u64();
            NeedleCell cell;
            cell.length = len;
            cell.depth = depth;
            cell.accuracy = eval_exact_match(model, task, episodes, cell_seed, use_cache);
            grid.push_back(cell);
        }
    }
    return grid;
}

} // namespace hylm
