#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hylm/config.hpp"
#include "hylm/training.hpp"

namespace hylm {

// One flat, commented key=value file drives every command; no environment
// variables. An emitted resolved snapshot re-runs identically.
struct RunConfig {
    ModelConfig model;
    std::uint64_t seed = 0;
    std::string precision = "f64"; // f64 for tests/oracles, f32 for toy training

    // training
    std::string task = "corpus"; // corpus | kv_recall | needle
    std::string corpus_path;
    long steps = 2000;
    int batch = 4;
    int seq_len = 64;
    int kv_pairs = 1;
    int needle_len = 256;
    double needle_depth = 0.5;
    WsdSchedule schedule;
    double weight_decay = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double grad_clip = 1.0;

    // evaluation
    std::string eval_task = "kv_recall"; // kv_recall | needle
    std::vector<int> eval_lengths{256, 512, 1024};
    std::vector<double> eval_depths{0.0, 0.5, 1.0};
    int eval_episodes = 64;
    bool eval_cached = false;

    TrainOptions train_options() const {
        TrainOptions o;
        o.steps = steps;
        o.batch = batch;
        o.seed = seed;
        o.schedule = schedule;
        o.schedule.total_steps = steps;
        o.weight_decay = weight_decay;
        o.beta1 = adam_beta1;
        o.beta2 = adam_beta2;
        o.clip = grad_clip;
        return o;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) {
        return "";
    }
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::istringstream is(v);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        out.push_back(std::stoi(trim(tok)));
    }
    return out;
}

inline std::vector<double> parse_double_list(const std::string& v) {
    std::vector<double> out;
    std::istringstream is(v);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        out.push_back(std::stod(trim(tok)));
    }
    return out;
}

} // namespace detail

inline RunConfig runconfig_from_text(const std::string& text) {
    RunConfig rc;
    std::istringstream is(text);
    std::string line;
    std::vector<std::pair<std::string, std::string>> model_overrides;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = detail::trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError({"line " + std::to_string(lineno) +
                                   ": expected key=value, got '" + line + "'"});
        }
        const std::string k = detail::trim(line.substr(0, eq));
        const std::string v = detail::trim(line.substr(eq + 1));
        try {
            if (k == "preset") {
                rc.model = preset_config(v);
            } else if (k.rfind("model.", 0) == 0) {
                model_overrides.emplace_back(k.substr(6), v);
            } else if (k == "seed") {
                rc.seed = std::stoull(v);
            } else if (k == "precision") {
                if (v != "f32" && v != "f64") {
                    throw ValidationError({"precision must be f32 or f64"});
                }
                rc.precision = v;
            } else if (k == "train.task") {
                rc.task = v;
            } else if (k == "train.corpus") {
                rc.corpus_path = v;
            } else if (k == "train.steps") {
                rc.steps = std::stol(v);
            } else if (k == "train.batch") {
                rc.batch = std::stoi(v);
            } else if (k == "train.seq_len") {
                rc.seq_len = std::stoi(v);
            } else if (k == "train.kv_pairs") {
                rc.kv_pairs = std::stoi(v);
            } else if (k == "train.needle_len") {
                rc.needle_len = std::stoi(v);
            } else if (k == "train.needle_depth") {
                rc.needle_depth = std::stod(v);
            } else if (k == "schedule.warmup_frac") {
                rc.schedule.warmup_frac = std::stod(v);
            } else if (k == "schedule.decay_frac") {
                rc.schedule.decay_frac = std::stod(v);
            } else if (k == "schedule.lr_peak") {
                rc.schedule.lr_peak = std::stod(v);
            } else if (k == "schedule.lr_min") {
                rc.schedule.lr_min = std::stod(v);
            } else if (k == "optim.weight_decay") {
                rc.weight_decay = std::stod(v);
            } else if (k == "optim.beta1") {
                rc.adam_beta1 = std::stod(v);
            } else if (k == "optim.beta2") {
                rc.adam_beta2 = std::stod(v);
            } else if (k == "optim.clip") {
                rc.grad_clip = std::stod(v);
            } else if (k == "eval.task") {
                rc.eval_task = v;
            } else if (k == "eval.lengths") {
                rc.eval_lengths = detail::parse_int_list(v);
            } else if (k == "eval.depths") {
                rc.eval_depths = detail::parse_double_list(v);
            } else if (k == "eval.episodes") {
                rc.eval_episodes = std::stoi(v);
            } else if (k == "eval.kv_pairs") {
                rc.kv_pairs = std::stoi(v);
            } else if (k == "eval.cached") {
                rc.eval_cached = (v == "1" || v == "true");
            } else {
                throw ValidationError({"line " + std::to_string(lineno) + ": unknown key '" +
                                       k + "'"});
            }
        } catch (const ValidationError&) {
            throw;
        } catch (const std::exception& e) {
            throw ValidationError({"line " + std::to_string(lineno) + ": bad value for '" + k +
                                   "': " + e.what()});
        }
    }
    for (const auto& [k, v] : model_overrides) {
        if (!apply_config_kv(rc.model, k, v)) {
            throw ValidationError({"unknown model key 'model." + k + "'"});
        }
    }
    return rc;
}

inline RunConfig runconfig_from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open config '" + path + "'");
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return runconfig_from_text(ss.str());
}

// Fully resolved snapshot; parsing it back reproduces the run exactly.
inline std::string runconfig_to_text(const RunConfig& rc) {
    std::ostringstream os;
    os << "# resolved run configuration\n";
    os << "seed=" << rc.seed << "\n";
    os << "precision=" << rc.precision << "\n";
    {
        std::istringstream cfg(config_to_text(rc.model));
        std::string line;
        while (std::getline(cfg, line)) {
            os << "model." << line << "\n";
        }
    }
    os << "train.task=" << rc.task << "\n";
    if (!rc.corpus_path.empty()) {
        os << "train.corpus=" << rc.corpus_path << "\n";
    }
    os << "train.steps=" << rc.steps << "\n";
    os << "train.batch=" << rc.batch << "\n";
    os << "train.seq_len=" << rc.seq_len << "\n";
    os << "train.kv_pairs=" << rc.kv_pairs << "\n";
    os << "train.needle_len=" << rc.needle_len << "\n";
    os << "train.needle_depth=" << rc.needle_depth << "\n";
    os << "schedule.warmup_frac=" << rc.schedule.warmup_frac << "\n";
    os << "schedule.decay_frac=" << rc.schedule.decay_frac << "\n";
    os << "schedule.lr_peak=" << rc.schedule.lr_peak << "\n";
    os << "schedule.lr_min=" << rc.schedule.lr_min << "\n";
    os << "optim.weight_decay=" << rc.weight_decay << "\n";
    os << "optim.beta1=" << rc.adam_beta1 << "\n";
    os << "optim.beta2=" << rc.adam_beta2 << "\n";
    os << "optim.clip=" << rc.grad_clip << "\n";
    os << "eval.task=" << rc.eval_task << "\n";
    os << "eval.lengths=";
    for (std::size_t i = 0; i < rc.eval_lengths.size(); ++i) {
        os << (i ? "," : "") << rc.eval_lengths[i];
    }
    os << "\n";
    os << "eval.depths=";
    for (std::size_t i = 0; i < rc.eval_depths.size(); ++i) {
        os << (i ? "," : "") << rc.eval_depths[i];
    }
    os << "\n";
    os << "eval.episodes=" << rc.eval_episodes << "\n";
    os << "eval.cached=" << (rc.eval_cached ? 1 : 0) << "\n";
    return os.str();
}

} // namespace hylm
