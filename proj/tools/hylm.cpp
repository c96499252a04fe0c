// hylm: desk-scale hybrid attention/SSM language model lab.
//
// Subcommands: train, eval, analyze, cache, export. Every run is driven by a
// flat key=value config (see docs/config-format.md); outputs are CSV/JSON.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hylm/analysis.hpp"
#include "hylm/cache.hpp"
#include "hylm/checkpoint.hpp"
#include "hylm/meta_tokens.hpp"
#include "hylm/model.hpp"
#include "hylm/report_io.hpp"
#include "hylm/runconfig.hpp"
#include "hylm/training.hpp"

namespace fs = std::filesystem;
using namespace hylm;

namespace {

constexpr const char* kUsage = R"(usage: hylm <command> [options]

commands:
  train    --config FILE --out DIR [--force]
  eval     --checkpoint FILE --out DIR [--config FILE] [--task kv_recall|needle]
           [--pairs N] [--episodes N] [--lengths a,b,c] [--depths x,y,z]
           [--seed N] [--cached] [--force]
  analyze  --checkpoint FILE --out DIR --which LIST (maps,entropy,erf,categories,importance)
           (--text STR | --text-file FILE) [--no-bos] [--max-len N]
           [--pairs N] [--episodes N] [--seed N] [--force]
  cache    (--preset NAME | --config FILE) --seq-len N [--out DIR] [--force]
  export   --checkpoint FILE [--out DIR] [--force]

exit codes: 0 ok, 2 validation error, 3 numeric failure, 4 i/o error
)";

struct Args {
    std::map<std::string, std::string> kv;
    std::set<std::string> flags;

    bool has(const std::string& k) const { return kv.count(k) || flags.count(k); }
    std::string get(const std::string& k, const std::string& fallback = "") const {
        auto it = kv.find(k);
        return it == kv.end() ? fallback : it->second;
    }
    std::string require(const std::string& k) const {
        auto it = kv.find(k);
        if (it == kv.end()) {
            throw ValidationError({"missing required option --" + k});
        }
        return it->second;
    }
};

Args parse_args(int argc, char** argv, int from) {
    static const std::set<std::string> bool_flags{"force", "cached", "no-bos"};
    Args a;
    for (int i = from; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) != 0) {
            throw ValidationError({"unexpected argument '" + arg + "'"});
        }
        arg = arg.substr(2);
        if (bool_flags.count(arg)) {
            a.flags.insert(arg);
        } else {
            if (i + 1 >= argc) {
                throw ValidationError({"option --" + arg + " needs a value"});
            }
            a.kv[arg] = argv[++i];
        }
    }
    return a;
}

void write_file(const fs::path& path, const std::string& content, bool force) {
    if (fs::exists(path) && !force) {
        throw IoError("refusing to overwrite '" + path.string() + "' (pass --force)");
    }
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    os << content;
    if (!os) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

void check_collision(const fs::path& path, bool force) {
    if (fs::exists(path) && !force) {
        throw IoError("refusing to overwrite '" + path.string() + "' (pass --force)");
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open '" + path + "'");
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

SequenceSampler make_sampler(const RunConfig& rc) {
    if (rc.task == "corpus") {
        if (rc.corpus_path.empty()) {
            throw ValidationError({"train.task=corpus requires train.corpus=<path>"});
        }
        return corpus_sampler(read_text_file(rc.corpus_path), rc.seq_len);
    }
    if (rc.task == "kv_recall") {
        KvRecallTask task;
        task.n_pairs = rc.kv_pairs;
        return task.sampler();
    }
    if (rc.task == "needle") {
        NeedleTask task;
        task.context_length = rc.needle_len;
        task.depth = rc.needle_depth;
        return task.sampler();
    }
    throw ValidationError({"unknown train.task '" + rc.task + "'"});
}

template <class Real>
int run_train(const RunConfig& rc, const fs::path& out, bool force) {
    rc.model.check();
    check_collision(out / "checkpoint.hylm", force);
    check_collision(out / "loss.csv", force);
    check_collision(out / "config.resolved.cfg", force);

    auto model = build_model<Real>(rc.model, rc.seed);
    auto sampler = make_sampler(rc);
    auto trace = train(model, sampler, rc.train_options());

    write_file(out / "config.resolved.cfg", runconfig_to_text(rc), force);
    write_file(out / "loss.csv", loss_trace_csv(trace), force);
    auto container = model_to_container(model, "trained by hylm train");
    auto init = precompute_init(model);
    append_init_blobs(container, init);
    if (fs::exists(out / "checkpoint.hylm") && !force) {
        throw IoError("refusing to overwrite checkpoint (pass --force)");
    }
    write_container((out / "checkpoint.hylm").string(), container);
    std::printf("trained %ld steps: loss %.6f -> %.6f\n", rc.steps, trace.front().loss,
                trace.back().loss);
    std::printf("checkpoint: %s\n", (out / "checkpoint.hylm").string().c_str());
    return 0;
}

int cmd_train(const Args& a) {
    auto rc = runconfig_from_file(a.require("config"));
    const fs::path out = a.get("out", "out");
    const bool force = a.has("force");
    if (rc.precision == "f32") {
        return run_train<float>(rc, out, force);
    }
    return run_train<double>(rc, out, force);
}

int cmd_eval(const Args& a) {
    auto model = load_checkpoint<double>(a.require("checkpoint"));
    RunConfig rc;
    if (a.has("config")) {
        rc = runconfig_from_file(a.get("config"));
    }
    const std::string task = a.get("task", rc.eval_task);
    const int episodes = std::stoi(a.get("episodes", std::to_string(rc.eval_episodes)));
    const std::uint64_t seed = std::stoull(a.get("seed", std::to_string(rc.seed)));
    const bool cached = a.has("cached") || rc.eval_cached;
    const fs::path out = a.get("out", "out");
    const bool force = a.has("force");

    if (task == "kv_recall") {
        const int pairs = std::stoi(a.get("pairs", std::to_string(rc.kv_pairs)));
        const double acc = eval_kv_recall(model, pairs, episodes, seed, cached);
        write_file(out / "eval.json", kv_recall_json(pairs, episodes, acc).dump(2) + "\n",
                   force);
        write_file(out / "eval.csv",
                   "pairs,episodes,accuracy\n" + std::to_string(pairs) + "," +
                       std::to_string(episodes) + "," + fmt_double(acc) + "\n",
                   force);
        std::printf("kv_recall pairs=%d episodes=%d accuracy=%.4f\n", pairs, episodes, acc);
        return 0;
    }
    if (task == "needle") {
        std::vector<int> lengths = rc.eval_lengths;
        std::vector<double> depths = rc.eval_depths;
        if (a.has("lengths")) {
            lengths = hylm::detail::parse_int_list(a.get("lengths"));
        }
        if (a.has("depths")) {
            depths = hylm::detail::parse_double_list(a.get("depths"));
        }
        auto grid = eval_needle(model, lengths, depths, episodes, seed, cached);
        write_file(out / "eval.csv", needle_grid_csv(grid), force);
        write_file(out / "eval.json", needle_grid_json(grid).dump(2) + "\n", force);
        for (const auto& c : grid) {
            std::printf("needle len=%d depth=%.2f accuracy=%.4f\n", c.length, c.depth,
                        c.accuracy);
        }
        return 0;
    }
    throw ValidationError({"unknown eval task '" + task + "'"});
}

int cmd_analyze(const Args& a) {
    auto model = load_checkpoint<double>(a.require("checkpoint"));
    const fs::path out = a.get("out", "out");
    const bool force = a.has("force");
    std::set<std::string> which;
    {
        std::istringstream is(a.get("which", "entropy,erf,categories"));
        std::string tok;
        while (std::getline(is, tok, ',')) {
            which.insert(tok);
        }
    }
    static const std::set<std::string> known{"maps", "entropy", "erf", "categories",
                                             "importance"};
    for (const auto& w : which) {
        if (!known.count(w)) {
            throw ValidationError({"unknown analysis '" + w + "'"});
        }
    }

    if (which.count("maps") || which.count("entropy") || which.count("erf") ||
        which.count("categories")) {
        std::string text;
        if (a.has("text")) {
            text = a.get("text");
        } else if (a.has("text-file")) {
            text = read_text_file(a.get("text-file"));
        } else {
            throw ValidationError({"analyze needs --text or --text-file"});
        }
        auto tokens = ByteTokenizer::encode(text, !a.has("no-bos"));
        for (auto& t : tokens) {
            if (t >= model.cfg.vocab) {
                t = t % model.cfg.vocab;
            }
        }
        AnalysisOptions opts;
        opts.max_length = std::stoul(a.get("max-len", "512"));
        auto rep = analyze_maps(model, tokens, opts);
        write_file(out / "analysis.json",
                   analysis_report_json(rep, which.count("maps") > 0).dump(2) + "\n", force);
        write_file(out / "analysis.csv", analysis_report_csv(rep), force);
        if (which.count("erf")) {
            std::printf("erf_total=%s erf_attn=%s erf_ssm=%s\n",
                        fmt_double(rep.erf_total).c_str(), fmt_double(rep.erf_attn).c_str(),
                        fmt_double(rep.erf_ssm).c_str());
        }
    }

    if (which.count("importance")) {
        const int pairs = std::stoi(a.get("pairs", "1"));
        const int episodes = std::stoi(a.get("episodes", "32"));
        const std::uint64_t seed = std::stoull(a.get("seed", "0"));
        std::function<double(const Model<double>&)> evaluate =
            [&](const Model<double>& m) { return eval_kv_recall(m, pairs, episodes, seed); };
        auto sweep = importance_sweep(model, evaluate);
        write_file(out / "importance.csv", importance_csv(sweep), force);
        write_file(out / "importance.json", importance_json(sweep).dump(2) + "\n", force);
        std::printf("importance sweep over %zu layers written\n", sweep.size());
    }
    return 0;
}

int cmd_cache(const Args& a) {
    ModelConfig cfg;
    if (a.has("preset")) {
        cfg = preset_config(a.get("preset"));
    } else if (a.has("config")) {
        cfg = runconfig_from_file(a.get("config")).model;
    } else {
        throw ValidationError({"cache needs --preset or --config"});
    }
    cfg.check();
    const long L = std::stol(a.require("seq-len"));
    auto rep = cache_bytes(cfg, L);
    auto recon = cache_reconciliation(cfg, L);
    auto j = cache_report_json(rep, recon);
    const auto macs = flops_estimate(cfg, L);
    j["macs"] = flops_json(macs);
    if (a.has("out")) {
        write_file(fs::path(a.get("out")) / "cache.json", j.dump(2) + "\n", a.has("force"));
    }
    std::printf("%s L=%ld total_MB=%.1f (kv %.1f MB, ssm state %.3f MB), %.2f GMAC/seq\n",
                cfg.name.c_str(), L, rep.total_mb, rep.kv_bytes / 1e6, rep.ssm_bytes / 1e6,
                static_cast<double>(macs.total()) / 1e9);
    for (const auto& r : recon) {
        std::printf("  layout: %-58s %8.2f MB\n", r.label.c_str(), r.total_mb);
    }
    return 0;
}

int cmd_export(const Args& a) {
    auto model = load_checkpoint<double>(a.require("checkpoint"));
    auto j = export_params_json(model);
    if (a.has("out")) {
        write_file(fs::path(a.get("out")) / "params.json", j.dump(2) + "\n", a.has("force"));
        std::printf("exported %lld parameters\n", j["param_count"].get<long long>());
    } else {
        std::printf("%s\n", j.dump(2).c_str());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fputs(kUsage, stderr);
        return 2;
    }
    const std::string cmd = argv[1];
    try {
        const Args args = parse_args(argc, argv, 2);
        if (cmd == "train") {
            return cmd_train(args);
        }
        if (cmd == "eval") {
            return cmd_eval(args);
        }
        if (cmd == "analyze") {
            return cmd_analyze(args);
        }
        if (cmd == "cache") {
            return cmd_cache(args);
        }
        if (cmd == "export") {
            return cmd_export(args);
        }
        std::fputs(kUsage, stderr);
        return 2;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const CacheError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
}
