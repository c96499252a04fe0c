#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hylm/checkpoint.hpp"
#include "hylm/runconfig.hpp"
#include "schema_check.hpp"

namespace fs = std::filesystem;
using namespace hylm;
using nlohmann::json;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(HYLM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("hylm_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

json slurp_json(const fs::path& p) { return json::parse(slurp(p)); }

json load_schema(const std::string& name) {
    return json::parse(slurp(fs::path(HYLM_SOURCE_DIR) / "docs" / "schemas" / name));
}

void expect_schema(const json& schema, const json& value) {
    auto bad = hylm::testutil::schema_check(schema, value);
    for (const auto& b : bad) {
        MESSAGE(b);
    }
    CHECK(bad.empty());
}

const std::string kMicroConfig = R"(# micro run for cli tests
precision=f64
seed=7
model.name=cli-micro
model.blocks=2
model.hidden=16
model.vocab=257
model.mlp_hidden=24
model.attn_heads=2
model.query_groups=1
model.num_full_attn=1
model.window=8
model.d_inner=32
model.ssm_state=4
model.meta_tokens=2
train.task=kv_recall
train.kv_pairs=1
train.steps=12
train.batch=1
schedule.lr_peak=1e-3
eval.episodes=8
)";

} // namespace

TEST_CASE("cache subcommand reproduces the published 262 MB figure") {
    auto dir = fresh_dir("cache");
    REQUIRE(run_cli("cache --preset llama3.2-1b --seq-len 8000 --out " + dir.string()) == 0);
    auto j = slurp_json(dir / "cache.json");
    expect_schema(load_schema("cache_report.schema.json"), j);
    CHECK(j["total_MB"].get<double>() == doctest::Approx(262.144).epsilon(1e-9));
    REQUIRE(run_cli("cache --preset 1.5b --seq-len 8000 --out " + dir.string() + " --force") ==
            0);
    auto h = slurp_json(dir / "cache.json");
    CHECK(h.contains("reconciliation"));
    bool close = false;
    for (const auto& row : h["reconciliation"]) {
        if (std::abs(row["total_MB"].get<double>() - 79.0) / 79.0 <= 0.25) {
            close = true;
        }
    }
    CHECK(close);
}

TEST_CASE("train is deterministic at the file level and re-runs from its snapshot") {
    auto dir = fresh_dir("train");
    std::ofstream(dir / "run.cfg") << kMicroConfig;
    REQUIRE(run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                    (dir / "a").string()) == 0);
    REQUIRE(run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                    (dir / "b").string()) == 0);
    CHECK(slurp(dir / "a" / "loss.csv") == slurp(dir / "b" / "loss.csv"));
    CHECK(slurp(dir / "a" / "checkpoint.hylm") == slurp(dir / "b" / "checkpoint.hylm"));
    // the resolved snapshot re-runs bit-identically
    REQUIRE(run_cli("train --config " + (dir / "a" / "config.resolved.cfg").string() +
                    " --out " + (dir / "c").string()) == 0);
    CHECK(slurp(dir / "a" / "loss.csv") == slurp(dir / "c" / "loss.csv"));
    CHECK(slurp(dir / "a" / "checkpoint.hylm") == slurp(dir / "c" / "checkpoint.hylm"));

    // collision refusal without --force
    CHECK(run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                  (dir / "a").string()) == 4);
    CHECK(run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                  (dir / "a").string() + " --force") == 0);
}

TEST_CASE("eval, analyze, export run on a trained checkpoint and validate schemas") {
    auto dir = fresh_dir("pipeline");
    std::ofstream(dir / "run.cfg") << kMicroConfig;
    REQUIRE(run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                    (dir / "t").string()) == 0);
    const std::string ckpt = (dir / "t" / "checkpoint.hylm").string();

    REQUIRE(run_cli("eval --checkpoint " + ckpt + " --task kv_recall --pairs 1 --episodes 8 "
                    "--out " + (dir / "e").string()) == 0);
    expect_schema(load_schema("eval_kv.schema.json"), slurp_json(dir / "e" / "eval.json"));

    REQUIRE(run_cli("eval --checkpoint " + ckpt + " --task needle --lengths 32,48 "
                    "--depths 0,1 --episodes 4 --out " + (dir / "n").string()) == 0);
    expect_schema(load_schema("eval_needle.schema.json"), slurp_json(dir / "n" / "eval.json"));
    CHECK(slurp(dir / "n" / "eval.csv").rfind("length,depth,accuracy\n", 0) == 0);

    REQUIRE(run_cli("analyze --checkpoint " + ckpt + " --which maps,entropy,erf,categories "
                    "--text hello --out " + (dir / "an").string()) == 0);
    auto rep = slurp_json(dir / "an" / "analysis.json");
    expect_schema(load_schema("analysis_report.schema.json"), rep);
    CHECK(rep["heads"][0].contains("map"));

    REQUIRE(run_cli("analyze --checkpoint " + ckpt + " --which importance --pairs 1 "
                    "--episodes 4 --out " + (dir / "imp").string()) == 0);
    expect_schema(load_schema("importance.schema.json"),
                  slurp_json(dir / "imp" / "importance.json"));

    REQUIRE(run_cli("export --checkpoint " + ckpt + " --out " + (dir / "x").string()) == 0);
    expect_schema(load_schema("params_export.schema.json"),
                  slurp_json(dir / "x" / "params.json"));
}

TEST_CASE("erf subcommand on a two-token input with a uniform head gives 0.5") {
    auto dir = fresh_dir("erf");
    ModelConfig cfg;
    cfg.name = "erf-toy";
    cfg.blocks = 1;
    cfg.hidden = 8;
    cfg.attn_heads = 1;
    cfg.query_groups = 1;
    cfg.num_full_attn = 1;
    cfg.window = 8;
    cfg.ssm_enabled = false;
    cfg.conv_enabled = false;
    cfg.d_inner = 8;
    cfg.meta_tokens = 0;
    cfg.mlp_hidden = 8;
    cfg.vocab = 257;
    auto model = build_model<double>(cfg, 1);
    for (auto& v : model.layers[0].head.w_q.value_mut()) {
        v = 0.0; // uniform attention rows
    }
    save_checkpoint((dir / "erf.hylm").string(), model);
    REQUIRE(run_cli("analyze --checkpoint " + (dir / "erf.hylm").string() +
                    " --which erf --text ab --no-bos --out " + (dir / "out").string()) == 0);
    auto rep = slurp_json(dir / "out" / "analysis.json");
    CHECK(rep["erf"]["total"].get<double>() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("exit codes: validation 2, missing file 4") {
    auto dir = fresh_dir("errors");
    std::ofstream(dir / "bad.cfg") << "model.attn_heads=5\nmodel.query_groups=3\n";
    CHECK(run_cli("train --config " + (dir / "bad.cfg").string() + " --out " +
                  (dir / "o").string()) == 2);
    CHECK(run_cli("eval --checkpoint " + (dir / "missing.hylm").string() + " --out " +
                  (dir / "o").string()) == 4);
    CHECK(run_cli("definitely-not-a-command") == 2);
    CHECK(run_cli("cache --seq-len 100") == 2); // neither preset nor config
}

TEST_CASE("checkpoint containers round-trip byte-exactly") {
    auto dir = fresh_dir("roundtrip");
    auto cfg = preset_config("toy");
    cfg.blocks = 2;
    auto model = build_model<double>(cfg, 5);
    save_checkpoint((dir / "m.hylm").string(), model);
    auto loaded = load_checkpoint<double>((dir / "m.hylm").string());
    save_checkpoint((dir / "m2.hylm").string(), loaded);
    CHECK(slurp(dir / "m.hylm") == slurp(dir / "m2.hylm"));
    CHECK(loaded.fingerprint() == model.fingerprint());

    // f32 models save with f32 blobs and load back into f64 analysis models
    auto m32 = build_model<float>(cfg, 5);
    save_checkpoint((dir / "f32.hylm").string(), m32);
    auto up = load_checkpoint<double>((dir / "f32.hylm").string());
    CHECK(up.cfg.blocks == 2);

    // precomputed init travels in the container
    auto container = model_to_container(model);
    auto init = precompute_init(model);
    append_init_blobs(container, init);
    write_container((dir / "with_init.hylm").string(), container);
    auto c2 = read_container((dir / "with_init.hylm").string());
    auto init2 = init_from_container<double>(c2);
    CHECK(init2.fingerprint == init.fingerprint);
    REQUIRE(init2.cache.groups.size() == init.cache.groups.size());
    for (std::size_t g = 0; g < init2.cache.groups.size(); ++g) {
        CHECK(init2.cache.groups[g].k_rows == init.cache.groups[g].k_rows);
        CHECK(init2.cache.groups[g].positions == init.cache.groups[g].positions);
    }
}

TEST_CASE("runconfig text round-trips through the resolved snapshot") {
    auto rc = runconfig_from_text(kMicroConfig);
    auto text = runconfig_to_text(rc);
    auto rc2 = runconfig_from_text(text);
    CHECK(runconfig_to_text(rc2) == text);
    CHECK(config_to_text(rc2.model) == config_to_text(rc.model));
    CHECK(rc2.seed == rc.seed);
    CHECK(rc2.steps == rc.steps);
}
