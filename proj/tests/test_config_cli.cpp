#include <doctest.h>

#include <fstream>
#include <sstream>

#include "multiformer/cli.hpp"
#include "multiformer/config.hpp"
#include "multiformer/errors.hpp"
#include "multiformer/training.hpp"
#include "test_util.hpp"

using namespace multiformer;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  return {code, o.str(), e.str()};
}

fs::path write_config(const fs::path& dir, const RunConfig& cfg) {
  const auto p = dir / "config.toml";
  std::ofstream(p) << emit_toml(config_to_tree(cfg));
  return p;
}

/// Tiny dataset and config shared by the CLI tests.
struct Fixture {
  fs::path dir, data, config;
  Fixture(const std::string& name) {
    dir = testutil::temp_dir(name);
    data = dir / "data";
    REQUIRE(cli({"synth", "--out", data.string(), "--sequences", "2", "--frames", "2"}).code == 0);
    RunConfig cfg = testutil::tiny_run();
    cfg.train.steps = 2;
    cfg.train.log_every = 1;
    config = write_config(dir, cfg);
  }
};

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("TOML round trip reproduces the config") {
    RunConfig c = testutil::tiny_run(DecoderVariant::kSequential);
    c.experiment = "round trip";
    c.eval.lambdas = {0.2, 0.4};
    c.depth.merge = DepthMerge::kCopyPaste;
    c.train.deep_supervision = false;
    const auto text = emit_toml(config_to_tree(c));
    const RunConfig back = config_from_tree(parse_toml(text));
    CHECK(config_to_tree(back) == config_to_tree(c));
    CHECK(emit_toml(config_to_tree(back)) == text);
  }

  TEST_CASE("every default key is accepted and unknown keys are rejected") {
    CHECK_NOTHROW(config_from_tree(default_config_tree()));
    auto tree = default_config_tree();
    tree["train"]["stepz"] = 3;
    try {
      config_from_tree(tree);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("train.stepz") != std::string::npos);
    }
  }

  TEST_CASE("dotted overrides") {
    const RunConfig c = config_with_overrides(RunConfig{}, {"train.deep_supervision=off", "model.variant=unified",
                                                            "depth.tau=0.5", "eval.kappa=[1,2]"});
    CHECK_FALSE(c.train.deep_supervision);
    CHECK(c.model.variant == DecoderVariant::kUnified);
    CHECK(c.depth.tau == 0.5);
    CHECK(c.eval.kappas == std::vector<int>{1, 2});
    CHECK_THROWS_AS(config_with_overrides(RunConfig{}, {"model.nope=1"}), ConfigError);
    CHECK_THROWS_AS(config_with_overrides(RunConfig{}, {"depth.tau=0"}), ConfigError);
    CHECK_THROWS_AS(config_with_overrides(RunConfig{}, {"model.variant=bogus"}), ConfigError);
  }

  TEST_CASE("collect_overrides accepts the three spellings") {
    const auto o = collect_overrides({"--train.steps", "5", "--model.N_Q=7", "depth.tau=0.2"});
    CHECK(o == std::vector<std::string>{"train.steps=5", "model.N_Q=7", "depth.tau=0.2"});
  }

  TEST_CASE("shipped configs load; desk matches the built-in defaults") {
    const fs::path dir = fs::path(MULTIFORMER_SOURCE_DIR) / "configs";
    RunConfig desk = load_config((dir / "desk.toml").string());
    desk.experiment = RunConfig{}.experiment;
    CHECK(config_to_tree(desk) == config_to_tree(RunConfig{}));
    RunConfig overfit = load_config((dir / "overfit.toml").string());
    CHECK(overfit.model.N_Q == 8);
    overfit.experiment = RunConfig{}.experiment;
    overfit.model.N_Q = RunConfig{}.model.N_Q;
    CHECK(config_to_tree(overfit) == config_to_tree(RunConfig{}));
    const RunConfig paper = load_config((dir / "paper.toml").string());
    CHECK(paper.train.steps == 20000);
    CHECK(paper.train.lr == 5e-4);
  }

  TEST_CASE("every decoder variant tag parses") {
    for (auto v : all_variants()) CHECK(parse_variant(to_string(v)) == v);
    CHECK_THROWS_AS(parse_variant("mystery"), ConfigError);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("synth writes 8 sequences of 6 frames, byte-identical on rerun") {
    const auto dir = testutil::temp_dir("cli_synth");
    REQUIRE(cli({"synth", "--out", (dir / "a").string()}).code == 0);
    REQUIRE(cli({"synth", "--out", (dir / "b").string()}).code == 0);
    int manifests = 0, frames = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), dir / "a");
      if (e.path().filename() == "manifest.json") ++manifests;
      if (e.path().parent_path().filename() == "image") ++frames;
      CHECK(testutil::read_bytes(e.path()) == testutil::read_bytes(dir / "b" / rel));
    }
    CHECK(manifests == 8);
    CHECK(frames == 48);
  }

  TEST_CASE("synth rejects an invalid size and names the flag") {
    const auto r = cli({"synth", "--out", testutil::temp_dir("cli_bad").string(), "--height", "50"});
    CHECK(r.code == kExitUserError);
    CHECK(r.err.find("--height") != std::string::npos);
  }

  TEST_CASE("train with a missing dataset fails with a user error") {
    const auto dir = testutil::temp_dir("cli_missing");
    const auto r = cli({"train", "--data", (dir / "nothing").string(), "--out", (dir / "run").string()});
    CHECK(r.code == kExitUserError);
    CHECK(r.err.find("nothing") != std::string::npos);
  }

  TEST_CASE("unknown subcommand or unknown override is a user error") {
    CHECK(cli({"frobnicate"}).code == kExitUserError);
    Fixture fx("cli_unknown");
    CHECK(cli({"train", "--config", fx.config.string(), "--data", fx.data.string(), "--out",
               (fx.dir / "r").string(), "--train.bogus", "1"})
              .code == kExitUserError);
  }

  TEST_CASE("train, eval and infer end to end with overrides plumbed through") {
    Fixture fx("cli_e2e");
    const auto run = fx.dir / "run";
    const auto r = cli({"train", "--config", fx.config.string(), "--data", fx.data.string(), "--out", run.string(),
                        "--train.deep_supervision", "off"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    for (const char* f : {"config.toml", "log.jsonl", "loss_curve.svg", "metrics.json", "metrics.txt",
                          "dvpq_heatmap.svg", "checkpoint.pt"})
      CHECK_MESSAGE(fs::exists(run / f), f);
    CHECK_FALSE(checkpoint_config(run / "checkpoint.pt").train.deep_supervision);
    CHECK_FALSE(load_config((run / "config.toml").string()).train.deep_supervision);

    const auto e = cli({"eval", "--checkpoint", (run / "checkpoint.pt").string(), "--data", fx.data.string(), "--out",
                        (fx.dir / "eval").string()});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    const auto rep = nlohmann::json::parse(testutil::read_bytes(fx.dir / "eval" / "metrics.json"));
    CHECK(rep.contains("pq"));
    CHECK(rep["dvpq"].size() == 6);

    const auto i = cli({"infer", "--checkpoint", (run / "checkpoint.pt").string(), "--data", fx.data.string(),
                        "--out", (fx.dir / "infer").string()});
    REQUIRE_MESSAGE(i.code == 0, i.err);
    CHECK(fs::exists(fx.dir / "infer"));
  }

  TEST_CASE("eval --gt-as-prediction is perfect and reports every cell") {
    Fixture fx("cli_gt");
    const auto r = cli({"eval", "--gt-as-prediction", "--data", fx.data.string(), "--out", (fx.dir / "e").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto rep = nlohmann::json::parse(testutil::read_bytes(fx.dir / "e" / "metrics.json"));
    CHECK(rep["pq"]["all"].get<double>() == 100.0);
    // two-frame sequences: windows of 3 and 4 frames do not exist
    REQUIRE(rep["dvpq"].size() == 6);
    CHECK(rep["skipped_kappa"] == nlohmann::json::array({3, 4}));
    for (const auto& c : rep["dvpq"]) CHECK(c["all"].get<double>() == 100.0);
    CHECK(rep["abs_rel"].get<double>() == 0.0);
  }

  TEST_CASE("eval with a mismatched class table is a user error") {
    Fixture fx("cli_classes");
    RunConfig cfg = testutil::tiny_run();
    cfg.model.num_classes = 7;
    cfg.train.steps = 1;
    const auto run = fx.dir / "run";
    Multiformer m = build_model(cfg);
    fs::create_directories(run);
    save_checkpoint(run / "checkpoint.pt", m, nullptr, cfg, 1);
    const auto r = cli({"eval", "--checkpoint", (run / "checkpoint.pt").string(), "--data", fx.data.string()});
    CHECK(r.code == kExitUserError);
    CHECK(r.err.find("class-table mismatch") != std::string::npos);
  }

  TEST_CASE("ablate over all variants yields one row each and reruns identically") {
    Fixture fx("cli_ablate");
    const auto r = cli({"ablate", "--config", fx.config.string(), "--data", fx.data.string(), "--out",
                        (fx.dir / "a").string(), "--train.steps", "1"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto rows = nlohmann::json::parse(testutil::read_bytes(fx.dir / "a" / "ablation.json"));
    REQUIRE(rows.size() == 5);
    for (const auto& row : rows) CHECK(row["status"] == "ok");
    CHECK(fs::exists(fx.dir / "a" / "ablation.md"));

    const auto r2 = cli({"ablate", "--config", fx.config.string(), "--data", fx.data.string(), "--out",
                         (fx.dir / "b").string(), "--train.steps", "1", "--variants", "hybrid"});
    REQUIRE(r2.code == 0);
    const auto rows2 = nlohmann::json::parse(testutil::read_bytes(fx.dir / "b" / "ablation.json"));
    REQUIRE(rows2.size() == 1);
    for (const auto& row : rows)
      if (row["arm"] == "hybrid") {
        CHECK(row["dvpq"] == rows2[0]["dvpq"]);
        CHECK(row["pq"] == rows2[0]["pq"]);
        CHECK(row["parameters"] == rows2[0]["parameters"]);
      }
  }

  TEST_CASE("ablate arms and a failing arm does not stop the others") {
    Fixture fx("cli_arms");
    const auto r = cli({"ablate", "--config", fx.config.string(), "--data", fx.data.string(), "--out",
                        (fx.dir / "a").string(), "--train.steps", "1", "--arm", "full:", "--arm",
                        "no_ds:train.deep_supervision=off", "--arm", "huge:data.height=128"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto rows = nlohmann::json::parse(testutil::read_bytes(fx.dir / "a" / "ablation.json"));
    REQUIRE(rows.size() == 3);
    CHECK(rows[0]["status"] == "ok");
    CHECK(rows[1]["status"] == "ok");
    CHECK(rows[2]["status"].get<std::string>().rfind("failed", 0) == 0);
  }
}
