#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "omnibind/error.hpp"
#include "omnibind/pipeline.hpp"
#include "omnibind/serialize.hpp"

using namespace omnibind;
namespace fs = std::filesystem;

namespace {

struct CommandResult {
  int status = -1;
  std::string output;
};

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("omnibind_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CommandResult run_cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "omnibind_cli_output.txt";
  const std::string cmd = std::string(OMNIBIND_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  CommandResult r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.output = read_text(log);
  return r;
}

// Small end-to-end configuration; every stage finishes in a few seconds.
const char* kTinyConfig = R"({
  "world": {"classes": 6, "dim": 16},
  "stage1": {"epochs": 3, "teacher_per_class": 30, "student_per_class": 12, "val_per_class": 4, "heldout_per_class": 6},
  "stage2": {"epochs": 2},
  "dataset": {
    "records_per_class": {"image": 20, "text": 20, "audio": 12, "point_cloud": 12, "event": 12, "touch": 12, "thermal": 12},
    "train_total": 300, "eval_total": 300, "robustness_per_combination": 3
  }
})";

}  // namespace

TEST(RunConfig, JsonRoundTripKeepsHash) {
  RunConfig c;
  c.seed = 99;
  c.stage2.heads = 8;
  c.dataset.proportions = {0.5, 0.2, 0.1, 0.1};
  const RunConfig back = RunConfig::parse(c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(RunConfig, HashIgnoresOutputDirectory) {
  RunConfig a, b;
  b.out = "/somewhere/else";
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 43;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(RunConfig, PartialConfigKeepsDefaults) {
  const RunConfig c = RunConfig::parse(R"({"stage1": {"tau": 0.1}})");
  EXPECT_EQ(c.stage1.temperature, 0.1);
  EXPECT_EQ(c.stage1.lambda_cr, RunConfig{}.stage1.lambda_cr);
  EXPECT_EQ(c.stage2.heads, RunConfig{}.stage2.heads);
}

TEST(RunConfig, ErrorsNameTheFieldPath) {
  auto message = [](const std::string& text) {
    try {
      RunConfig::parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(R"({"stage2": {"lr": "fast"}})").find("stage2.lr"), std::string::npos);
  EXPECT_NE(message(R"({"stage1": {"schedules": {"touch": {"lr": true}}}})").find("stage1.schedules.touch.lr"),
            std::string::npos);
  EXPECT_NE(message(R"({"world": {"clases": 3}})").find("world.clases"), std::string::npos);
  EXPECT_NE(message(R"({"dataset": {"proportions": [46, 15]}})").find("dataset.proportions"), std::string::npos);
  EXPECT_NE(message(R"({"stage2": {"negatives": "hard"}})").find("stage2.negatives"), std::string::npos);
  EXPECT_NE(message("{not json").find("malformed"), std::string::npos);
}

TEST(RunConfig, ValidateRejectsIndivisibleHeads) {
  RunConfig c;
  c.stage2.heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Cli, UnknownSubcommandPrintsUsage) {
  const auto r = run_cli("train-stage3");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("usage:"), std::string::npos);
  EXPECT_EQ(run_cli("").status, 2);
}

TEST(Cli, UnknownFlagIsUsageError) { EXPECT_EQ(run_cli("gen-world --frobnicate 3").status, 2); }

TEST(Cli, GenWorldWritesManifest) {
  const fs::path out = scratch("genworld");
  const auto r = run_cli("gen-world --seed 7 --classes 16 --dim 32 --out " + out.string());
  EXPECT_EQ(r.status, 0) << r.output;
  ASSERT_TRUE(fs::exists(out / "world" / "world.json"));
  const SemanticWorld w = SemanticWorld::load(out / "world");
  EXPECT_EQ(w.num_classes(), 16u);
  EXPECT_EQ(w.dim(), 32u);
  EXPECT_EQ(w.params().seed, 7u);
}

TEST(Cli, MissingPredecessorNamesPath) {
  const fs::path out = scratch("missing");
  ASSERT_EQ(run_cli("gen-world --out " + out.string()).status, 0);
  const auto r = run_cli("train-stage2 --out " + out.string());
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find((out / "stage1" / "stage1.json").string()), std::string::npos) << r.output;

  const fs::path empty = scratch("missing_world");
  const auto b = run_cli("build-data --out " + empty.string());
  EXPECT_EQ(b.status, 1);
  EXPECT_NE(b.output.find("world.json"), std::string::npos);
  EXPECT_EQ(run_cli("report --out " + empty.string()).status, 1);
}

TEST(Cli, MalformedConfigExitsOneWithFieldPath) {
  const fs::path dir = scratch("badconfig");
  write_text(dir / "bad.json", R"({"stage2": {"heads": -4}})");
  const auto r = run_cli("gen-world --config " + (dir / "bad.json").string() + " --out " + dir.string());
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("stage2.heads"), std::string::npos) << r.output;
  const auto missing = run_cli("gen-world --config " + (dir / "nope.json").string());
  EXPECT_EQ(missing.status, 1);
  const auto props = run_cli("gen-world --proportions 46,15,x,17 --out " + dir.string());
  EXPECT_EQ(props.status, 1);
  EXPECT_NE(props.output.find("--proportions"), std::string::npos);
}

TEST(Cli, TinyPipelineEndToEnd) {
  const fs::path out = scratch("tiny");
  write_text(out / "tiny.json", kTinyConfig);
  const std::string common = " --config " + (out / "tiny.json").string() + " --out " + out.string();
  for (const char* stage : {"gen-world", "build-data", "train-stage1", "train-stage2", "eval"}) {
    const auto r = run_cli(std::string(stage) + common);
    ASSERT_EQ(r.status, 0) << stage << ": " << r.output;
  }
  for (const char* f : {"stage1/loss_curve.csv", "stage2/af/fusion.json", "stage2/af_noneg/fusion.json",
                        "stage2/linear/fusion.json", "stage2/outer/fusion.json", "eval/predictions_af.csv",
                        "eval/robustness.csv", "eval/noise_ablation.csv", "eval/summary.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_EQ(read_text(out / "stage1" / "loss_curve.csv").rfind("epoch,step,modality,loss_in,loss_cr,loss_se,total\n", 0), 0u);
  EXPECT_EQ(read_text(out / "eval" / "predictions_af.csv").rfind("sample_id,combination,true,pred,correct\n", 0), 0u);
  const std::string hash = RunConfig::parse(kTinyConfig).hash();
  EXPECT_NE(read_text(out / "stage2" / "af" / "fusion.json").find(hash), std::string::npos);
  EXPECT_NE(read_text(out / "eval" / "summary.json").find(hash), std::string::npos);
  for (const char* table : {"2m", "345m", "fusion", "robustness"}) {
    const auto r = run_cli(std::string("report --table ") + table + common);
    EXPECT_EQ(r.status, 0) << table;
    EXPECT_FALSE(r.output.empty());
  }
  EXPECT_EQ(run_cli("report --table 3m" + common).status, 1);

  // Re-running a stage reproduces its artifacts byte for byte.
  const std::string before = read_text(out / "stage2" / "af" / "af.wq.obt");
  const std::string metrics = read_text(out / "eval" / "accuracy_af.csv");
  ASSERT_EQ(run_cli("train-stage2" + common).status, 0);
  ASSERT_EQ(run_cli("eval" + common).status, 0);
  EXPECT_EQ(read_text(out / "stage2" / "af" / "af.wq.obt"), before);
  EXPECT_EQ(read_text(out / "eval" / "accuracy_af.csv"), metrics);
}
