#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "emoe/checkpoint.hpp"
#include "emoe/report.hpp"

using namespace emoe;

namespace {

const fs::path kWork = fs::temp_directory_path() / "emoe_cli_test";

struct CliRun {
  int code;
  std::string err;
};

CliRun run(const std::string& args, const std::string& env = "") {
  const fs::path log = kWork / "stderr.txt";
  const std::string cmd = "cd " + kWork.string() + " && " + env + " SOURCE_DATE_EPOCH=1700000000 " + EMOE_CLI + " " +
                          args + " > /dev/null 2> " + log.string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const char* kTinyConfig = R"({
  "sim": {"n_bins": 32, "bin_width_ns": 0.2},
  "model": {"hidden": 8, "conv_blocks": 1, "layers": 1, "heads": 2, "ff_mult": 2, "head_hidden": 4,
            "critic_hidden": [6, 4], "gate_hidden": 5},
  "train": {"epochs": 2, "batch_size": 16, "n_test": 10}
})";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    std::ofstream(kWork / "tiny.json") << kTinyConfig;
    ASSERT_EQ(run("simulate --out tiny --n 60 --seed 5 --config tiny.json").code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(kWork); }
};

}  // namespace

TEST_F(Cli, SimulateFormatArithmetic) {
  ASSERT_EQ(run("simulate --out ten --n 10 --seed 1").code, 0);
  const json m = json::parse(slurp(kWork / "ten/manifest.json"));
  EXPECT_EQ(m["n_samples"], 10);
  EXPECT_EQ(fs::file_size(kWork / "ten/signals.f32"), 10u * 256u * 4u);
  EXPECT_EQ(fs::file_size(kWork / "ten/targets.f32"), 10u * 2u * 4u);
}

TEST_F(Cli, SimulateIsReproducible) {
  ASSERT_EQ(run("simulate --out a --n 12 --seed 9").code, 0);
  ASSERT_EQ(run("simulate --out b --n 12 --seed 9").code, 0);
  for (const char* f : {"manifest.json", "signals.f32", "targets.f32"})
    EXPECT_EQ(slurp(kWork / "a" / f), slurp(kWork / "b" / f)) << f;
  ASSERT_EQ(run("simulate --out c --n 12 --seed 10").code, 0);
  EXPECT_NE(slurp(kWork / "a/signals.f32"), slurp(kWork / "c/signals.f32"));
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("simulate --out z --n 0").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("train --data tiny").code, 2);
  const CliRun bad = run("train --data tiny --config tiny.json --out x.ckpt --ablation no_such_thing");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("no_quality_gating"), std::string::npos);
  EXPECT_EQ(run("train --data tiny --config tiny.json --out x.ckpt --phases 1,1").code, 2);
  EXPECT_EQ(run("ablate --data tiny --suite table9 --seeds 1 --out ab").code, 2);
  EXPECT_EQ(run("simulate --out z --n 5", "EMOE_SEED=abc").code, 2);
}

TEST_F(Cli, MissingDatasetIsIoError) {
  const CliRun r = run("train --data no_data_here --config tiny.json --out x.ckpt");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("no_data_here"), std::string::npos);
}

TEST_F(Cli, PhaseTransitionsInHistory) {
  std::ofstream(kWork / "seventy.json") << R"({"model": {"hidden": 8, "conv_blocks": 1, "layers": 1, "heads": 2,
    "ff_mult": 2, "head_hidden": 4, "critic_hidden": [6, 4], "gate_hidden": 5},
    "train": {"batch_size": 32, "n_test": 10}})";
  ASSERT_EQ(run("simulate --out small --n 40 --seed 2 --config tiny.json").code, 0);
  ASSERT_EQ(run("train --data small --config seventy.json --out p.ckpt --phases 3,8,59").code, 0);
  const auto hist = lines(kWork / "p.ckpt.history.jsonl");
  ASSERT_EQ(hist.size(), 70u);
  std::vector<std::size_t> transitions;
  int prev = 0;
  for (const auto& l : hist) {
    const json e = json::parse(l);
    if (e["phase"].get<int>() != prev) transitions.push_back(e["epoch"]);
    prev = e["phase"];
  }
  EXPECT_EQ(transitions, (std::vector<std::size_t>{0, 3, 11}));
}

TEST_F(Cli, GateInputLengthLogged) {
  ASSERT_EQ(run("simulate --out full256 --n 20 --seed 4").code, 0);
  std::ofstream(kWork / "one.json") << R"({"train": {"epochs": 1, "batch_size": 16, "n_test": 4}})";
  const CliRun r = run("train --data full256 --config one.json --out g.ckpt --ablation no_quality_gating");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("gate input length 68"), std::string::npos) << r.err;
}

TEST_F(Cli, EvalReportAndPlots) {
  ASSERT_EQ(run("train --data tiny --config tiny.json --out e.ckpt").code, 0);
  ASSERT_EQ(run("eval --ckpt e.ckpt --data tiny --report e.csv --plots plots").code, 0);
  const auto rows = lines(kWork / "e.csv");
  ASSERT_EQ(rows.size(), 1u + 10u + 1u);
  EXPECT_EQ(rows.back().rfind("summary", 0), 0u);
  EXPECT_NE(rows.front().find("L.NRMSE(f)"), std::string::npos);
  std::size_t svgs = 0;
  for (const auto& f : fs::directory_iterator(kWork / "plots")) {
    EXPECT_EQ(f.path().extension(), ".svg");
    EXPECT_EQ(slurp(f.path()).rfind("<svg", 0), 0u);
    ++svgs;
  }
  EXPECT_EQ(svgs, 5u);
  // a rerun gives identical report and plots
  ASSERT_EQ(run("eval --ckpt e.ckpt --data tiny --report e2.csv --plots plots2").code, 0);
  EXPECT_EQ(slurp(kWork / "e.csv"), slurp(kWork / "e2.csv"));
  EXPECT_EQ(slurp(kWork / "plots/attention.svg"), slurp(kWork / "plots2/attention.svg"));

  ASSERT_EQ(run("simulate --out wide --n 10 --seed 1").code, 0);
  EXPECT_EQ(run("eval --ckpt e.ckpt --data wide --report w.csv").code, 2);
}

TEST_F(Cli, SeedOverridesAndDeterminism) {
  ASSERT_EQ(run("train --data tiny --config tiny.json --out s1.ckpt", "EMOE_SEED=7").code, 0);
  ASSERT_EQ(run("train --data tiny --config tiny.json --out s2.ckpt", "EMOE_SEED=7").code, 0);
  ASSERT_EQ(run("train --data tiny --config tiny.json --out s3.ckpt", "EMOE_SEED=8").code, 0);
  EXPECT_EQ(slurp(kWork / "s1.ckpt"), slurp(kWork / "s2.ckpt"));
  EXPECT_EQ(slurp(kWork / "s1.ckpt.history.jsonl"), slurp(kWork / "s2.ckpt.history.jsonl"));
  EXPECT_NE(slurp(kWork / "s1.ckpt"), slurp(kWork / "s3.ckpt"));
  EXPECT_EQ(load_checkpoint(kWork / "s3.ckpt").config.train.seed, 8u);
}

TEST_F(Cli, AblateSuites) {
  ASSERT_EQ(run("ablate --data tiny --config tiny.json --suite table1 --seeds 1 --out ab").code, 0);
  auto rows = lines(kWork / "ab/table1.csv");
  ASSERT_EQ(rows.size(), 17u);
  for (const char* col : {"D.NRMSE", "D.AbsRel", "D.RMSElog", "L.NRMSE(f)", "Q.Depth", "Q.Life"})
    EXPECT_NE(rows[0].find(col), std::string::npos) << col;
  EXPECT_NE(rows[0].find("D.NRMSE std"), std::string::npos);
  // --seeds 1 reports zero dispersion
  const std::string last = rows.back();
  EXPECT_NE(last.find("full,"), std::string::npos);
  EXPECT_NE(last.find(",0,"), std::string::npos);
  ASSERT_EQ(run("ablate --data tiny --config tiny.json --suite appendixD --seeds 1 --out ab").code, 0);
  EXPECT_EQ(lines(kWork / "ab/appendixD.csv").size(), 13u);
}

TEST(Report, PerfectPredictionsGiveZeroError) {
  Predictions p;
  p.index = {0, 1, 2};
  p.truth = {1.0, 0.5, 1.5, 0.9, 2.0, 1.2};
  p.physical = p.truth;
  p.quality.assign(12, 0.9);
  const std::string csv = eval_csv(p, evaluate(p));
  EXPECT_NE(csv.find("summary,,,,,,,,,,0,0,0,0,0.9,0.9"), std::string::npos) << csv;
}

TEST(Report, SuiteStatistics) {
  SuiteResult r;
  Metrics a, b;
  a.d_nrmse = 0.1;
  b.d_nrmse = 0.3;
  r.per_seed = {a, b};
  summarize(r);
  EXPECT_NEAR(r.mean[0], 0.2, 1e-15);
  EXPECT_NEAR(r.std[0], std::sqrt(0.02), 1e-15);
  EXPECT_TRUE(std::isnan(r.mean[4]));
  r.per_seed = {a};
  summarize(r);
  EXPECT_EQ(r.std[0], 0.0);
}
