#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <string>

#include "cfsp/checkpoint.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(CFSP_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, p)) r.output += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

/// A toy workspace shared by the tests in this file.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    const auto r = cli("toy --out " + root().string() + " --tokens 20000 --heldout 4096 --seed 3");
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path root() { return dir_->path(); }
  static std::string model() { return (root() / "model").string(); }
  static std::string corpus() { return (root() / "corpus").string(); }

  static inline TempDir* dir_ = nullptr;
};

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

}  // namespace

TEST_F(CliTest, PruneIsDeterministicAndVerifies) {
  const std::string common = " --model " + model() + " --corpus " + corpus() +
                             " --gamma 0.5 --alpha 1 --metric angular --multiple 8 --samples 8 --calib-seq-len 64";
  const auto a = cli("prune" + common + " --out " + (root() / "pa").string());
  ASSERT_EQ(a.code, 0) << a.output;
  const auto b = cli("prune" + common + " --out " + (root() / "pb").string());
  ASSERT_EQ(b.code, 0) << b.output;
  for (const char* f : {"model/weights.bin", "model/manifest.json", "plan.json", "summary/summary.bin"}) {
    EXPECT_EQ(cfsp::read_file(root() / "pa" / f), cfsp::read_file(root() / "pb" / f)) << f;
  }
  const auto v = cli("verify --model " + model() + " --pruned " + (root() / "pa").string() + " --tol 1e-4");
  EXPECT_EQ(v.code, 0) << v.output;
  EXPECT_EQ(v.output.substr(0, 4), "PASS");
}

TEST_F(CliTest, VerifyRejectsMismatchedPair) {
  const std::string common = " --model " + model() + " --corpus " + corpus() + " --multiple 8 --samples 4 --calib-seq-len 32";
  ASSERT_EQ(cli("prune" + common + " --gamma 0.5 --out " + (root() / "v1").string()).code, 0);
  ASSERT_EQ(cli("prune" + common + " --gamma 0.5 --fine magnitude --out " + (root() / "v2").string()).code, 0);
  // Plan from one run, weights from the other.
  const auto r = cli("verify --model " + model() + " --pruned " + (root() / "v2").string() + " --plan " +
                     (root() / "v1" / "plan.json").string());
  EXPECT_NE(r.code, 0);
}

TEST_F(CliTest, SparsityIsRetentionSugarWithLogLine) {
  const std::string base = " --model " + model() + " --corpus " + corpus() + " --multiple 8 --samples 4 --calib-seq-len 32";
  ASSERT_EQ(cli("prune" + base + " --gamma 0.5 --out " + (root() / "g").string()).code, 0);
  const auto s = cli("prune" + base + " --sparsity 0.5 --out " + (root() / "s").string());
  ASSERT_EQ(s.code, 0);
  EXPECT_NE(s.output.find("retention gamma = 0.5"), std::string::npos);
  EXPECT_EQ(cfsp::read_file(root() / "g" / "plan.json"), cfsp::read_file(root() / "s" / "plan.json"));
  const auto both = cli("prune" + base + " --sparsity 0.5 --gamma 0.5 --out " + (root() / "x").string());
  EXPECT_EQ(both.code, 2);
}

TEST_F(CliTest, ConfigFileWithFlagOverride) {
  const auto cfg = root() / "run.json";
  cfsp::write_json(cfg, {{"gamma", 0.25},
                         {"multiple", 8},
                         {"metric", "cosine"},
                         {"calibration", {{"n_samples", 4}, {"seq_len", 32}}},
                         {"recovery", {{"steps", 3}}}});
  const auto r = cli("prune --config " + cfg.string() + " --model " + model() + " --corpus " + corpus() +
                     " --gamma 0.75 --out " + (root() / "c").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto plan = cfsp::read_json(root() / "c" / "plan.json");
  EXPECT_EQ(plan["provenance"]["gamma"].get<double>(), 0.75);
  EXPECT_EQ(plan["provenance"]["metric"].get<std::string>(), "cosine");

  cfsp::write_json(cfg, {{"gama", 0.5}});
  const auto bad = cli("prune --config " + cfg.string() + " --model " + model());
  EXPECT_EQ(bad.code, 2);
  EXPECT_EQ(first_line(bad.output).substr(0, 9), "E_CONFIG:");
}

TEST_F(CliTest, ErrorsAreSingleLineWithDistinctCodes) {
  const auto cfg = cli("prune --model " + model() + " --out " + (root() / "e1").string() + " --metric manhattan");
  EXPECT_EQ(cfg.code, 2);
  EXPECT_EQ(cfg.output.find("E_CONFIG:"), 0u);
  EXPECT_EQ(std::count(cfg.output.begin(), cfg.output.end(), '\n'), 1);
  EXPECT_FALSE(fs::exists(root() / "e1"));

  const auto input = cli("eval --model " + model() + " --corpus " + (root() / "missing").string() + " --reps 0");
  EXPECT_NE(input.code, 0);
  EXPECT_NE(input.code, 2);

  // Truncated weights are a validation-class failure with its own code.
  const auto broken = root() / "broken";
  fs::copy(root() / "model", broken);
  const auto bytes = cfsp::read_file(broken / "weights.bin");
  cfsp::write_file(broken / "weights.bin", bytes.substr(0, bytes.size() / 2));
  const auto t = cli("calibrate --model " + broken.string() + " --corpus " + corpus() + " --out " +
                     (root() / "e2").string());
  EXPECT_EQ(t.code, 9);
  EXPECT_EQ(t.output.find("E_TRUNCATED:"), 0u);
  EXPECT_FALSE(fs::exists(root() / "e2"));

  const auto big = cli("calibrate --model " + model() + " --corpus " + corpus() + " --samples 100000 --out " +
                       (root() / "e3").string());
  EXPECT_EQ(big.code, 11);
  EXPECT_FALSE(fs::exists(root() / "e3"));
}

TEST_F(CliTest, RecoverEvalBenchAblate) {
  const auto p = (root() / "rp").string();
  ASSERT_EQ(cli("prune --model " + model() + " --corpus " + corpus() +
                " --gamma 0.5 --multiple 8 --samples 4 --calib-seq-len 32 --out " + p)
                .code,
            0);
  const auto rec = cli("recover --model " + p + " --corpus " + corpus() + " --steps 3 --batch 2 --train-seq-len 16 --lr 1e-2 --out " +
                       (root() / "rr").string());
  ASSERT_EQ(rec.code, 0) << rec.output;
  const auto csv = cfsp::read_file(root() / "rr" / "loss.csv");
  EXPECT_EQ(csv.substr(0, 10), "step,loss\n");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_TRUE(fs::exists(root() / "rr" / "adapters" / "manifest.json"));

  const auto ev = cli("eval --model dense=" + model() + " --model pruned=" + p + " --corpus " +
                      (root() / "heldout").string() + " --reps 3 --seq-len 32 --out " + (root() / "rr").string());
  ASSERT_EQ(ev.code, 0) << ev.output;
  EXPECT_NE(ev.output.find("speedup"), std::string::npos);
  EXPECT_TRUE(fs::exists(root() / "rr" / "report.csv"));

  const auto be = cli("bench --model " + model() + " --reps 3 --seq-len 16");
  EXPECT_EQ(be.code, 0) << be.output;
  EXPECT_NE(be.output.find("median_ms"), std::string::npos);

  const auto ab = cli("ablate --model " + model() + " --corpus " + (root() / "heldout").string() +
                      " --gamma 0.5 --multiple 8 --samples 4 --calib-seq-len 32 --variants table5 --out " +
                      (root() / "ab").string());
  ASSERT_EQ(ab.code, 0) << ab.output;
  const auto table = cfsp::read_file(root() / "ab" / "ablation.csv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 9);
  EXPECT_NE(table.find("Ours"), std::string::npos);
}
