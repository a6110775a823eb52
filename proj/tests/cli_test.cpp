// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spci/cli.hpp"
#include "spci/verification/oracle.hpp"
#include "test_util.hpp"

namespace spci {
namespace {

namespace fs = std::filesystem;

const fs::path kGolden = SPCI_GOLDEN_DIR;

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::path(::testing::TempDir()) / ("spci_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Runs the built binary and returns its exit status.
int spci_exit(const std::string& args) {
  const std::string cmd = std::string("\"") + SPCI_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int run_quiet(const cli::RunConfig& cfg) {
  std::ostringstream log, err;
  return cli::run(cfg, log, err);
}

cli::RunConfig forward_config(const fs::path& out) {
  cli::RunConfig cfg;
  cfg.subcommand = "forward";
  cfg.out = out.string();
  return cfg;
}

TEST(Forward, ZeroInputReportsZeroTaps) {
  auto cfg = forward_config(fresh_dir("zeros"));
  cfg.input = "zeros";
  ASSERT_EQ(run_quiet(cfg), cli::kOk);
  const std::string s = slurp(fs::path(cfg.out) / "summary.txt");
  for (const char* line : {"p3.min 0\n", "p3.max 0\n", "p3.mean 0\n", "p5.min 0\n", "p5.max 0\n",
                           "p5.mean 0\n", "p3.shape 1,32,8,8\n", "p5.shape 1,128,2,2\n"}) {
    EXPECT_NE(s.find(line), std::string::npos) << line;
  }
}

TEST(Forward, SameSeedGivesIdenticalBytes) {
  for (const char* input : {"random", "checkerboard"}) {
    auto a = forward_config(fresh_dir(std::string("det_a_") + input));
    auto b = forward_config(fresh_dir(std::string("det_b_") + input));
    a.input = b.input = input;
    a.seed = b.seed = 17;
    a.dropout_mode = b.dropout_mode = Mode::train;
    ASSERT_EQ(run_quiet(a), cli::kOk);
    ASSERT_EQ(run_quiet(b), cli::kOk);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(a.out)) {
      EXPECT_EQ(slurp(e.path()), slurp(fs::path(b.out) / e.path().filename())) << e.path();
      ++files;
    }
    EXPECT_EQ(files, 9u);
  }
}

TEST(Forward, CheckerboardTapsMatchGolden) {
  auto cfg = forward_config(fresh_dir("golden"));
  ASSERT_EQ(run_quiet(cfg), cli::kOk);
  for (const char* tap : {"p3", "p5"}) {
    const auto got = io::load_tensor<float>(fs::path(cfg.out) / (std::string(tap) + ".spct"));
    const auto want = io::load_tensor<float>(kGolden / ("checkerboard_" + std::string(tap) + ".spct"));
    ASSERT_EQ(got.shape(), want.shape()) << tap;
    EXPECT_LT(verify::max_rel_error(got, want), 1e-5) << tap;
  }
}

TEST(Forward, SpciTargetWritesOutputAndWeights) {
  auto cfg = forward_config(fresh_dir("spci_target"));
  cfg.target = "spci";
  cfg.input = "random";
  cfg.seed = 3;
  cfg.save_weights = true;
  ASSERT_EQ(run_quiet(cfg), cli::kOk);
  const auto out = io::load_tensor<float>(fs::path(cfg.out) / "out.spct");
  EXPECT_EQ(out.shape(), (Shape{1, 8, 16, 16}));
  const auto p = io::load_spci<float>(fs::path(cfg.out) / "weights" / "spci.manifest");
  EXPECT_EQ(p, (init_spci<float>(8, 8, kDefaultReduction, kDefaultDropout, 3)));

  // Feeding the saved weights back reproduces the output.
  auto again = forward_config(fresh_dir("spci_target_again"));
  again.target = "spci";
  again.input = "random";
  again.seed = 3;
  again.weights = (fs::path(cfg.out) / "weights" / "spci.manifest").string();
  ASSERT_EQ(run_quiet(again), cli::kOk);
  EXPECT_EQ(io::load_tensor<float>(fs::path(again.out) / "out.spct"), out);
}

TEST(Forward, DisableFlagsDropDiagnostics) {
  auto cfg = forward_config(fresh_dir("disable"));
  cfg.disable_pfm = true;
  cfg.spci_at = "p3";
  ASSERT_EQ(run_quiet(cfg), cli::kOk);
  EXPECT_TRUE(fs::exists(fs::path(cfg.out) / "spci_p3.w_s.spct"));
  EXPECT_FALSE(fs::exists(fs::path(cfg.out) / "spci_p3.w_p.spct"));
  EXPECT_FALSE(fs::exists(fs::path(cfg.out) / "spci_p5.w_s.spct"));
}

TEST(Heatmap, HalfGateIsGray128AndStripIsOneByC) {
  const auto d = fresh_dir("gray");
  const fs::path manifest = io::save_spci(make_spci<float>(8, 8), d / "w");
  cli::RunConfig cfg;
  cfg.subcommand = "heatmap";
  cfg.target = "spci";
  cfg.weights = manifest.string();
  cfg.input = "random";
  cfg.size = 6;
  cfg.out = (d / "out").string();
  ASSERT_EQ(run_quiet(cfg), cli::kOk);
  EXPECT_EQ(to_gray(0.5), 128);
  const std::string wp = slurp(d / "out" / "spci.w_p.pgm");
  EXPECT_EQ(wp, "P5\n6 6\n255\n" + std::string(36, static_cast<char>(128)));
  const std::string ws = slurp(d / "out" / "spci.w_s.pgm");
  EXPECT_EQ(ws, "P5\n8 1\n255\n" + std::string(8, static_cast<char>(128)));
  EXPECT_TRUE(fs::exists(d / "out" / "spci.w_c.c7.pgm"));
}

TEST(Heatmap, CheckerboardMatchesGoldenBytes) {
  cli::RunConfig cfg;
  cfg.subcommand = "heatmap";
  cfg.out = fresh_dir("hm_golden").string();
  ASSERT_EQ(run_quiet(cfg), cli::kOk);
  for (const char* name : {"spci_p3.w_s", "spci_p3.w_p", "spci_p3.w_c.c0", "spci_p5.w_s",
                           "spci_p5.w_p"}) {
    EXPECT_EQ(slurp(fs::path(cfg.out) / (std::string(name) + ".pgm")),
              slurp(kGolden / ("checkerboard_" + std::string(name) + ".pgm")))
        << name;
  }
}

TEST(Heatmap, GrayMappingRounds) {
  EXPECT_EQ(to_gray(0.0), 0);
  EXPECT_EQ(to_gray(1.0), 255);
  EXPECT_EQ(to_gray(0.25), 64);  // 63.75
  EXPECT_EQ(to_gray(1e-30), 0);
}

TEST(TrainToy, ZeroLearningRateKeepsLossConstant) {
  cli::RunConfig cfg;
  cfg.subcommand = "train-toy";
  cfg.lr = 0.0;
  cfg.steps = 25;
  cfg.out = fresh_dir("lr0").string();
  ASSERT_EQ(run_quiet(cfg), cli::kOk);
  std::istringstream is(slurp(fs::path(cfg.out) / "loss.txt"));
  std::vector<std::string> values;
  for (std::string step, v; is >> step >> v;) values.push_back(v);
  ASSERT_EQ(values.size(), 25u);
  for (const auto& v : values) EXPECT_EQ(v, values[0]);
}

TEST(TrainToy, TrajectoryIsDeterministicAndLearns) {
  cli::RunConfig a;
  a.subcommand = "train-toy";
  a.out = fresh_dir("tt_a").string();
  cli::RunConfig b = a;
  b.out = fresh_dir("tt_b").string();
  ASSERT_EQ(run_quiet(a), cli::kOk);
  ASSERT_EQ(run_quiet(b), cli::kOk);
  const std::string la = slurp(fs::path(a.out) / "loss.txt");
  EXPECT_EQ(la, slurp(fs::path(b.out) / "loss.txt"));

  TrainToyConfig tc;
  const auto r = train_toy(tc);
  EXPECT_FALSE(r.diverged);
  EXPECT_LE(r.final_loss(), 0.5 * r.initial_loss());
}

TEST(TrainToy, DivergenceExitsNonZero) {
  cli::RunConfig cfg;
  cfg.subcommand = "train-toy";
  cfg.lr = 1e4;
  cfg.steps = 50;
  cfg.out = fresh_dir("diverge").string();
  EXPECT_EQ(run_quiet(cfg), cli::kDiverged);
}

TEST(Cost, ReportMentionsConventionAndWholeModelNote) {
  cli::RunConfig cfg;
  cfg.subcommand = "cost";
  cfg.out = fresh_dir("cost").string();
  std::ostringstream log, err;
  ASSERT_EQ(cli::run(cfg, log, err), cli::kOk);
  const std::string s = slurp(fs::path(cfg.out) / "cost.txt");
  EXPECT_NE(s.find("convention flops=2*macs"), std::string::npos);
  EXPECT_NE(s.find("total.params "), std::string::npos);
  EXPECT_NE(s.find("context.whole_model_checkable 0\n"), std::string::npos);
  std::istringstream is(s);
  for (std::string line; std::getline(is, line);) {
    std::istringstream ls(line);
    std::string name, value, extra;
    EXPECT_TRUE(ls >> name >> value) << line;
    EXPECT_FALSE(ls >> extra) << line;
  }
}

TEST(GradCheck, DefaultRunPasses) {
  cli::RunConfig cfg;
  cfg.subcommand = "gradcheck";
  cfg.out = fresh_dir("gc").string();
  ASSERT_EQ(run_quiet(cfg), cli::kOk);
  EXPECT_NE(slurp(fs::path(cfg.out) / "gradcheck.txt").find("pass 1\n"), std::string::npos);
}

class ExitCodes : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fresh_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    manifest = io::save_spci(init_spci<float>(8, 8, 16, 0.1, 1), dir / "w");
  }
  std::string spci_args() const {
    return "forward --target spci --out \"" + (dir / "o").string() + "\" --weights \"" +
           manifest.string() + "\"";
  }
  void edit(const std::string& from, const std::string& to) {
    std::string s = slurp(manifest);
    s.replace(s.find(from), from.size(), to);
    std::ofstream(manifest, std::ios::binary) << s;
  }
  fs::path dir, manifest;
};

TEST_F(ExitCodes, SuccessIsZero) { EXPECT_EQ(spci_exit(spci_args()), 0); }

TEST_F(ExitCodes, UsageAndConfigErrorsAreTwo) {
  EXPECT_EQ(spci_exit(""), 2);
  EXPECT_EQ(spci_exit("forward --no-such-flag"), 2);
  EXPECT_EQ(spci_exit("forward"), 2);  // missing --out
  EXPECT_EQ(spci_exit("forward --spci-at p7 --out x"), 2);
  const fs::path cfg = dir / "bad.cfg";
  std::ofstream(cfg) << "input_size = 40,40\n";
  EXPECT_EQ(spci_exit("forward --config \"" + cfg.string() + "\" --out \"" + dir.string() + "\""), 2);
}

TEST_F(ExitCodes, MalformedManifestIsTwo) {
  edit("dropout ", "dropout_rate ");
  EXPECT_EQ(spci_exit(spci_args()), 2);
}

TEST_F(ExitCodes, MissingFilesAreThree) {
  EXPECT_EQ(spci_exit("forward --input /nonexistent/x.spct --out \"" + dir.string() + "\""), 3);
  EXPECT_EQ(spci_exit("forward --config /nonexistent/c.cfg --out \"" + dir.string() + "\""), 3);
  fs::remove(dir / "w" / "spci.transform.weight.spct");
  EXPECT_EQ(spci_exit(spci_args()), 3);
}

TEST_F(ExitCodes, TruncatedTensorIsThree) {
  const fs::path t = dir / "w" / "spci.cdm.conv2.weight.spct";
  const std::string bytes = slurp(t);
  std::ofstream(t, std::ios::binary) << bytes.substr(0, bytes.size() - 7);
  EXPECT_EQ(spci_exit(spci_args()), 3);
}

TEST_F(ExitCodes, ShapeMismatchesAreFour) {
  edit("c_out 8", "c_out 32");
  EXPECT_EQ(spci_exit(spci_args()), 4);
  const fs::path x = dir / "x.spct";
  io::save_tensor(x, Tensor<float>({1, 3, 32, 32}));
  EXPECT_EQ(spci_exit("forward --input \"" + x.string() + "\" --out \"" + dir.string() + "\""), 4);
}

TEST_F(ExitCodes, RoundTripThroughCliIsBitExact) {
  ASSERT_EQ(spci_exit("forward --target spci --save-weights --seed 9 --out \"" +
                      (dir / "rt").string() + "\""),
            0);
  EXPECT_EQ(io::load_spci<float>(dir / "rt" / "weights" / "spci.manifest"),
            (init_spci<float>(8, 8, 16, 0.1, 9)));
}

}  // namespace
}  // namespace spci
