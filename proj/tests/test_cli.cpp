#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mixttt/data.hpp"
#include "mixttt/report.hpp"
#include "mixttt/synth.hpp"

using namespace mixttt;
namespace fs = std::filesystem;

namespace {

std::string g_mixttt;
std::string g_datagen;

struct CliResult {
  int exit_code;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

CliResult run_cli(const std::string& binary, const std::string& args, const std::string& tag) {
  const std::string out = ::testing::TempDir() + "cli_" + tag + ".out";
  const std::string err = ::testing::TempDir() + "cli_" + tag + ".err";
  const std::string cmd = binary + " " + args + " >" + out + " 2>" + err;
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

class CliFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = ::testing::TempDir() + "mixttt_cli/";
    fs::create_directories(dir_);
    const Dataset train = make_synthetic_dataset(48, 5);
    const Dataset test = make_synthetic_dataset(12, 77);
    save_dataset(train, dir_ + "train.mttt");
    save_dataset(test, dir_ + "test.mttt");
  }

  static std::string write_config(const std::string& name, const std::string& body) {
    const std::string path = dir_ + name;
    std::ofstream f(path);
    f << body;
    return path;
  }

  static std::string small_net() {
    return "net.input_channels = 3\n"
           "net.input_size = 32\n"
           "net.encoder = conv:4:s2:n:a,linear:8:a\n"
           "net.main_classes = 10\n"
           "net.aux_classes = 4\n"
           "net.activation = smooth\n";
  }

  static std::string dir_;
};

std::string CliFixture::dir_;

}  // namespace

TEST_F(CliFixture, PretrainMissingDatasetPathExitsTwoNamingTheKey) {
  const std::string cfg = write_config(
      "missing.cfg", small_net() + "pretrain.train_path = " + dir_ + "nope.mttt\n");
  const CliResult r = run_cli(g_mixttt, "pretrain --config " + cfg, "missing");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("pretrain.train_path"), std::string::npos);
}

TEST_F(CliFixture, UnknownConfigKeyRejected) {
  const std::string cfg = write_config("unknown.cfg", small_net() + "pretrain.tran_path = x\n");
  const CliResult r = run_cli(g_mixttt, "pretrain --config " + cfg, "unknown");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("pretrain.tran_path"), std::string::npos);
}

TEST_F(CliFixture, PretrainIsByteDeterministicAndWritesEpochRows) {
  const std::string cfg = write_config("pretrain.cfg",
                                       small_net() +
                                           "seed = 3\n"
                                           "pretrain.train_path = " + dir_ + "train.mttt\n" +
                                           "pretrain.epochs = 2\n"
                                           "pretrain.batch_size = 16\n"
                                           "pretrain.lr_schedule = constant:0.05\n");
  const CliResult r1 = run_cli(g_mixttt, "pretrain --config " + cfg + " --out " + dir_ + "runA", "p1");
  ASSERT_EQ(r1.exit_code, 0) << r1.err;
  const CliResult r2 = run_cli(g_mixttt, "pretrain --config " + cfg + " --out " + dir_ + "runB", "p2");
  ASSERT_EQ(r2.exit_code, 0) << r2.err;
  EXPECT_EQ(slurp(dir_ + "runA/checkpoint.mttt"), slurp(dir_ + "runB/checkpoint.mttt"));
  EXPECT_EQ(slurp(dir_ + "runA/pretrain_metrics.csv"), slurp(dir_ + "runB/pretrain_metrics.csv"));

  const auto rows = read_csv(dir_ + "runA/pretrain_metrics.csv");
  ASSERT_EQ(rows.size(), 3u);  // header + one row per epoch
  EXPECT_EQ(rows[0][0], "epoch");
  std::ifstream f(dir_ + "runA/pretrain_metrics.csv");
  std::string first;
  std::getline(f, first);
  EXPECT_EQ(first.rfind("# config_hash=", 0), 0u);
}

TEST_F(CliFixture, CorruptFlagsSurfaceAndDeterminism) {
  const std::string out1 = dir_ + "corr1.mttt", out2 = dir_ + "corr2.mttt";
  const CliResult r1 = run_cli(
      g_mixttt, "corrupt --in " + dir_ + "test.mttt --out " + out1 +
                    " --kind gaussian_noise --severity 3 --seed 11", "c1");
  ASSERT_EQ(r1.exit_code, 0) << r1.err;
  const CliResult r2 = run_cli(
      g_mixttt, "corrupt --in " + dir_ + "test.mttt --out " + out2 +
                    " --kind gaussian_noise --severity 3 --seed 11", "c2");
  ASSERT_EQ(r2.exit_code, 0) << r2.err;
  EXPECT_EQ(slurp(out1), slurp(out2));
  const Dataset loaded = load_dataset(out1);
  loaded.validate(10);
  EXPECT_EQ(loaded.size(), 12u);

  const CliResult bad = run_cli(
      g_mixttt, "corrupt --in " + dir_ + "test.mttt --out " + out1 +
                    " --kind gaussian_noise --severity 9 --seed 11", "c3");
  EXPECT_EQ(bad.exit_code, 2);
  const CliResult badkind = run_cli(
      g_mixttt, "corrupt --in " + dir_ + "test.mttt --out " + out1 +
                    " --kind fog --severity 3 --seed 11", "c4");
  EXPECT_EQ(badkind.exit_code, 2);
}

TEST_F(CliFixture, TttTableShapeReductionAndAverages) {
  const std::string pcfg = write_config("ttt_pre.cfg",
                                        small_net() +
                                            "seed = 5\n"
                                            "pretrain.train_path = " + dir_ + "train.mttt\n" +
                                            "pretrain.epochs = 1\n"
                                            "pretrain.batch_size = 16\n");
  ASSERT_EQ(run_cli(g_mixttt, "pretrain --config " + pcfg + " --out " + dir_ + "ttt_run", "tp").exit_code, 0);

  const std::string base_cfg = small_net() +
                               "seed = 5\n"
                               "ttt.checkpoint = " + dir_ + "ttt_run/checkpoint.mttt\n" +
                               "ttt.train_path = " + dir_ + "train.mttt\n" +
                               "ttt.test_path = " + dir_ + "test.mttt\n" +
                               "ttt.corruptions = gaussian_noise:3,brightness:2\n"
                               "ttt.n_test = 6\n"
                               "episode.steps = 2\n"
                               "episode.batch = 4\n"
                               "task.kind = rotation\n";

  const std::string cfg0 = write_config("ttt0.cfg", base_cfg + "episode.alpha = 0.0\n");
  const CliResult r0 = run_cli(g_mixttt, "ttt --config " + cfg0 + " --out " + dir_ + "ttt_run", "t0");
  ASSERT_EQ(r0.exit_code, 0) << r0.err;

  const auto rows = read_csv(dir_ + "ttt_run/ttt_errors.csv");
  ASSERT_EQ(rows.size(), 1u + 9u);  // header + (2 corruptions + average) x 3 methods
  EXPECT_EQ(rows[0], (std::vector<std::string>{"corruption", "severity", "method",
                                               "error_rate_percent", "n_samples", "seed"}));
  double base_g = -1, ttt_g = -2, mix_g = -3;
  double avg[3] = {-1, -1, -1};
  double sums[3] = {0, 0, 0};
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double err = std::stod(r[3]);
    const int m = r[2] == "baseline" ? 0 : (r[2] == "ttt" ? 1 : 2);
    if (r[0] == "average")
      avg[m] = err;
    else
      sums[m] += err;
    if (r[0] == "gaussian_noise") {
      if (m == 0) base_g = err;
      if (m == 1) ttt_g = err;
      if (m == 2) mix_g = err;
    }
  }
  EXPECT_EQ(base_g, ttt_g);
  EXPECT_EQ(base_g, mix_g);
  for (int m = 0; m < 3; ++m) EXPECT_NEAR(avg[m], sums[m] / 2.0, 1e-9);

  const std::string before = slurp(dir_ + "ttt_run/ttt_errors.csv");
  ASSERT_EQ(run_cli(g_mixttt, "ttt --config " + cfg0 + " --out " + dir_ + "ttt_run", "t1").exit_code, 0);
  EXPECT_EQ(slurp(dir_ + "ttt_run/ttt_errors.csv"), before);
}

TEST_F(CliFixture, VerifyQuadraticSelfTestAndEmptyChecks) {
  const std::string cfg = write_config("verify_quad.cfg",
                                       small_net() +
                                           "seed = 7\n"
                                           "verify.checks = quadratic\n");
  const CliResult r = run_cli(g_mixttt, "verify --config " + cfg + " --out " + dir_ + "vq", "vq");
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const std::string summary = slurp(dir_ + "vq/verify_summary.json");
  EXPECT_NE(summary.find("\"quadratic\""), std::string::npos);
  EXPECT_NE(summary.find("\"all_pass\": true"), std::string::npos);

  const std::string cfg_none = write_config("verify_none.cfg",
                                            small_net() +
                                                "seed = 7\n"
                                                "verify.checks = none\n");
  const CliResult rn = run_cli(g_mixttt, "verify --config " + cfg_none + " --out " + dir_ + "vn", "vn");
  EXPECT_EQ(rn.exit_code, 0) << rn.err;
  EXPECT_NE(slurp(dir_ + "vn/verify_summary.json").find("\"all_pass\": true"), std::string::npos);
}

TEST_F(CliFixture, DatagenWritesLoadableDatasets) {
  const CliResult r = run_cli(g_datagen,
                              "--out-train " + dir_ + "g_train.mttt --out-test " + dir_ +
                                  "g_test.mttt --n-train 20 --n-test 10 --seed 3",
                              "dg");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const Dataset train = load_dataset(dir_ + "g_train.mttt");
  const Dataset test = load_dataset(dir_ + "g_test.mttt");
  train.validate(10);
  test.validate(10);
  EXPECT_EQ(train.size(), 20u);
  EXPECT_EQ(test.size(), 10u);
  EXPECT_NE(train.images.vec(), test.images.vec());
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  if (argc < 3) {
    fprintf(stderr, "usage: test_cli <mixttt-binary> <datagen-binary>\n");
    return 1;
  }
  g_mixttt = argv[1];
  g_datagen = argv[2];
  return RUN_ALL_TESTS();
}
