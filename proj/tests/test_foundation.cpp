#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "mixttt/config.hpp"
#include "mixttt/errors.hpp"
#include "mixttt/report.hpp"
#include "mixttt/rng.hpp"
#include "mixttt/serialize.hpp"
#include "mixttt/tensor.hpp"

using namespace mixttt;

TEST(Rng, DeterministicStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = a.substream(1), d = a.substream(2);
  EXPECT_NE(c.next_u64(), d.next_u64());
}

TEST(Rng, UniformBoundsAndDegenerateInterval) {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.uniform(0.7, 1.0);
    EXPECT_GE(v, 0.7);
    EXPECT_LT(v, 1.0);
  }
  for (int i = 0; i < 10; ++i) EXPECT_EQ(rng.uniform(1.0, 1.0), 1.0);
}

TEST(Rng, NormalMomentsRoughlyStandard) {
  Rng rng(11);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, PoissonMeanMatchesRate) {
  Rng rng(13);
  const double lambda = 6.5;
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += static_cast<double>(rng.poisson(lambda));
  EXPECT_NEAR(sum / n, lambda, 0.05);
}

TEST(Rng, SampleWithoutReplacementIsDistinctAndCompleteAtFullDraw) {
  Rng rng(17);
  auto idx = rng.sample_without_replacement(10, 10);
  std::vector<bool> seen(10, false);
  for (std::size_t i : idx) {
    EXPECT_FALSE(seen[i]);
    seen[i] = true;
  }
  for (bool s : seen) EXPECT_TRUE(s);
}

TEST(Tensor, BasicShapeAndAccess) {
  Tensor t({2, 3});
  t.at(1, 2) = 5.0;
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t[5], 5.0);
  EXPECT_EQ(t.shape_str(), "[2x3]");
}

TEST(Serialize, RoundTripIsBitExact) {
  Tensor a({2, 3});
  Rng rng(3);
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.normal();
  Tensor b({4});
  for (std::size_t i = 0; i < b.numel(); ++i) b[i] = rng.normal();
  const std::vector<NamedTensor> tensors = {{"alpha", a}, {"beta", b}};

  const std::string path = ::testing::TempDir() + "roundtrip.mttt";
  save_tensor_file(path, tensors);
  const auto loaded = load_tensor_file(path);
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[0].name, "alpha");
  EXPECT_EQ(loaded[0].value.shape(), a.shape());
  EXPECT_EQ(loaded[0].value.vec(), a.vec());
  EXPECT_EQ(tensors_to_bytes(loaded), tensors_to_bytes(tensors));
}

TEST(Serialize, BadMagicAndTruncationAreFormatErrors) {
  const std::string path = ::testing::TempDir() + "bad.mttt";
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE1234";
  }
  EXPECT_THROW(load_tensor_file(path), FormatError);

  Tensor a({8});
  save_tensor_file(path, {{"a", a}});
  // truncate mid-payload
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 12);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << bytes;
  }
  EXPECT_THROW(load_tensor_file(path), FormatError);
}

TEST(Config, ParseGettersAndHash) {
  const RunConfig cfg = RunConfig::parse_string(
      "# comment\n"
      "seed = 42\n"
      "alpha=0.001  # trailing comment\n"
      "name = hello\n"
      "flag = true\n"
      "list = a, b ,c\n");
  EXPECT_EQ(cfg.get_int("seed"), 42);
  EXPECT_DOUBLE_EQ(cfg.get_double("alpha"), 0.001);
  EXPECT_EQ(cfg.get("name"), "hello");
  EXPECT_TRUE(cfg.get_bool_or("flag", false));
  EXPECT_EQ(cfg.get_list("list").size(), 3u);
  EXPECT_EQ(cfg.get_list("list")[1], "b");
  EXPECT_EQ(cfg.hash(), RunConfig::parse_string("alpha=0.001\nflag=true\nlist=a, b ,c\nname=hello\nseed=42\n").hash());
}

TEST(Config, ErrorsNameTheKey) {
  const RunConfig cfg = RunConfig::parse_string("a = x\n");
  try {
    cfg.get("missing.key");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.key"), std::string::npos);
  }
  try {
    cfg.get_double("a");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("a"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::parse_string("not a pair\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_string("a=1\na=2\n"), ConfigError);
  EXPECT_THROW(cfg.require_known_keys({"b"}), ConfigError);
}

TEST(Report, CsvCarriesConfigHashHeader) {
  const std::string path = ::testing::TempDir() + "table.csv";
  CsvFile csv(path, 0xabcdef0011223344ULL);
  csv.header({"x", "y"});
  csv.row({format_num(1.5), format_num(std::size_t{7})});
  csv.close();

  std::ifstream f(path);
  std::string first;
  std::getline(f, first);
  EXPECT_EQ(first, "# config_hash=abcdef0011223344");
  const auto rows = read_csv(path);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1][0], "1.5");
  EXPECT_EQ(rows[1][1], "7");
}
