#include "mixttt/mixup.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "mixttt/errors.hpp"
#include "mixttt/rng.hpp"

using namespace mixttt;

namespace {

Tensor random_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, 2, 4, 4});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

}  // namespace

TEST(RatioSpec, ValidatesBounds) {
  EXPECT_THROW((MixupRatioSpec{0.8, 0.7, RatioGranularity::per_pair}).validate(), ConfigError);
  EXPECT_THROW((MixupRatioSpec{-0.1, 0.5, RatioGranularity::per_pair}).validate(), ConfigError);
  EXPECT_THROW((MixupRatioSpec{0.5, 1.1, RatioGranularity::per_pair}).validate(), ConfigError);
  EXPECT_NO_THROW((MixupRatioSpec{0.0, 1.0, RatioGranularity::per_pair}).validate());
}

TEST(SampleRatio, DegenerateIntervalAlwaysReturnsTheBound) {
  Rng rng(1);
  const MixupRatioSpec spec{1.0, 1.0, RatioGranularity::per_pair};
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_ratio(spec, rng), 1.0);
}

TEST(SampleRatio, EmpiricalMeanOfUniform07To1) {
  Rng rng(2);
  const MixupRatioSpec spec{0.7, 1.0, RatioGranularity::per_pair};
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += sample_ratio(spec, rng);
  EXPECT_NEAR(sum / n, 0.85, 0.01);  // uniform mean (law of large numbers)
}

TEST(SampleRatio, ReproducibleUnderFixedSeed) {
  const MixupRatioSpec spec{0.7, 1.0, RatioGranularity::per_pair};
  Rng a(77), b(77);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_ratio(spec, a), sample_ratio(spec, b));
}

TEST(MixPair, IdempotentOnIdenticalInputs) {
  const Tensor x = random_images(1, 3);
  const Tensor m = mix_pair(x, x, 0.37);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(m[i], x[i]);
}

TEST(MixPair, EndpointsAreExact) {
  const Tensor a = random_images(1, 4), b = random_images(1, 5);
  const Tensor at1 = mix_pair(a, b, 1.0);
  const Tensor at0 = mix_pair(a, b, 0.0);
  EXPECT_EQ(at1.vec(), a.vec());
  EXPECT_EQ(at0.vec(), b.vec());
}

TEST(MixPair, ScalarArithmetic) {
  Tensor one({1, 1, 1, 1}), zero({1, 1, 1, 1});
  one[0] = 1.0;
  zero[0] = 0.0;
  EXPECT_DOUBLE_EQ(mix_pair(one, zero, 0.7)[0], 0.7);
}

TEST(MixPair, ShapeMismatchThrows) {
  Tensor a({1, 1, 2, 2}), b({1, 1, 3, 3});
  EXPECT_THROW(mix_pair(a, b, 0.5), InputError);
}

TEST(MixPair, AffineProperty) {
  // mix(a*x+b, a*y+b, r) == a*mix(x,y,r)+b
  const Tensor x = random_images(1, 8), y = random_images(1, 9);
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-1.0, 1.0), r = rng.uniform();
    Tensor xs = x, ys = y;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      xs[i] = a * x[i] + b;
      ys[i] = a * y[i] + b;
    }
    const Tensor lhs = mix_pair(xs, ys, r);
    const Tensor base = mix_pair(x, y, r);
    for (std::size_t i = 0; i < x.numel(); ++i)
      EXPECT_NEAR(lhs[i], a * base[i] + b, 1e-12);
  }
}

TEST(BuildMixedBatch, SingleTestSampleUsesDistinctPartners) {
  const Tensor tests = random_images(1, 11);
  const Tensor train = random_images(8, 12);
  const TrainPartnerPool pool(&train);
  Rng rng(13);
  const MixupRatioSpec spec{0.7, 1.0, RatioGranularity::per_pair};
  const MixedBatch mb = build_mixed_batch(tests, pool, spec, 4, rng);
  EXPECT_EQ(mb.rows(), 4u);
  for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(mb.test_ids[b], 0u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) EXPECT_NE(mb.partner_ids[i], mb.partner_ids[j]);
  for (double r : mb.ratios) {
    EXPECT_GE(r, 0.7);
    EXPECT_LE(r, 1.0);
  }
}

TEST(BuildMixedBatch, PerStepGranularitySharesOneRatio) {
  const Tensor tests = random_images(1, 14);
  const Tensor train = random_images(8, 15);
  const TrainPartnerPool pool(&train);
  Rng rng(16);
  const MixupRatioSpec spec{0.7, 1.0, RatioGranularity::per_step};
  const MixedBatch mb = build_mixed_batch(tests, pool, spec, 6, rng);
  for (std::size_t b = 1; b < 6; ++b) EXPECT_EQ(mb.ratios[b], mb.ratios[0]);
}

TEST(BuildMixedBatch, TestSamplesCycleInBatchMode) {
  const Tensor tests = random_images(3, 17);
  const Tensor train = random_images(16, 18);
  const TrainPartnerPool pool(&train);
  Rng rng(19);
  const MixupRatioSpec spec{0.9, 1.0, RatioGranularity::per_pair};
  const MixedBatch mb = build_mixed_batch(tests, pool, spec, 7, rng);
  for (std::size_t b = 0; b < 7; ++b) EXPECT_EQ(mb.test_ids[b], b % 3);
}

TEST(BuildMixedBatch, EmptyPoolThrows) {
  const Tensor tests = random_images(1, 20);
  const TrainPartnerPool pool;
  Rng rng(21);
  EXPECT_THROW(build_mixed_batch(tests, pool, {0.7, 1.0, RatioGranularity::per_pair}, 4, rng),
               InputError);
}

TEST(BuildMixedBatch, ConvexHullPixelPropertyHolds) {
  const Tensor tests = random_images(2, 22);
  const Tensor train = random_images(32, 23);
  const TrainPartnerPool pool(&train);
  Rng rng(24);
  const MixupRatioSpec spec{0.0, 1.0, RatioGranularity::per_pair};
  const std::size_t px = tests.numel() / tests.dim(0);
  std::size_t rows_checked = 0;
  while (rows_checked < 1000) {
    const MixedBatch mb = build_mixed_batch(tests, pool, spec, 25, rng);
    for (std::size_t b = 0; b < mb.rows(); ++b, ++rows_checked) {
      const double* mixed = mb.inputs.data() + b * px;
      const double* xt = tests.data() + mb.test_ids[b] * px;
      const double* xi = train.data() + mb.partner_ids[b] * px;
      for (std::size_t i = 0; i < px; ++i) {
        EXPECT_GE(mixed[i], std::min(xt[i], xi[i]) - 1e-12);
        EXPECT_LE(mixed[i], std::max(xt[i], xi[i]) + 1e-12);
      }
    }
  }
}

TEST(BuildMixedBatch, DeterministicBytesUnderFixedSeed) {
  const Tensor tests = random_images(1, 25);
  const Tensor train = random_images(8, 26);
  const TrainPartnerPool pool(&train);
  const MixupRatioSpec spec{0.7, 1.0, RatioGranularity::per_pair};
  Rng a(99), b(99);
  const MixedBatch m1 = build_mixed_batch(tests, pool, spec, 5, a);
  const MixedBatch m2 = build_mixed_batch(tests, pool, spec, 5, b);
  EXPECT_EQ(m1.inputs.vec(), m2.inputs.vec());
  EXPECT_EQ(m1.partner_ids, m2.partner_ids);
  EXPECT_EQ(m1.ratios, m2.ratios);
}

TEST(BuildMixedBatch, DegenerateRatioMatchesPlainBatchBitwise) {
  const Tensor tests = random_images(2, 27);
  const Tensor train = random_images(8, 28);
  const TrainPartnerPool pool(&train);
  Rng rng(29);
  const MixedBatch mixed =
      build_mixed_batch(tests, pool, {1.0, 1.0, RatioGranularity::per_pair}, 6, rng);
  const MixedBatch plain = build_plain_batch(tests, 6);
  EXPECT_EQ(mixed.inputs.vec(), plain.inputs.vec());
  EXPECT_EQ(mixed.test_ids, plain.test_ids);
}
