#include "mixttt/analysis.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mixttt/errors.hpp"
#include "test_util.hpp"

using namespace mixttt;
using namespace mixttt::testutil;

namespace {

const std::vector<double> kMuList = {0.05, 0.025, 0.0125, 0.00625};

Tensor random_image(const NetworkSpec& spec, std::uint64_t seed) {
  return random_batch(1, spec, seed);
}

}  // namespace

TEST(FirstOrderTerm, ZeroWhenDirectionOrMuVanishes) {
  SplitNetworkState s = build_network(toy_smooth_spec(), 3);
  AuxLossField field(s, 1);
  const Tensor x = random_image(s.spec, 5);
  EXPECT_EQ(first_order_term(field, x, x, 0.3), 0.0);
  const Tensor y = random_image(s.spec, 7);
  EXPECT_EQ(first_order_term(field, x, y, 0.0), 0.0);
}

TEST(FirstOrderTerm, MatchesSecantDirectionalDerivative) {
  SplitNetworkState s = build_network(toy_smooth_spec(), 9);
  AuxLossField field(s, 2);
  const Tensor x_t = random_image(s.spec, 11);
  const Tensor x_i = random_image(s.spec, 13);
  const double mu = 0.05, h = 1e-5;
  const double fo = first_order_term(field, x_t, x_i, mu);
  Tensor xh = x_t;
  for (std::size_t i = 0; i < xh.numel(); ++i) xh[i] += h * (x_i[i] - x_t[i]);
  const double secant = (field.value(xh) - field.value(x_t)) / h * mu;
  EXPECT_LE(std::abs(fo - secant) / std::max(std::abs(fo), std::abs(secant)), 1e-3);
}

TEST(TaylorVerify, QuadraticClosedFormIsExact) {
  QuadraticField field;
  Rng rng(15);
  Tensor x_t({1, 2, 3, 3}), x_i({1, 2, 3, 3});
  for (std::size_t i = 0; i < x_t.numel(); ++i) {
    x_t[i] = rng.uniform(-1.0, 1.0);
    x_i[i] = rng.uniform(-1.0, 1.0);
  }
  const TaylorReport r = taylor_verify(field, x_t, x_i, kMuList);
  const double dist2 = dot(x_i - x_t, x_i - x_t);
  for (std::size_t k = 0; k < r.mu.size(); ++k)
    EXPECT_NEAR(r.remainder[k], r.mu[k] * r.mu[k] * dist2, 1e-10 * dist2);
  EXPECT_NEAR(r.fitted_exponent, 2.0, 1e-9);
  for (double ratio : r.ratios) EXPECT_NEAR(ratio, 4.0, 1e-6);
}

TEST(TaylorVerify, SmoothNetworkExponentNearTwo) {
  SplitNetworkState s = build_network(toy_smooth_spec(), 17);
  AuxLossField field(s, 0);
  Rng rng(19);
  Tensor x_t({1, 2, 6, 6}), x_i({1, 2, 6, 6});
  for (std::size_t i = 0; i < x_t.numel(); ++i) {
    x_t[i] = rng.uniform();
    x_i[i] = rng.uniform();
  }
  const TaylorReport r = taylor_verify(field, x_t, x_i, kMuList);
  EXPECT_GE(r.fitted_exponent, 1.8);
  EXPECT_LE(r.fitted_exponent, 2.2);
  for (double ratio : r.ratios) {
    EXPECT_GE(ratio, 3.5);
    EXPECT_LE(ratio, 4.5);
  }
  EXPECT_EQ(r.remainder.size(), kMuList.size());
}

TEST(TaylorVerify, RejectsBadMuLists) {
  QuadraticField field;
  Tensor x({1, 1, 2, 2}), y({1, 1, 2, 2});
  y.fill(0.5);
  EXPECT_THROW(taylor_verify(field, x, y, {0.2, 0.1}), InputError);       // above 0.1
  EXPECT_THROW(taylor_verify(field, x, y, {0.05, 0.03}), InputError);     // not halving
  EXPECT_THROW(taylor_verify(field, x, y, {0.05}), InputError);           // too short
  EXPECT_NO_THROW(taylor_verify(field, x, y, {0.1, 0.05, 0.025}));
}

TEST(TaylorVerify, UnderflowingRemaindersAreDroppedFromFit) {
  // identical endpoints: every remainder is exactly zero
  QuadraticField field;
  Tensor x({1, 1, 2, 2});
  x.fill(0.3);
  const TaylorReport r = taylor_verify(field, x, x, kMuList);
  for (bool used : r.used_in_fit) EXPECT_FALSE(used);
  EXPECT_TRUE(std::isnan(r.fitted_exponent));
}

TEST(RequiresSmoothActivation, ReluRejected) {
  NetworkSpec spec = toy_smooth_spec();
  spec.activation = Activation::relu;
  SplitNetworkState s = build_network(spec, 21);
  EXPECT_THROW(AuxLossField(s, 0), InputError);
}

TEST(ChainRule, ResidualSmallOnToyNetwork) {
  NetworkSpec spec;
  spec.input_channels = 2;
  spec.input_height = spec.input_width = 6;
  spec.encoder = {{LayerKind::conv, 4, 2, true, true}, {LayerKind::linear, 8, 1, false, true}};
  spec.main_classes = 3;
  spec.aux_classes = 4;
  SplitNetworkState s = build_network(spec, 23);
  const Tensor x = random_image(spec, 25);
  EXPECT_LE(chain_rule_residual(s, x, 2), 1e-3);
}

TEST(ChainRule, AnalyticLinearEncoderResidualIsZero) {
  // single linear encoder, no activation: the input Jacobian IS the weight
  NetworkSpec spec;
  spec.input_channels = 1;
  spec.input_height = 2;
  spec.input_width = 4;
  spec.encoder = {{LayerKind::linear, 5, 1, false, false}};
  spec.main_classes = 2;
  spec.aux_classes = 4;
  SplitNetworkState s = build_network(spec, 27);
  const Tensor x = random_image(spec, 29);

  // dL/dfeat through the aux head, then J' dfeat with J = W analytically
  ForwardCache cache;
  ForwardResult out = forward_all(s, x, Mode::eval, false, cache);
  AuxCrossEntropyLoss loss({1});
  OutputGrads og;
  loss.evaluate(out, &og);
  std::vector<double> dfeat(5, 0.0);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t d = 0; d < 5; ++d) dfeat[d] += og.d_aux_logits.at(0, k) * s.aux_w.at(k, d);
  Tensor analytic({1, 1, 2, 4});
  for (std::size_t i = 0; i < 8; ++i) {
    double v = 0.0;
    for (std::size_t d = 0; d < 5; ++d) v += s.layers[0].weight.at(d, i) * dfeat[d];
    analytic[i] = v;
  }
  const Tensor exact = grad_input(s, loss, x, Mode::eval);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(analytic[i], exact[i], 1e-12);
}

TEST(DaviesBouldin, HandBuiltTwoClusterCase) {
  // centroid distance 4, mean scatter 1 each: DB = (1+1)/4 = 0.5
  Tensor f({4, 2});
  f.at(0, 0) = -1.0;
  f.at(1, 0) = 1.0;
  f.at(2, 0) = 3.0;
  f.at(3, 0) = 5.0;
  const std::vector<std::uint32_t> labels = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(davies_bouldin(f, labels), 0.5);
}

TEST(DaviesBouldin, ZeroForZeroVarianceClustersApart) {
  Tensor f({4, 3});
  f.at(0, 1) = 2.0;
  f.at(1, 1) = 2.0;  // cluster 0 at (0,2,0), twice
  f.at(2, 0) = 7.0;
  f.at(3, 0) = 7.0;  // cluster 1 at (7,0,0), twice
  EXPECT_DOUBLE_EQ(davies_bouldin(f, {0, 0, 1, 1}), 0.0);
}

TEST(DaviesBouldin, DuplicatingEveryPointLeavesIndexUnchanged) {
  Rng rng(31);
  Tensor f({20, 4});
  std::vector<std::uint32_t> labels(20);
  for (std::size_t i = 0; i < 20; ++i) {
    labels[i] = static_cast<std::uint32_t>(i % 4);
    for (std::size_t d = 0; d < 4; ++d) f.at(i, d) = rng.normal() + 2.0 * labels[i];
  }
  const double base = davies_bouldin(f, labels);
  Tensor doubled({40, 4});
  std::vector<std::uint32_t> labels2(40);
  for (std::size_t i = 0; i < 40; ++i) {
    labels2[i] = labels[i % 20];
    for (std::size_t d = 0; d < 4; ++d) doubled.at(i, d) = f.at(i % 20, d);
  }
  EXPECT_NEAR(davies_bouldin(doubled, labels2), base, 1e-12);
}

TEST(DaviesBouldin, InvariantUnderGlobalIsometry) {
  Rng rng(33);
  const std::size_t n = 30, d = 5;
  Tensor f({n, d});
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint32_t>(i % 3);
    for (std::size_t k = 0; k < d; ++k) f.at(i, k) = rng.normal() + 3.0 * labels[i];
  }
  const double base = davies_bouldin(f, labels);

  // random orthogonal matrix via QR, plus a translation
  Eigen::MatrixXd m(d, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
  Tensor g({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      double v = 1.5;  // translation
      for (std::size_t j = 0; j < d; ++j)
        v += q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) * f.at(i, j);
      g.at(i, k) = v;
    }
  EXPECT_NEAR(davies_bouldin(g, labels), base, 1e-9);
}

TEST(DaviesBouldin, SingletonClassesExcludedWithWarning) {
  Tensor f({5, 2});
  f.at(0, 0) = 0.0;
  f.at(1, 0) = 1.0;
  f.at(2, 0) = 4.0;
  f.at(3, 0) = 5.0;
  f.at(4, 0) = 9.0;  // singleton class 2
  std::vector<std::uint32_t> excluded;
  const double v = davies_bouldin(f, {0, 0, 1, 1, 2}, &excluded);
  EXPECT_TRUE(std::isfinite(v));
  ASSERT_EQ(excluded.size(), 1u);
  EXPECT_EQ(excluded[0], 2u);
  // two singleton classes leave fewer than two usable clusters
  EXPECT_THROW(davies_bouldin(f, {0, 0, 0, 1, 2}), InputError);
}

TEST(DaviesBouldin, CoincidentCentroidsGiveInfinity) {
  Tensor f({4, 2});
  f.at(0, 0) = -1.0;
  f.at(1, 0) = 1.0;
  f.at(2, 1) = -2.0;
  f.at(3, 1) = 2.0;  // same centroid (0,0) for both classes
  EXPECT_TRUE(std::isinf(davies_bouldin(f, {0, 0, 1, 1})));
}

TEST(Project2d, TwoDInputIsRigidMotionOfItself) {
  Rng rng(35);
  Tensor f({40, 2});
  for (std::size_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();
  const Tensor p = project_2d(f);
  // pairwise distances preserved (orthogonal transform of centered data)
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = a + 1; b < 10; ++b) {
      const double da = std::hypot(f.at(a, 0) - f.at(b, 0), f.at(a, 1) - f.at(b, 1));
      const double db = std::hypot(p.at(a, 0) - p.at(b, 0), p.at(a, 1) - p.at(b, 1));
      EXPECT_NEAR(da, db, 1e-9);
    }
  // total variance preserved
  double vf = 0.0, vp = 0.0, mf[2] = {0, 0}, mp[2] = {0, 0};
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      mf[k] += f.at(i, k) / 40.0;
      mp[k] += p.at(i, k) / 40.0;
    }
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      vf += (f.at(i, k) - mf[k]) * (f.at(i, k) - mf[k]);
      vp += (p.at(i, k) - mp[k]) * (p.at(i, k) - mp[k]);
    }
  EXPECT_NEAR(vf, vp, 1e-9);
}

TEST(Project2d, RankOneDataHasZeroSecondCoordinate) {
  Rng rng(37);
  Tensor f({25, 6});
  std::vector<double> dir(6);
  for (double& v : dir) v = rng.normal();
  for (std::size_t i = 0; i < 25; ++i) {
    const double a = rng.normal();
    for (std::size_t k = 0; k < 6; ++k) f.at(i, k) = a * dir[k];
  }
  const Tensor p = project_2d(f);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(p.at(i, 1), 0.0, 1e-9);
}

TEST(Project2d, DeterministicAcrossCalls) {
  Rng rng(39);
  Tensor f({30, 8});
  for (std::size_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();
  const Tensor a = project_2d(f);
  const Tensor b = project_2d(f);
  EXPECT_EQ(a.vec(), b.vec());
}

TEST(DriftAnalysis, StepsMustAscendAndIndicesComputed) {
  Rng rng(41);
  std::vector<Tensor> checkpoints;
  std::vector<std::uint32_t> labels(30);
  for (std::size_t i = 0; i < 30; ++i) labels[i] = static_cast<std::uint32_t>(i % 3);
  for (int c = 0; c < 3; ++c) {
    Tensor f({30, 4});
    for (std::size_t i = 0; i < 30; ++i)
      for (std::size_t k = 0; k < 4; ++k)
        f.at(i, k) = rng.normal() * (1.0 + c) + 3.0 * labels[i];
    checkpoints.push_back(std::move(f));
  }
  const DriftReport r = drift_analysis(checkpoints, {0, 10, 20}, labels);
  EXPECT_EQ(r.db_index.size(), 3u);
  EXPECT_EQ(r.projections[0].dim(1), 2u);
  // wider within-cluster spread gives a worse (larger) index
  EXPECT_GT(r.db_index[2], r.db_index[0]);
  EXPECT_THROW(drift_analysis(checkpoints, {0, 20, 10}, labels), InputError);
}

TEST(GradNormCompare, SelfConsistencyAndPairedSummary) {
  NetworkSpec spec = toy_smooth_spec();
  SplitNetworkState state = build_network(spec, 43);
  Dataset train;
  train.images = random_batch(16, spec, 45);
  train.labels.assign(16, 0);
  const TrainPartnerPool pool(&train.images);
  const Tensor tests = random_batch(4, spec, 47);

  EpisodeConfig plain;
  plain.task = AuxTaskSpec::rotation_default();
  plain.alpha = 1e-3;
  plain.steps = 3;
  plain.mix_batch = 4;
  plain.mix_enabled = false;
  EpisodeConfig mixed = plain;
  mixed.mix_enabled = true;

  const GradNormSummary s = grad_norm_compare(state, tests, plain, mixed, pool);
  EXPECT_EQ(s.n_samples, 4u);
  EXPECT_EQ(s.plain_traces[0].size(), 3u);
  EXPECT_NEAR(s.mean_diff, s.mean_plain - s.mean_mix, 1e-12);

  // degenerate ratio spec (1,1) makes both sides identical
  EpisodeConfig degenerate = mixed;
  degenerate.task.ratio_spec.low = degenerate.task.ratio_spec.high = 1.0;
  const GradNormSummary s2 = grad_norm_compare(state, tests, plain, degenerate, pool);
  for (std::size_t i = 0; i < s2.n_samples; ++i)
    EXPECT_EQ(s2.plain_traces[i], s2.mix_traces[i]);
  EXPECT_EQ(s2.mean_diff, 0.0);
  EXPECT_TRUE(s2.mix_not_larger);

  // alpha = 0 keeps traces constant across steps
  EpisodeConfig frozen_plain = plain, frozen_mix = mixed;
  frozen_plain.alpha = frozen_mix.alpha = 0.0;
  const GradNormSummary s3 = grad_norm_compare(state, tests, frozen_plain, frozen_mix, pool);
  for (std::size_t i = 0; i < s3.n_samples; ++i)
    for (std::size_t k = 1; k < s3.plain_traces[i].size(); ++k)
      EXPECT_EQ(s3.plain_traces[i][k], s3.plain_traces[i][0]);

  // config pairs must differ only in mix_enabled
  EpisodeConfig wrong = mixed;
  wrong.steps = 5;
  EXPECT_THROW(grad_norm_compare(state, tests, plain, wrong, pool), ConfigError);
  EXPECT_THROW(grad_norm_compare(state, tests, mixed, mixed, pool), ConfigError);
}
