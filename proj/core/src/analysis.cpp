#include "mixttt/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "mixttt/errors.hpp"
#include "mixttt/threading.hpp"

namespace mixttt {

// ---- scalar fields ----------------------------------------------------------------

AuxLossField::AuxLossField(SplitNetworkState& state, std::uint32_t label)
    : state_(&state), label_(label) {
  if (state.spec.activation != Activation::smooth)
    throw InputError("expansion checks need a smooth-activation network");
  if (label >= state.spec.aux_classes) throw InputError("aux label out of range");
}

double AuxLossField::value(const Tensor& x) const {
  const Tensor logits = forward_aux(*state_, x, Mode::eval);
  return cross_entropy(logits, {label_});
}

Tensor AuxLossField::gradient(const Tensor& x) const {
  AuxCrossEntropyLoss loss({label_});
  return grad_input(*state_, loss, x, Mode::eval);
}

double QuadraticField::value(const Tensor& x) const { return dot(x, x); }

Tensor QuadraticField::gradient(const Tensor& x) const {
  Tensor g = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.numel(); ++i) g[i] = 2.0 * x[i];
  return g;
}

// ---- Taylor verification -------------------------------------------------------------

double first_order_term(const ScalarField& field, const Tensor& x_t, const Tensor& x_i, double mu) {
  if (!x_t.same_shape(x_i)) throw InputError("first_order_term: shape mismatch");
  const Tensor g = field.gradient(x_t);
  if (!g.all_finite()) throw NumericalError("first_order_term: non-finite input gradient");
  const Tensor dir = x_i - x_t;
  return mu * dot(dir, g);
}

TaylorReport taylor_verify(const ScalarField& field, const Tensor& x_t, const Tensor& x_i,
                           const std::vector<double>& mu_list) {
  if (!x_t.same_shape(x_i)) throw InputError("taylor_verify: shape mismatch");
  if (mu_list.size() < 2) throw InputError("taylor_verify: need at least two expansion parameters");
  for (std::size_t k = 0; k < mu_list.size(); ++k) {
    if (!(mu_list[k] > 0.0 && mu_list[k] <= 0.1))
      throw InputError("taylor_verify: mu must lie in (0, 0.1]");
    if (k > 0 && std::abs(mu_list[k - 1] / mu_list[k] - 2.0) > 1e-9)
      throw InputError("taylor_verify: mu list must descend by halves");
  }

  TaylorReport report;
  report.mu = mu_list;
  report.L_t = field.value(x_t);
  const Tensor g = field.gradient(x_t);
  const Tensor dir = x_i - x_t;
  const double slope = dot(dir, g);

  for (double mu : mu_list) {
    Tensor mixed = Tensor::zeros_like(x_t);
    for (std::size_t i = 0; i < x_t.numel(); ++i) mixed[i] = x_t[i] + mu * dir[i];
    const double l_mt = field.value(mixed);
    const double fo = mu * slope;
    const double rem = std::abs(l_mt - report.L_t - fo);
    if (!std::isfinite(l_mt) || !std::isfinite(rem))
      throw NumericalError("taylor_verify: non-finite loss in expansion");
    report.L_mt.push_back(l_mt);
    report.first_order.push_back(fo);
    report.remainder.push_back(rem);
    report.used_in_fit.push_back(rem >= 1e-14);
  }

  // log-log least squares over the usable points
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  std::size_t m = 0;
  for (std::size_t k = 0; k < mu_list.size(); ++k) {
    if (!report.used_in_fit[k]) continue;
    const double lx = std::log(mu_list[k]);
    const double ly = std::log(report.remainder[k]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++m;
  }
  report.fitted_exponent =
      m >= 2 ? (static_cast<double>(m) * sxy - sx * sy) / (static_cast<double>(m) * sxx - sx * sx)
             : std::numeric_limits<double>::quiet_NaN();

  for (std::size_t k = 0; k + 1 < mu_list.size(); ++k) {
    const bool ok = report.used_in_fit[k] && report.used_in_fit[k + 1];
    report.ratios.push_back(ok ? report.remainder[k] / report.remainder[k + 1]
                               : std::numeric_limits<double>::quiet_NaN());
  }
  return report;
}

// ---- gradient-norm control ----------------------------------------------------------

GradNormSummary grad_norm_compare(const SplitNetworkState& state, const Tensor& test_samples,
                                  const EpisodeConfig& plain_config, const EpisodeConfig& mix_config,
                                  const TrainPartnerPool& pool, const TrainFeatureStats* stats) {
  if (plain_config.mix_enabled || !mix_config.mix_enabled)
    throw ConfigError("grad_norm_compare: configs must be (plain, mixed)");
  if (plain_config.alpha != mix_config.alpha || plain_config.steps != mix_config.steps ||
      plain_config.mix_batch != mix_config.mix_batch ||
      plain_config.task.kind != mix_config.task.kind)
    throw ConfigError("grad_norm_compare: configs may differ only in mix_enabled");
  const std::size_t n = test_samples.dim(0);
  if (n == 0) throw InputError("grad_norm_compare: no test samples");

  GradNormSummary summary;
  summary.n_samples = n;
  summary.plain_traces.resize(n);
  summary.mix_traces.resize(n);

  const std::size_t px = test_samples.numel() / n;
  parallel_for(n, [&](std::size_t i) {
    Tensor x({1, test_samples.dim(1), test_samples.dim(2), test_samples.dim(3)});
    std::copy(test_samples.data() + i * px, test_samples.data() + (i + 1) * px, x.data());
    const std::uint64_t seed = Rng::mix(plain_config.seed, 0x9d0 + i);

    SplitNetworkState s1 = state;
    EpisodeConfig pc = plain_config;
    pc.seed = seed;
    pc.mode = EpisodeMode::single_reset;
    EpisodeResult plain = ttt_episode(s1, x, pc, nullptr, stats);

    SplitNetworkState s2 = state;
    EpisodeConfig mc = mix_config;
    mc.seed = seed;
    mc.mode = EpisodeMode::single_reset;
    EpisodeResult mixed = ttt_episode(s2, x, mc, &pool, stats);

    for (const StepRecord& r : plain.trace) summary.plain_traces[i].push_back(r.grad_norm_theta);
    for (const StepRecord& r : mixed.trace) summary.mix_traces[i].push_back(r.grad_norm_theta);
  });

  std::vector<double> diffs(n);
  double plain_total = 0.0, mix_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = 0.0, m = 0.0;
    for (double v : summary.plain_traces[i]) p += v;
    for (double v : summary.mix_traces[i]) m += v;
    p /= static_cast<double>(summary.plain_traces[i].size());
    m /= static_cast<double>(summary.mix_traces[i].size());
    diffs[i] = p - m;
    plain_total += p;
    mix_total += m;
  }
  summary.mean_plain = plain_total / static_cast<double>(n);
  summary.mean_mix = mix_total / static_cast<double>(n);
  summary.mean_diff = summary.mean_plain - summary.mean_mix;

  double var = 0.0;
  for (double d : diffs) var += (d - summary.mean_diff) * (d - summary.mean_diff);
  var = n > 1 ? var / static_cast<double>(n - 1) : 0.0;
  const double se = std::sqrt(var / static_cast<double>(n));
  summary.t_stat = se > 0.0 ? summary.mean_diff / se : 0.0;
  summary.mix_not_larger = summary.mean_mix <= summary.mean_plain;
  return summary;
}

// ---- chain rule ------------------------------------------------------------------------

double chain_rule_residual(SplitNetworkState& state, const Tensor& x_t, std::uint32_t y_t,
                           double fd_step) {
  if (x_t.rank() != 4 || x_t.dim(0) != 1) throw InputError("chain_rule_residual: single image expected");
  const std::size_t in_dim = x_t.numel();
  if (in_dim > 4096)
    throw InputError("chain_rule_residual: input too large to materialize the feature Jacobian");
  const std::size_t D = state.spec.feature_dim();

  // dL/dfeat at the feature cut (exact head backward)
  ForwardCache cache;
  ForwardResult out = forward_all(state, x_t, Mode::eval, false, cache);
  AuxCrossEntropyLoss loss({y_t});
  OutputGrads og;
  loss.evaluate(out, &og);
  std::vector<double> dfeat(D, 0.0);
  for (std::size_t k = 0; k < state.spec.aux_classes; ++k) {
    const double dz = og.d_aux_logits.at(0, k);
    for (std::size_t d = 0; d < D; ++d) dfeat[d] += dz * state.aux_w.at(k, d);
  }

  // finite-difference feature Jacobian, contracted with dfeat on the fly
  Tensor approx = Tensor::zeros_like(x_t);
  Tensor xp = x_t;
  for (std::size_t i = 0; i < in_dim; ++i) {
    const double orig = xp[i];
    xp[i] = orig + fd_step;
    const Tensor f_plus = forward_features(state, xp, Mode::eval);
    xp[i] = orig - fd_step;
    const Tensor f_minus = forward_features(state, xp, Mode::eval);
    xp[i] = orig;
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d)
      s += dfeat[d] * (f_plus[d] - f_minus[d]) / (2.0 * fd_step);
    approx[i] = s;
  }

  const Tensor exact = grad_input(state, loss, x_t, Mode::eval);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < in_dim; ++i) {
    const double d = approx[i] - exact[i];
    num += d * d;
    den += exact[i] * exact[i];
  }
  if (den == 0.0) return std::sqrt(num);
  return std::sqrt(num / den);
}

// ---- Davies-Bouldin ----------------------------------------------------------------------

double davies_bouldin(const Tensor& features, const std::vector<std::uint32_t>& labels,
                      std::vector<std::uint32_t>* excluded_classes) {
  const std::size_t N = features.dim(0), D = features.dim(1);
  if (labels.size() != N) throw InputError("davies_bouldin: label count mismatch");

  std::map<std::uint32_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < N; ++i) members[labels[i]].push_back(i);

  std::vector<std::uint32_t> classes;
  for (const auto& [cls, rows] : members) {
    if (rows.size() < 2) {
      if (excluded_classes) excluded_classes->push_back(cls);
      continue;
    }
    classes.push_back(cls);
  }
  if (classes.size() < 2)
    throw InputError("davies_bouldin: need at least two classes with two or more points");

  const std::size_t k = classes.size();
  std::vector<std::vector<double>> centroids(k, std::vector<double>(D, 0.0));
  std::vector<double> scatter(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    const auto& rows = members[classes[c]];
    for (std::size_t r : rows)
      for (std::size_t d = 0; d < D; ++d) centroids[c][d] += features.at(r, d);
    for (std::size_t d = 0; d < D; ++d) centroids[c][d] /= static_cast<double>(rows.size());
    double s = 0.0;
    for (std::size_t r : rows) {
      double sq = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double diff = features.at(r, d) - centroids[c][d];
        sq += diff * diff;
      }
      s += std::sqrt(sq);
    }
    scatter[c] = s / static_cast<double>(rows.size());
  }

  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double worst = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      double sq = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double diff = centroids[i][d] - centroids[j][d];
        sq += diff * diff;
      }
      const double dist = std::sqrt(sq);
      const double ratio = (scatter[i] + scatter[j]) / dist;  // +inf on coincident centroids
      worst = std::max(worst, ratio);
    }
    total += worst;
  }
  return total / static_cast<double>(k);
}

// ---- 2D projection -------------------------------------------------------------------------

Tensor project_2d(const Tensor& features) {
  const std::size_t N = features.dim(0), D = features.dim(1);
  if (N == 0 || D == 0) throw InputError("project_2d: empty input");

  Eigen::MatrixXd x(N, D);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d)) = features.at(n, d);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;

  Tensor out({N, 2});
  const std::size_t comps = std::min<std::size_t>(2, D);
  Eigen::MatrixXd cov = (x.transpose() * x) / std::max<double>(1.0, static_cast<double>(N) - 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalError("project_2d: eigensolver failed");

  for (std::size_t c = 0; c < comps; ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(D - 1 - c));
    // sign convention: the largest-magnitude loading is positive
    Eigen::Index imax = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
      if (std::abs(v(i)) > std::abs(v(imax))) imax = i;
    if (v(imax) < 0.0) v = -v;
    const Eigen::VectorXd proj = x * v;
    for (std::size_t n = 0; n < N; ++n) out.at(n, c) = proj(static_cast<Eigen::Index>(n));
  }
  return out;
}

DriftReport drift_analysis(const std::vector<Tensor>& feature_checkpoints,
                           const std::vector<int>& checkpoint_steps,
                           const std::vector<std::uint32_t>& labels) {
  if (feature_checkpoints.size() != checkpoint_steps.size() || feature_checkpoints.empty())
    throw InputError("drift_analysis: checkpoints and steps must align");
  for (std::size_t i = 1; i < checkpoint_steps.size(); ++i)
    if (checkpoint_steps[i] <= checkpoint_steps[i - 1])
      throw InputError("drift_analysis: checkpoint steps must ascend");

  DriftReport report;
  report.steps = checkpoint_steps;
  for (std::size_t i = 0; i < feature_checkpoints.size(); ++i) {
    std::vector<std::uint32_t> excluded;
    report.db_index.push_back(davies_bouldin(feature_checkpoints[i], labels, &excluded));
    report.projections.push_back(project_2d(feature_checkpoints[i]));
    if (i == 0) report.excluded_classes = excluded;
  }
  return report;
}

}  // namespace mixttt
