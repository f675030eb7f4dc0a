#pragma once

#include <cstdint>
#include <vector>

#include "mixttt/engine.hpp"
#include "mixttt/network.hpp"
#include "mixttt/tensor.hpp"

namespace mixttt {

// ---- scalar fields over the input space ------------------------------------------

// Differentiable scalar function of an image; the substrate for the
// expansion checks. The quadratic field provides a closed-form self-test.
class ScalarField {
 public:
  virtual ~ScalarField() = default;
  virtual double value(const Tensor& x) const = 0;
  virtual Tensor gradient(const Tensor& x) const = 0;
};

// Auxiliary-head cross-entropy of the network at a single input (eval mode,
// smooth activation required for the expansion checks).
class AuxLossField : public ScalarField {
 public:
  AuxLossField(SplitNetworkState& state, std::uint32_t label);
  double value(const Tensor& x) const override;
  Tensor gradient(const Tensor& x) const override;

 private:
  SplitNetworkState* state_;
  std::uint32_t label_;
};

// L(x) = ||x||^2; expansion remainder is exactly mu^2 ||x_i - x_t||^2.
class QuadraticField : public ScalarField {
 public:
  double value(const Tensor& x) const override;
  Tensor gradient(const Tensor& x) const override;
};

// ---- Taylor-expansion verification --------------------------------------------------

struct TaylorReport {
  double L_t{0.0};
  std::vector<double> mu;           // expansion parameter: weight on the training sample
  std::vector<double> L_mt;         // loss at the mixed input
  std::vector<double> first_order;  // mu * (x_i - x_t)' grad L(x_t)
  std::vector<double> remainder;    // |L_mt - L_t - first_order|
  std::vector<bool> used_in_fit;    // false when the remainder underflows
  double fitted_exponent{0.0};      // log-log least-squares slope
  std::vector<double> ratios;       // remainder(mu_k) / remainder(mu_{k+1})
};

// mu * (x_i - x_t)' grad L(x_t): the first-order term the mixed loss adds on
// top of the unmixed loss.
double first_order_term(const ScalarField& field, const Tensor& x_t, const Tensor& x_i, double mu);

// mu_list must lie in (0, 0.1] and descend by halves. Remainders below 1e-14
// are dropped from the fit and flagged in the report.
TaylorReport taylor_verify(const ScalarField& field, const Tensor& x_t, const Tensor& x_i,
                           const std::vector<double>& mu_list);

// ---- gradient-norm control -----------------------------------------------------------

struct GradNormSummary {
  std::vector<std::vector<double>> plain_traces;  // [sample][step]
  std::vector<std::vector<double>> mix_traces;
  double mean_plain{0.0};
  double mean_mix{0.0};
  double mean_diff{0.0};  // plain - mix, averaged over samples
  double t_stat{0.0};     // paired one-sided statistic
  std::size_t n_samples{0};
  bool mix_not_larger{false};
};

// Paired episodes per test sample (shared seed), differing only in
// mix_enabled; summarizes the per-step encoder gradient norms.
GradNormSummary grad_norm_compare(const SplitNetworkState& state, const Tensor& test_samples,
                                  const EpisodeConfig& plain_config, const EpisodeConfig& mix_config,
                                  const TrainPartnerPool& pool,
                                  const TrainFeatureStats* stats = nullptr);

// ---- chain-rule consistency -----------------------------------------------------------

// || grad_x L - J' (dL/dfeat) || / || grad_x L || with J the encoder input
// Jacobian materialized by central finite differences. Toy-scale inputs only.
double chain_rule_residual(SplitNetworkState& state, const Tensor& x_t, std::uint32_t y_t,
                           double fd_step = 1e-5);

// ---- embedding drift --------------------------------------------------------------------

// Davies-Bouldin index (Euclidean, mean-distance scatter). Classes with a
// single point are excluded and reported; fewer than two usable classes is an
// error. Coincident centroids of distinct clusters yield +inf.
double davies_bouldin(const Tensor& features, const std::vector<std::uint32_t>& labels,
                      std::vector<std::uint32_t>* excluded_classes = nullptr);

// Top-2 principal-component coordinates, sign-fixed by forcing the
// largest-magnitude loading of each component positive. Deterministic.
Tensor project_2d(const Tensor& features);

struct DriftReport {
  std::vector<int> steps;            // ascending checkpoint steps
  std::vector<double> db_index;      // per checkpoint
  std::vector<Tensor> projections;   // [N,2] per checkpoint
  std::vector<std::uint32_t> excluded_classes;
};

DriftReport drift_analysis(const std::vector<Tensor>& feature_checkpoints,
                           const std::vector<int>& checkpoint_steps,
                           const std::vector<std::uint32_t>& labels);

}  // namespace mixttt
