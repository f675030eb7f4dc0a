#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "mixttt/aux_tasks.hpp"
#include "mixttt/network.hpp"
#include "mixttt/rng.hpp"
#include "mixttt/tensor.hpp"

namespace mixttt::testutil {

// Relative error with an absolute floor: coordinates whose magnitude sits
// below the floor are compared absolutely (finite differences carry ~1e-11
// noise there).
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline Tensor random_batch(std::size_t n, const NetworkSpec& spec, std::uint64_t seed,
                           double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t({n, spec.input_channels, spec.input_height, spec.input_width});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline double loss_at(SplitNetworkState& state, const BatchLoss& loss, const Tensor& batch,
                      Mode mode) {
  ForwardCache cache;
  ForwardResult out = forward_all(state, batch, mode, false, cache);
  return loss.evaluate(out, nullptr);
}

// Central finite difference over one flat parameter coordinate.
inline double fd_param(SplitNetworkState& state, const BatchLoss& loss, const Tensor& batch,
                       Mode mode, std::size_t index, double h = 1e-5) {
  std::vector<double> params = flat_params(state);
  const double orig = params[index];
  params[index] = orig + h;
  set_flat_params(state, params);
  const double up = loss_at(state, loss, batch, mode);
  params[index] = orig - h;
  set_flat_params(state, params);
  const double down = loss_at(state, loss, batch, mode);
  params[index] = orig;
  set_flat_params(state, params);
  return (up - down) / (2.0 * h);
}

// Central finite difference over one input coordinate.
inline double fd_input(SplitNetworkState& state, const BatchLoss& loss, Tensor batch, Mode mode,
                       std::size_t index, double h = 1e-5) {
  const double orig = batch[index];
  batch[index] = orig + h;
  const double up = loss_at(state, loss, batch, mode);
  batch[index] = orig - h;
  const double down = loss_at(state, loss, batch, mode);
  return (up - down) / (2.0 * h);
}

// Small smooth network exercising conv (strided + plain), normalization,
// and a normalized linear layer.
inline NetworkSpec toy_smooth_spec() {
  NetworkSpec spec;
  spec.input_channels = 2;
  spec.input_height = 6;
  spec.input_width = 6;
  spec.encoder = {
      {LayerKind::conv, 4, 2, true, true},
      {LayerKind::conv, 6, 1, false, true},
      {LayerKind::linear, 8, 1, true, true},
  };
  spec.main_classes = 3;
  spec.aux_classes = 4;
  spec.activation = Activation::smooth;
  return spec;
}

class ConstantLoss : public BatchLoss {
 public:
  double evaluate(const ForwardResult&, OutputGrads*) const override { return 42.0; }
};

}  // namespace mixttt::testutil
