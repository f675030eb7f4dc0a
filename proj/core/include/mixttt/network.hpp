#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mixttt/serialize.hpp"
#include "mixttt/tensor.hpp"

namespace mixttt {

// Split network: shared encoder feeding two independent linear heads
// (main-task classifier and auxiliary-task classifier). All math is in
// float64; gradients are exact analytic backprop, for both parameters and
// inputs.

enum class Activation { smooth, relu };  // smooth = tanh, C-infinity
enum class LayerKind { conv, linear };
enum class Mode { train, eval };

struct LayerDesc {
  LayerKind kind{LayerKind::conv};
  std::size_t width{16};
  std::size_t stride{1};  // conv only; 3x3 kernel, padding 1
  bool normalize{false};
  bool activated{true};
};

struct NetworkSpec {
  std::size_t input_channels{3};
  std::size_t input_height{32};
  std::size_t input_width{32};
  std::vector<LayerDesc> encoder;
  std::size_t main_classes{10};
  std::size_t aux_classes{4};  // 4 for the rotation task
  Activation activation{Activation::smooth};

  void validate() const;            // throws ConfigError on malformed specs
  std::size_t feature_dim() const;  // width of the last encoder layer
  std::size_t param_count() const;  // closed form, heads included

  // 3 conv blocks (16/32/64, stride 2, norm + activation) + linear heads.
  static NetworkSpec desk_default(std::size_t main_classes = 10, std::size_t aux_classes = 4);
};

// Parse "conv:16:s2:n:a,conv:32:s2:n:a,linear:64:a" style descriptor lists.
std::vector<LayerDesc> parse_encoder_layout(const std::string& text);
std::string encoder_layout_to_string(const std::vector<LayerDesc>& layers);

struct NormParams {
  Tensor gamma, beta;                // learned affine, [C]
  Tensor running_mean, running_var;  // statistics, [C]; not parameters
};

struct EncoderLayer {
  LayerDesc desc;
  Tensor weight;  // conv: [Cout,Cin,3,3], linear: [U,D]
  Tensor bias;
  std::optional<NormParams> norm;
  // geometry resolved at build time; linear layers use out_h = out_w = 1
  std::size_t in_c{}, in_h{}, in_w{};
  std::size_t out_c{}, out_h{}, out_w{};
};

struct SplitNetworkState {
  NetworkSpec spec;
  std::vector<EncoderLayer> layers;
  Tensor main_w, main_b;  // phi1
  Tensor aux_w, aux_b;    // phi2

  std::size_t theta_size() const;        // encoder flat parameter count
  std::size_t total_param_size() const;  // theta + both heads
};

SplitNetworkState build_network(const NetworkSpec& spec, std::uint64_t seed);

// ---- flat parameter view -------------------------------------------------

struct ParamSelector {
  std::vector<std::size_t> indices;  // sorted flat indices
  std::size_t size() const { return indices.size(); }
};

ParamSelector selector_encoder_full(const SplitNetworkState& state);
ParamSelector selector_norm_affine(const SplitNetworkState& state);  // errors when no norm layers
ParamSelector selector_all(const SplitNetworkState& state);

std::vector<double> flat_params(const SplitNetworkState& state);
void set_flat_params(SplitNetworkState& state, const std::vector<double>& values);
// p[i] += scale * grad[i] for every i in the selector; grad is full-length.
void add_scaled_subset(SplitNetworkState& state, const ParamSelector& sel,
                       const std::vector<double>& grad, double scale);

// ---- forward / backward ---------------------------------------------------

struct LayerCacheEntry {
  Tensor output;  // post-activation, [N,C,H,W] (linear layers have H=W=1)
  Tensor x_hat;   // normalized pre-affine (norm layers)
  Tensor inv_std;
  Tensor batch_mean, batch_var;  // train mode only
};

struct ForwardCache {
  Mode mode{Mode::eval};
  Tensor batch;  // copy of the input batch
  std::vector<LayerCacheEntry> layers;
  Tensor features;  // [N, D]
};

struct ForwardResult {
  Tensor features;
  Tensor main_logits;
  Tensor aux_logits;
};

// Forward through the encoder. In train mode normalization uses batch
// statistics; running stats are folded in only when update_stats is set
// (pretraining). Eval mode is a pure function of (state, batch).
Tensor forward_features(SplitNetworkState& state, const Tensor& batch, Mode mode,
                        bool update_stats = false, ForwardCache* cache = nullptr);
Tensor forward_main(SplitNetworkState& state, const Tensor& batch, Mode mode = Mode::eval);
Tensor forward_aux(SplitNetworkState& state, const Tensor& batch, Mode mode = Mode::eval);
ForwardResult forward_all(SplitNetworkState& state, const Tensor& batch, Mode mode,
                          bool update_stats, ForwardCache& cache);

Tensor head_logits(const Tensor& features, const Tensor& w, const Tensor& b);

struct OutputGrads {
  // d loss / d network outputs; tensors left empty contribute zero.
  Tensor d_features;
  Tensor d_main_logits;
  Tensor d_aux_logits;
};

struct Gradients {
  std::vector<double> flat;  // full-model flat gradient
  Tensor input_grad;         // filled only when requested
};

Gradients backward(const SplitNetworkState& state, const ForwardCache& cache,
                   const OutputGrads& out_grads, bool want_input_grad = false);

// L2 norm of the encoder part of a full flat gradient.
double encoder_grad_norm(const SplitNetworkState& state, const std::vector<double>& flat_grad);

// ---- loss closures ----------------------------------------------------------

class BatchLoss {
 public:
  virtual ~BatchLoss() = default;
  // Loss value for the forward outputs; when grads is non-null, fills
  // d loss / d outputs.
  virtual double evaluate(const ForwardResult& out, OutputGrads* grads) const = 0;
};

struct SubsetGrad {
  std::vector<std::size_t> indices;
  std::vector<double> values;  // aligned with indices
};

// Gradient of the loss w.r.t. the selected parameter subset.
SubsetGrad grad_params(SplitNetworkState& state, const BatchLoss& loss, const Tensor& batch,
                       Mode mode, const ParamSelector& subset);
// Gradient of the loss w.r.t. the input batch; same shape as batch.
Tensor grad_input(SplitNetworkState& state, const BatchLoss& loss, const Tensor& batch,
                  Mode mode = Mode::eval);

// ---- snapshot / restore -----------------------------------------------------

// Bit-exact image of every parameter and normalization statistic.
struct ParameterImage {
  std::vector<NamedTensor> tensors;
  std::string to_bytes() const { return tensors_to_bytes(tensors); }
  std::size_t value_count() const;
};

ParameterImage snapshot(const SplitNetworkState& state);
void restore(SplitNetworkState& state, const ParameterImage& image);

void save_network(const std::string& path, const SplitNetworkState& state,
                  const std::vector<NamedTensor>& extra = {});
// Loads tensors saved by save_network into a freshly built state; tensors not
// describing network parameters/stats are returned untouched.
std::vector<NamedTensor> load_network(const std::string& path, SplitNetworkState& state);

}  // namespace mixttt
