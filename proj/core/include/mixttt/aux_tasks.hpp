#pragma once

#include <cstdint>
#include <vector>

#include "mixttt/mixup.hpp"
#include "mixttt/network.hpp"
#include "mixttt/rng.hpp"
#include "mixttt/serialize.hpp"
#include "mixttt/tensor.hpp"

namespace mixttt {

enum class AuxTaskKind { rotation, entropy_min, contrastive_align };
enum class ParamSubset { encoder_full, norm_affine_only };

AuxTaskKind aux_task_kind_from_string(const std::string& name);
std::string aux_task_kind_to_string(AuxTaskKind kind);

struct AuxTaskSpec {
  AuxTaskKind kind{AuxTaskKind::rotation};
  ParamSubset param_subset{ParamSubset::encoder_full};
  MixupRatioSpec ratio_spec;
  double weight_contrastive{1.0};
  double weight_align{1.0};
  double temperature{0.5};

  void validate() const;  // entropy_min pins norm_affine_only, rotation pins encoder_full
  static AuxTaskSpec rotation_default();          // U[0.7, 1]
  static AuxTaskSpec entropy_min_default();       // U[0.95, 1]
  static AuxTaskSpec contrastive_align_default(); // U[0.9, 1]
};

// ---- rotation ---------------------------------------------------------------

struct RotatedBatch {
  Tensor images;                     // [4B, C, H, W], k-major blocks
  std::vector<std::uint32_t> labels; // label k = k*90 degrees counter-clockwise
};

// Rotate a batch by k*90 degrees counter-clockwise; square images only.
Tensor rotate_k90(const Tensor& batch, int k);

// 4 rotated copies per source image; block b*B+i holds image i rotated by
// b*90 degrees, labelled b.
RotatedBatch rotation_expand(const Tensor& batch);

// ---- losses -----------------------------------------------------------------

// Mean softmax cross-entropy against integer labels; log stabilized with
// +1e-12 inside the log.
double cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& labels);
// Mean Shannon entropy of softmax rows, in [0, ln K].
double entropy_loss(const Tensor& logits);

// Loss closures over network outputs (exact analytic output-gradients).
class AuxCrossEntropyLoss : public BatchLoss {
 public:
  explicit AuxCrossEntropyLoss(std::vector<std::uint32_t> labels) : labels_(std::move(labels)) {}
  double evaluate(const ForwardResult& out, OutputGrads* grads) const override;

 private:
  std::vector<std::uint32_t> labels_;
};

class MainCrossEntropyLoss : public BatchLoss {
 public:
  explicit MainCrossEntropyLoss(std::vector<std::uint32_t> labels) : labels_(std::move(labels)) {}
  double evaluate(const ForwardResult& out, OutputGrads* grads) const override;

 private:
  std::vector<std::uint32_t> labels_;
};

class MainEntropyLoss : public BatchLoss {
 public:
  double evaluate(const ForwardResult& out, OutputGrads* grads) const override;
};

// Joint pretraining objective: main cross-entropy plus beta * aux rotation
// cross-entropy evaluated on rows known to be rotated copies.
class JointPretrainLoss : public BatchLoss {
 public:
  JointPretrainLoss(std::vector<std::uint32_t> main_labels, std::size_t main_rows,
                    std::vector<std::uint32_t> aux_labels, double beta)
      : main_labels_(std::move(main_labels)),
        main_rows_(main_rows),
        aux_labels_(std::move(aux_labels)),
        beta_(beta) {}
  double evaluate(const ForwardResult& out, OutputGrads* grads) const override;

 private:
  std::vector<std::uint32_t> main_labels_;  // labels for rows [0, main_rows)
  std::size_t main_rows_;
  std::vector<std::uint32_t> aux_labels_;   // labels for rows [main_rows, N)
  double beta_;
};

// ---- entropy-minimization parameter subset ------------------------------------

// Scale/shift parameters of every normalization layer; errors when the
// network has none.
ParamSelector collect_affine_params(const SplitNetworkState& state);

// ---- contrastive agreement + moment alignment ---------------------------------

struct TrainFeatureStats {
  Tensor mean;  // [D]
  Tensor var;   // [D]
};

std::vector<NamedTensor> feature_stats_to_tensors(const TrainFeatureStats& stats);
TrainFeatureStats feature_stats_from_tensors(const std::vector<NamedTensor>& tensors);

// Normalized-temperature agreement over 2B feature rows laid out as
// [views(B); counterparts(B)]; row i pairs with row i+B. Returns the loss and
// optionally d loss / d features.
double nt_xent_loss(const Tensor& features, double temperature, Tensor* d_features = nullptr);

// Squared distance between the batch feature moments (rows) and the stored
// training-set moments, averaged over dimensions.
double moment_alignment_loss(const Tensor& features, const TrainFeatureStats& stats,
                             Tensor* d_features = nullptr);

// Combined TTT++-style objective over features of a [views; mixed] batch.
class ContrastiveAlignLoss : public BatchLoss {
 public:
  ContrastiveAlignLoss(const TrainFeatureStats* stats, double w_contrastive, double w_align,
                       double temperature)
      : stats_(stats), w_con_(w_contrastive), w_align_(w_align), tau_(temperature) {}
  double evaluate(const ForwardResult& out, OutputGrads* grads) const override;

 private:
  const TrainFeatureStats* stats_;
  double w_con_, w_align_, tau_;
};

// Convenience surface: forwards [views; mixed] in train mode and evaluates the
// combined loss. views and mixed must have the same row count (>= 2 when the
// contrastive weight is nonzero).
double contrastive_alignment_loss(SplitNetworkState& state, const Tensor& views,
                                  const Tensor& mixed, const TrainFeatureStats& stats,
                                  double w_contrastive, double w_align, double temperature);

// Random pad-4 crop plus horizontal flip; consumes exactly three draws per
// row so paired runs keep their streams aligned.
Tensor augment_crop_flip(const Tensor& batch, Rng& rng);

// Concatenate two batches along the row dimension.
Tensor concat_rows(const Tensor& a, const Tensor& b);

}  // namespace mixttt
