#pragma once

#include <cstdint>
#include <vector>

#include "mixttt/rng.hpp"
#include "mixttt/tensor.hpp"

namespace mixttt {

enum class RatioGranularity { per_step, per_pair };

// Convention: the stored ratio is the weight on the TEST sample, so the
// uniform bounds read literally as "proportion for the test sample"
// (e.g. U[0.7, 1] keeps at least 70% test content in every mixed row).
struct MixupRatioSpec {
  double low{0.7};
  double high{1.0};
  RatioGranularity granularity{RatioGranularity::per_pair};

  void validate() const;  // 0 <= low <= high <= 1
};

struct MixedBatch {
  Tensor inputs;                         // [B, C, H, W]
  std::vector<std::size_t> partner_ids;  // training indices; empty when unmixed
  std::vector<double> ratios;            // weight-on-test per row
  std::vector<std::size_t> test_ids;     // which test sample each row derives from
  std::size_t rows() const { return ratios.size(); }
};

// Handle to the training images used as mixing partners.
class TrainPartnerPool {
 public:
  TrainPartnerPool() = default;
  explicit TrainPartnerPool(const Tensor* images) : images_(images) {}
  std::size_t size() const;
  const Tensor* images() const { return images_; }
  bool empty() const { return size() == 0; }

 private:
  const Tensor* images_ = nullptr;  // [N, C, H, W], not owned
};

double sample_ratio(const MixupRatioSpec& spec, Rng& rng);

// out = ratio * x_test + (1 - ratio) * x_train, elementwise.
Tensor mix_pair(const Tensor& x_test, const Tensor& x_train, double ratio_on_test);

// B rows pairing test samples with randomly drawn training partners. With a
// single test sample every row reuses it; with several, rows cycle through
// them starting at test_offset (row b derives from test (test_offset + b) mod
// T, so multi-step runs with B < T cover the whole set). Partners are drawn
// without replacement within a call when B <= pool size.
MixedBatch build_mixed_batch(const Tensor& test_samples, const TrainPartnerPool& pool,
                             const MixupRatioSpec& spec, std::size_t batch_size, Rng& rng,
                             std::size_t test_offset = 0);

// The unmixed counterpart: B rows cycling the test samples, ratios pinned to
// 1. Shares the row layout of build_mixed_batch so that a degenerate ratio
// spec (1,1) and the plain path produce bitwise identical batches.
MixedBatch build_plain_batch(const Tensor& test_samples, std::size_t batch_size,
                             std::size_t test_offset = 0);

}  // namespace mixttt
