#include "mixttt/mixup.hpp"

#include "mixttt/errors.hpp"

namespace mixttt {

void MixupRatioSpec::validate() const {
  if (!(0.0 <= low && low <= high && high <= 1.0))
    throw ConfigError("mixup ratio spec requires 0 <= low <= high <= 1");
}

std::size_t TrainPartnerPool::size() const { return images_ ? images_->dim(0) : 0; }

double sample_ratio(const MixupRatioSpec& spec, Rng& rng) {
  spec.validate();
  return rng.uniform(spec.low, spec.high);
}

Tensor mix_pair(const Tensor& x_test, const Tensor& x_train, double ratio_on_test) {
  if (!x_test.same_shape(x_train)) throw InputError("mix_pair: shape mismatch");
  Tensor out = Tensor::zeros_like(x_test);
  const double r = ratio_on_test, q = 1.0 - ratio_on_test;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = r * x_test[i] + q * x_train[i];
  return out;
}

namespace {

std::size_t image_size(const Tensor& t) { return t.numel() / t.dim(0); }

void copy_row(const Tensor& src, std::size_t row, double* dst, std::size_t n) {
  const double* p = src.data() + row * n;
  std::copy(p, p + n, dst);
}

}  // namespace

MixedBatch build_mixed_batch(const Tensor& test_samples, const TrainPartnerPool& pool,
                             const MixupRatioSpec& spec, std::size_t batch_size, Rng& rng,
                             std::size_t test_offset) {
  spec.validate();
  if (batch_size == 0) throw InputError("build_mixed_batch: batch size must be >= 1");
  if (pool.empty()) throw InputError("build_mixed_batch: empty training partner pool");
  if (test_samples.rank() != 4) throw InputError("build_mixed_batch: test samples must be [T,C,H,W]");
  const Tensor& train = *pool.images();
  const std::size_t n = pool.size();
  const std::size_t px = image_size(test_samples);
  if (image_size(train) != px) throw InputError("build_mixed_batch: pool image shape mismatch");

  std::vector<std::size_t> partners;
  if (batch_size <= n) {
    partners = rng.sample_without_replacement(n, batch_size);
  } else {
    partners.resize(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) partners[i] = rng.uniform_index(n);
  }

  MixedBatch out;
  out.inputs = Tensor({batch_size, test_samples.dim(1), test_samples.dim(2), test_samples.dim(3)});
  out.partner_ids = partners;
  out.ratios.resize(batch_size);
  out.test_ids.resize(batch_size);

  double step_ratio = 0.0;
  if (spec.granularity == RatioGranularity::per_step) step_ratio = sample_ratio(spec, rng);

  const std::size_t t_count = test_samples.dim(0);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t t = (test_offset + b) % t_count;
    const double r = spec.granularity == RatioGranularity::per_step ? step_ratio : sample_ratio(spec, rng);
    out.test_ids[b] = t;
    out.ratios[b] = r;
    const double* xt = test_samples.data() + t * px;
    const double* xi = train.data() + partners[b] * px;
    double* dst = out.inputs.data() + b * px;
    const double q = 1.0 - r;
    for (std::size_t i = 0; i < px; ++i) dst[i] = r * xt[i] + q * xi[i];
  }
  return out;
}

MixedBatch build_plain_batch(const Tensor& test_samples, std::size_t batch_size,
                             std::size_t test_offset) {
  if (batch_size == 0) throw InputError("build_plain_batch: batch size must be >= 1");
  if (test_samples.rank() != 4) throw InputError("build_plain_batch: test samples must be [T,C,H,W]");
  const std::size_t px = image_size(test_samples);
  MixedBatch out;
  out.inputs = Tensor({batch_size, test_samples.dim(1), test_samples.dim(2), test_samples.dim(3)});
  out.ratios.assign(batch_size, 1.0);
  out.test_ids.resize(batch_size);
  const std::size_t t_count = test_samples.dim(0);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t t = (test_offset + b) % t_count;
    out.test_ids[b] = t;
    copy_row(test_samples, t, out.inputs.data() + b * px, px);
  }
  return out;
}

}  // namespace mixttt
