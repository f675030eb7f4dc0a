#include "mixttt/data.hpp"

#include <algorithm>
#include <cmath>

#include "mixttt/errors.hpp"
#include "mixttt/serialize.hpp"

namespace mixttt {

Tensor Dataset::image(std::size_t i) const {
  const std::size_t px = images.numel() / images.dim(0);
  Tensor out({1, images.dim(1), images.dim(2), images.dim(3)});
  std::copy(images.data() + i * px, images.data() + (i + 1) * px, out.data());
  return out;
}

Dataset Dataset::subset(std::size_t offset, std::size_t n) const {
  if (offset + n > size()) throw InputError("dataset subset out of range");
  const std::size_t px = images.numel() / images.dim(0);
  Dataset out;
  out.images = Tensor({n, images.dim(1), images.dim(2), images.dim(3)});
  std::copy(images.data() + offset * px, images.data() + (offset + n) * px, out.images.data());
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(offset),
                    labels.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return out;
}

void Dataset::validate(std::size_t num_classes) const {
  if (images.rank() != 4) throw FormatError("dataset images must be [N,C,H,W]");
  if (images.dim(0) != labels.size()) throw FormatError("dataset image/label count mismatch");
  for (std::uint32_t l : labels) {
    if (l >= num_classes) throw FormatError("dataset label out of range");
  }
  for (std::size_t i = 0; i < images.numel(); ++i) {
    const double v = images[i];
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError("dataset pixel outside [0,1]");
  }
}

void save_dataset(const Dataset& ds, const std::string& path) {
  if (ds.images.dim(0) != ds.labels.size()) throw InputError("save_dataset: image/label count mismatch");
  Tensor labels({ds.labels.size()});
  for (std::size_t i = 0; i < ds.labels.size(); ++i) labels[i] = static_cast<double>(ds.labels[i]);
  save_tensor_file(path, {NamedTensor{"images", ds.images}, NamedTensor{"labels", std::move(labels)}});
}

Dataset load_dataset(const std::string& path) {
  const std::vector<NamedTensor> tensors = load_tensor_file(path);
  const NamedTensor* images = find_tensor(tensors, "images");
  const NamedTensor* labels = find_tensor(tensors, "labels");
  if (!images || !labels) throw FormatError("dataset file missing \"images\" or \"labels\": " + path);
  if (images->value.rank() != 4) throw FormatError("dataset images tensor must have rank 4: " + path);
  if (labels->value.rank() != 1 || labels->value.numel() != images->value.dim(0))
    throw FormatError("dataset labels tensor must be [N]: " + path);
  Dataset ds;
  ds.images = images->value;
  ds.labels.resize(labels->value.numel());
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const double v = labels->value[i];
    if (v < 0.0 || v != std::floor(v) || v > 4294967295.0)
      throw FormatError("dataset label payload is not a u32 value");
    ds.labels[i] = static_cast<std::uint32_t>(v);
  }
  return ds;
}

CorruptionKind corruption_kind_from_string(const std::string& name) {
  if (name == "gaussian_noise") return CorruptionKind::gaussian_noise;
  if (name == "shot_noise") return CorruptionKind::shot_noise;
  if (name == "impulse_noise") return CorruptionKind::impulse_noise;
  if (name == "brightness") return CorruptionKind::brightness;
  if (name == "contrast") return CorruptionKind::contrast;
  if (name == "pixelate") return CorruptionKind::pixelate;
  throw ConfigError("unknown corruption kind: " + name);
}

std::string corruption_kind_to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::shot_noise: return "shot_noise";
    case CorruptionKind::impulse_noise: return "impulse_noise";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::pixelate: return "pixelate";
  }
  throw ConfigError("unknown corruption kind");
}

void CorruptionSpec::validate() const {
  if (severity < 0 || severity > 5)
    throw ConfigError("corruption severity must be in 0..5 (0 = identity debug level)");
}

double corruption_parameter(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 5) throw ConfigError("corruption parameter defined for severity 1..5");
  static const double kGaussianSigma[5] = {0.04, 0.06, 0.08, 0.09, 0.10};
  static const double kShotPhotons[5] = {150.0, 100.0, 60.0, 40.0, 25.0};
  static const double kImpulseFraction[5] = {0.02, 0.04, 0.07, 0.10, 0.14};
  static const double kBrightnessShift[5] = {0.05, 0.09, 0.13, 0.17, 0.22};
  static const double kContrastScale[5] = {0.75, 0.60, 0.45, 0.35, 0.25};
  static const double kPixelateBlock[5] = {2.0, 2.0, 4.0, 4.0, 8.0};
  const int i = severity - 1;
  switch (kind) {
    case CorruptionKind::gaussian_noise: return kGaussianSigma[i];
    case CorruptionKind::shot_noise: return kShotPhotons[i];
    case CorruptionKind::impulse_noise: return kImpulseFraction[i];
    case CorruptionKind::brightness: return kBrightnessShift[i];
    case CorruptionKind::contrast: return kContrastScale[i];
    case CorruptionKind::pixelate: return kPixelateBlock[i];
  }
  throw ConfigError("unknown corruption kind");
}

namespace {

double clip01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

Tensor corrupt(const Tensor& images, const CorruptionSpec& spec) {
  spec.validate();
  if (images.rank() != 4) throw InputError("corrupt: images must be [N,C,H,W]");
  Tensor out = images;
  if (spec.severity == 0) return out;  // identity debug level

  Rng rng(Rng::mix(spec.seed, 0xc0c0 + static_cast<std::uint64_t>(spec.kind)));
  const double param = corruption_parameter(spec.kind, spec.severity);
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const std::size_t px = C * H * W;

  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: {
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = clip01(out[i] + param * rng.normal());
      break;
    }
    case CorruptionKind::shot_noise: {
      for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = clip01(static_cast<double>(rng.poisson(out[i] * param)) / param);
      break;
    }
    case CorruptionKind::impulse_noise: {
      for (std::size_t i = 0; i < out.numel(); ++i) {
        const double u = rng.uniform();
        if (u < param * 0.5)
          out[i] = 0.0;
        else if (u < param)
          out[i] = 1.0;
      }
      break;
    }
    case CorruptionKind::brightness: {
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = clip01(out[i] + param);
      break;
    }
    case CorruptionKind::contrast: {
      for (std::size_t n = 0; n < N; ++n) {
        double* img = out.data() + n * px;
        double mean = 0.0;
        for (std::size_t i = 0; i < px; ++i) mean += img[i];
        mean /= static_cast<double>(px);
        for (std::size_t i = 0; i < px; ++i) img[i] = clip01((img[i] - mean) * param + mean);
      }
      break;
    }
    case CorruptionKind::pixelate: {
      const std::size_t k = static_cast<std::size_t>(param);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t h0 = 0; h0 < H; h0 += k) {
            for (std::size_t w0 = 0; w0 < W; w0 += k) {
              const std::size_t h1 = std::min(H, h0 + k), w1 = std::min(W, w0 + k);
              double s = 0.0;
              for (std::size_t h = h0; h < h1; ++h)
                for (std::size_t w = w0; w < w1; ++w) s += out.at(n, c, h, w);
              s /= static_cast<double>((h1 - h0) * (w1 - w0));
              for (std::size_t h = h0; h < h1; ++h)
                for (std::size_t w = w0; w < w1; ++w) out.at(n, c, h, w) = s;
            }
          }
        }
      }
      break;
    }
  }
  return out;
}

PartnerSample sample_partners(const Dataset& ds, Rng& rng, std::size_t batch_size) {
  if (batch_size == 0) throw InputError("sample_partners: batch size must be >= 1");
  if (ds.size() == 0) throw InputError("sample_partners: empty dataset");
  PartnerSample out;
  if (batch_size <= ds.size()) {
    out.indices = rng.sample_without_replacement(ds.size(), batch_size);
  } else {
    out.indices.resize(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) out.indices[i] = rng.uniform_index(ds.size());
  }
  const std::size_t px = ds.images.numel() / ds.images.dim(0);
  out.images = Tensor({batch_size, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
  for (std::size_t b = 0; b < batch_size; ++b) {
    const double* src = ds.images.data() + out.indices[b] * px;
    std::copy(src, src + px, out.images.data() + b * px);
  }
  return out;
}

}  // namespace mixttt
