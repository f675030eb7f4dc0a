#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixttt/rng.hpp"
#include "mixttt/tensor.hpp"

namespace mixttt {

struct Dataset {
  Tensor images;  // [N, C, H, W], values in [0, 1]
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return labels.size(); }
  Tensor image(std::size_t i) const;                       // [1, C, H, W]
  Dataset subset(std::size_t offset, std::size_t n) const;
  void validate(std::size_t num_classes) const;
};

// Datasets live in the same tensor container format as parameter images:
// one float tensor "images" and one tensor "labels" whose float64 payload
// carries the u32 labels.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

enum class CorruptionKind {
  gaussian_noise,
  shot_noise,
  impulse_noise,
  brightness,
  contrast,
  pixelate,
};

CorruptionKind corruption_kind_from_string(const std::string& name);
std::string corruption_kind_to_string(CorruptionKind kind);

struct CorruptionSpec {
  CorruptionKind kind{CorruptionKind::gaussian_noise};
  int severity{5};  // 1..5; 0 is an identity debug level
  std::uint64_t seed{0};

  void validate() const;
};

// Severity parameter tables, fixed constants:
//   gaussian_noise  sigma          {0.04, 0.06, 0.08, 0.09, 0.10}
//   shot_noise      photon count c {150, 100, 60, 40, 25}    (x -> Poisson(x*c)/c)
//   impulse_noise   pixel fraction {0.02, 0.04, 0.07, 0.10, 0.14} (salt/pepper)
//   brightness      additive shift {0.05, 0.09, 0.13, 0.17, 0.22}
//   contrast        scale factor   {0.75, 0.60, 0.45, 0.35, 0.25} (about the image mean)
//   pixelate        block size     {2, 2, 4, 4, 8}           (block averaging)
double corruption_parameter(CorruptionKind kind, int severity);

// Output clipped to [0, 1]; deterministic per spec.seed.
Tensor corrupt(const Tensor& images, const CorruptionSpec& spec);

struct PartnerSample {
  Tensor images;  // [B, C, H, W]
  std::vector<std::size_t> indices;
};

// Uniform draw of B training images; without replacement when B <= N.
PartnerSample sample_partners(const Dataset& ds, Rng& rng, std::size_t batch_size);

}  // namespace mixttt
