#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace mixttt {

// Deterministic RNG wrapper. All distribution mapping is done by hand from
// raw engine draws so that a fixed seed gives the same stream on every
// platform; std::*_distribution is implementation defined and avoided.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi). Degenerate lo == hi returns lo exactly.
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n) {
    // Rejection sampling to kill modulo bias.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller (one value per call, cached pair).
  double normal();

  // Poisson via Knuth's product-of-uniforms method; fine for small lambda.
  std::uint64_t poisson(double lambda);

  // Uniform sample of k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  // Derive an independent child stream. Children with different tags (or from
  // different parents) get decorrelated seeds via splitmix64 mixing.
  Rng substream(std::uint64_t tag) const { return Rng(mix(seed_, tag)); }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mixttt
