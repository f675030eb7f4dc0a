#include "mixttt/synth.hpp"

#include <array>
#include <cmath>

#include "mixttt/errors.hpp"
#include "mixttt/rng.hpp"

namespace mixttt {

namespace {

struct Seg {
  double x0, y0, x1, y1;  // glyph box coordinates, [0,1], y down
};

using Glyph = std::array<Seg, 4>;  // unused trailing segments have x0 < 0

constexpr Seg kNone{-1.0, 0.0, 0.0, 0.0};

// clang-format off
const Glyph kGlyphs[10] = {
    // L
    {{{0.25, 0.10, 0.25, 0.90}, {0.25, 0.90, 0.80, 0.90}, kNone, kNone}},
    // 7
    {{{0.20, 0.10, 0.80, 0.10}, {0.80, 0.10, 0.35, 0.90}, kNone, kNone}},
    // F
    {{{0.30, 0.10, 0.30, 0.90}, {0.30, 0.10, 0.80, 0.10}, {0.30, 0.50, 0.70, 0.50}, kNone}},
    // 4
    {{{0.65, 0.10, 0.20, 0.60}, {0.20, 0.60, 0.80, 0.60}, {0.65, 0.10, 0.65, 0.90}, kNone}},
    // Z with a serif (serif breaks the 180-degree self-symmetry)
    {{{0.20, 0.15, 0.80, 0.15}, {0.80, 0.15, 0.20, 0.85}, {0.20, 0.85, 0.80, 0.85}, {0.20, 0.15, 0.20, 0.35}}},
    // h
    {{{0.25, 0.10, 0.25, 0.90}, {0.25, 0.50, 0.75, 0.50}, {0.75, 0.50, 0.75, 0.90}, kNone}},
    // K
    {{{0.30, 0.10, 0.30, 0.90}, {0.75, 0.15, 0.30, 0.55}, {0.45, 0.45, 0.80, 0.90}, kNone}},
    // right-pointing triangle
    {{{0.25, 0.15, 0.25, 0.85}, {0.25, 0.15, 0.80, 0.50}, {0.25, 0.85, 0.80, 0.50}, kNone}},
    // U with a serif
    {{{0.25, 0.10, 0.25, 0.80}, {0.75, 0.10, 0.75, 0.80}, {0.25, 0.80, 0.75, 0.80}, {0.75, 0.10, 0.90, 0.10}}},
    // lightning zigzag with a serif
    {{{0.80, 0.10, 0.30, 0.35}, {0.30, 0.35, 0.70, 0.60}, {0.70, 0.60, 0.20, 0.90}, {0.20, 0.90, 0.20, 0.75}}},
};
// clang-format on

double dist_to_seg(double px, double py, const Seg& s) {
  const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  const double wx = px - s.x0, wy = py - s.y0;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

double clip01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

Dataset make_synthetic_dataset(std::size_t n, std::uint64_t seed, std::size_t num_classes) {
  if (num_classes == 0 || num_classes > 10) throw ConfigError("synthetic dataset supports 1..10 classes");
  constexpr std::size_t kSize = 32, kChannels = 3;
  Dataset ds;
  ds.images = Tensor({n, kChannels, kSize, kSize});
  ds.labels.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(Rng::mix(seed, 0x5a11 + i));
    const std::size_t cls = i % num_classes;
    ds.labels[i] = static_cast<std::uint32_t>(cls);

    const double box = 22.0 * rng.uniform(0.85, 1.10);           // glyph box in pixels
    const double ox = (kSize - box) * 0.5 + rng.uniform(-3.0, 3.0);
    const double oy = (kSize - box) * 0.5 + rng.uniform(-3.0, 3.0);
    const double half_width = rng.uniform(1.2, 1.7);             // stroke half-thickness
    const double edge = 0.8;                                     // anti-alias ramp
    const double fg = rng.uniform(0.50, 0.90);
    const double bg = rng.uniform(0.08, 0.22);
    const double ramp_amp = rng.uniform(0.0, 0.12);
    const double ramp_dir = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double rdx = std::cos(ramp_dir), rdy = std::sin(ramp_dir);
    double gain[kChannels];
    for (double& g : gain) g = 1.0 + rng.uniform(-0.12, 0.12);

    const Glyph& glyph = kGlyphs[cls];
    for (std::size_t h = 0; h < kSize; ++h) {
      for (std::size_t w = 0; w < kSize; ++w) {
        // distance from the pixel center to the nearest stroke, in pixels
        const double gx = (static_cast<double>(w) + 0.5 - ox) / box;
        const double gy = (static_cast<double>(h) + 0.5 - oy) / box;
        double d = 1e9;
        for (const Seg& s : glyph) {
          if (s.x0 < 0.0) break;
          d = std::min(d, dist_to_seg(gx, gy, s) * box);
        }
        double stroke = (half_width - d) / edge + 1.0;
        stroke = stroke < 0.0 ? 0.0 : (stroke > 1.0 ? 1.0 : stroke);
        const double ramp =
            ramp_amp * 0.5 *
            (1.0 + (rdx * (static_cast<double>(w) / kSize - 0.5) + rdy * (static_cast<double>(h) / kSize - 0.5)) * 2.0);
        const double base = bg + ramp + fg * stroke;
        for (std::size_t c = 0; c < kChannels; ++c) {
          const double noise = 0.02 * rng.normal();
          ds.images.at(i, c, h, w) = clip01(base * gain[c] + noise);
        }
      }
    }
  }
  return ds;
}

}  // namespace mixttt
