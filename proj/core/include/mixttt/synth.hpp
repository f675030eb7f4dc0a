#pragma once

#include <cstdint>

#include "mixttt/data.hpp"

namespace mixttt {

// Procedural 10-class glyph dataset, 3x32x32 pixels in [0,1]. Classes are
// stroke glyphs chosen to be mutually distinct and free of 90/180-degree
// self-symmetry, so both the 10-way main task and 4-way rotation prediction
// are learnable. Per-sample variation: subpixel translation, scale and stroke
// width jitter, foreground/background contrast jitter, a random background
// ramp, light texture noise, and per-channel gain.
Dataset make_synthetic_dataset(std::size_t n, std::uint64_t seed, std::size_t num_classes = 10);

}  // namespace mixttt
