#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "groundseg/image.hpp"
#include "groundseg/mask.hpp"

namespace groundseg {

struct MarkedRegion {
  int index = 0;
  BinaryMask mask;
};

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed 10-colour palette, cycled by region index.
[[nodiscard]] Rgb palette_color(int index);

struct OverlayOptions {
  /// Blend weight of the palette colour over foreground pixels; 0 traces outlines only.
  float fill_alpha = 0.0F;
};

/// Set-of-marks rendering: each region's boundary in its palette colour and its
/// index drawn at the mask centroid. The input image is left untouched.
[[nodiscard]] RgbImage render_marks_overlay(const RgbImage& image,
                                            const std::vector<MarkedRegion>& regions,
                                            const OverlayOptions& options = {});

/// Pixel scale of the 5x7 label font for an image of the given height.
[[nodiscard]] int label_scale(int image_height);

}  // namespace groundseg
