#include "groundseg/overlay.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace groundseg {

namespace {

constexpr std::array<Rgb, 10> kPalette{{
    {230, 25, 75},
    {60, 180, 75},
    {255, 225, 25},
    {0, 130, 200},
    {245, 130, 48},
    {145, 30, 180},
    {70, 240, 240},
    {240, 50, 230},
    {210, 245, 60},
    {250, 190, 212},
}};

// 5x7 digit glyphs, one byte per row, low five bits used (bit 4 = leftmost).
constexpr std::array<std::array<std::uint8_t, 7>, 10> kDigits{{
    {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E},
    {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
    {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F},
    {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
    {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},
    {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
    {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},
    {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
    {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},
    {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},
}};

void draw_label(RgbImage& img, const std::string& text, int centre_row, int centre_col, Rgb color) {
  const int scale = label_scale(img.height);
  const int glyph_w = 5 * scale;
  const int glyph_h = 7 * scale;
  const int gap = scale;
  const int n = static_cast<int>(text.size());
  const int text_w = n * glyph_w + (n - 1) * gap;
  // dark backing plate with a one-unit margin so the digits read on any background
  const int pad = scale;
  int left = centre_col - text_w / 2;
  int top = centre_row - glyph_h / 2;
  left = std::clamp(left, pad, std::max(pad, img.width - text_w - pad));
  top = std::clamp(top, pad, std::max(pad, img.height - glyph_h - pad));
  for (int r = top - pad; r < top + glyph_h + pad; ++r) {
    for (int c = left - pad; c < left + text_w + pad; ++c) {
      if (r >= 0 && r < img.height && c >= 0 && c < img.width) img.set_pixel(r, c, 0, 0, 0);
    }
  }
  for (int k = 0; k < n; ++k) {
    const auto& glyph = kDigits[static_cast<std::size_t>(text[static_cast<std::size_t>(k)] - '0')];
    const int x0 = left + k * (glyph_w + gap);
    for (int gr = 0; gr < 7; ++gr) {
      for (int gc = 0; gc < 5; ++gc) {
        if (((glyph[static_cast<std::size_t>(gr)] >> (4 - gc)) & 1) == 0) continue;
        for (int dy = 0; dy < scale; ++dy) {
          for (int dx = 0; dx < scale; ++dx) {
            const int r = top + gr * scale + dy;
            const int c = x0 + gc * scale + dx;
            if (r >= 0 && r < img.height && c >= 0 && c < img.width) {
              img.set_pixel(r, c, color[0], color[1], color[2]);
            }
          }
        }
      }
    }
  }
}

}  // namespace

Rgb palette_color(int index) {
  const int n = static_cast<int>(kPalette.size());
  return kPalette[static_cast<std::size_t>(((index % n) + n) % n)];
}

int label_scale(int image_height) {
  return std::max(1, static_cast<int>(std::lround(0.02 * image_height / 7.0)));
}

RgbImage render_marks_overlay(const RgbImage& image, const std::vector<MarkedRegion>& regions,
                              const OverlayOptions& options) {
  std::set<int> seen;
  for (const auto& region : regions) {
    if (region.mask.height() != image.height || region.mask.width() != image.width) {
      throw DimensionError("overlay mask does not match image dimensions");
    }
    if (!seen.insert(region.index).second) {
      throw Error("duplicate overlay region index " + std::to_string(region.index));
    }
  }
  RgbImage out = image;
  if (regions.empty()) return out;

  const float alpha = std::clamp(options.fill_alpha, 0.0F, 1.0F);
  for (const auto& region : regions) {
    const Rgb color = palette_color(region.index);
    const auto& m = region.mask;
    for (int r = 0; r < m.height(); ++r) {
      for (int c = 0; c < m.width(); ++c) {
        if (!m.at(r, c)) continue;
        const bool boundary = r == 0 || c == 0 || r == m.height() - 1 || c == m.width() - 1 ||
                              !m.at(r - 1, c) || !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1);
        if (boundary) {
          out.set_pixel(r, c, color[0], color[1], color[2]);
        } else if (alpha > 0.0F) {
          for (int ch = 0; ch < 3; ++ch) {
            const float v = out.at(r, c, ch) * (1.0F - alpha) + color[static_cast<std::size_t>(ch)] * alpha;
            out.at(r, c, ch) = static_cast<std::uint8_t>(std::lround(v));
          }
        }
      }
    }
  }
  // labels last so outlines never paint over digits
  for (const auto& region : regions) {
    const auto& m = region.mask;
    double sum_r = 0;
    double sum_c = 0;
    std::size_t n = 0;
    for (int r = 0; r < m.height(); ++r) {
      for (int c = 0; c < m.width(); ++c) {
        if (m.at(r, c)) {
          sum_r += r;
          sum_c += c;
          ++n;
        }
      }
    }
    if (n == 0) continue;
    const int cr = static_cast<int>(std::lround(sum_r / static_cast<double>(n)));
    const int cc = static_cast<int>(std::lround(sum_c / static_cast<double>(n)));
    draw_label(out, std::to_string(std::abs(region.index)), cr, cc, palette_color(region.index));
  }
  return out;
}

}  // namespace groundseg
