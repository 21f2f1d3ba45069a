#include "groundseg/mask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace groundseg {

BinaryMask::BinaryMask(int height, int width) : height_(height), width_(width) {
  if (height < 0 || width < 0) throw DimensionError("negative mask dimensions");
  bits_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0);
}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> bits)
    : height_(height), width_(width), bits_(std::move(bits)) {
  if (height < 0 || width < 0) throw DimensionError("negative mask dimensions");
  if (bits_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw DimensionError("mask bit count does not match " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  for (auto& b : bits_) b = b != 0 ? 1 : 0;
}

std::size_t BinaryMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

void BinaryMask::fill_rect(int x_min, int y_min, int x_max, int y_max) {
  x_min = std::max(x_min, 0);
  y_min = std::max(y_min, 0);
  x_max = std::min(x_max, width_);
  y_max = std::min(y_max, height_);
  for (int r = y_min; r < y_max; ++r) {
    for (int c = x_min; c < x_max; ++c) set(r, c);
  }
}

MaskRLE rle_encode(const BinaryMask& mask) {
  MaskRLE rle{mask.height(), mask.width(), {}};
  std::uint8_t current = 0;
  std::uint64_t run = 0;
  for (int c = 0; c < mask.width(); ++c) {
    for (int r = 0; r < mask.height(); ++r) {
      const std::uint8_t v = mask.at(r, c) ? 1 : 0;
      if (v != current) {
        rle.counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  }
  rle.counts.push_back(run);
  return rle;
}

BinaryMask rle_decode(const MaskRLE& rle) {
  if (rle.height < 0 || rle.width < 0) throw DimensionError("negative RLE size");
  const std::uint64_t total = static_cast<std::uint64_t>(rle.height) *
                              static_cast<std::uint64_t>(rle.width);
  const std::uint64_t sum = std::accumulate(rle.counts.begin(), rle.counts.end(), std::uint64_t{0});
  if (sum != total) {
    throw DimensionError("RLE counts sum to " + std::to_string(sum) + ", expected " +
                         std::to_string(total));
  }
  BinaryMask mask(rle.height, rle.width);
  std::uint64_t pos = 0;
  bool value = false;
  for (const auto run : rle.counts) {
    if (value) {
      for (std::uint64_t k = pos; k < pos + run; ++k) {
        const auto col = static_cast<int>(k / static_cast<std::uint64_t>(rle.height));
        const auto row = static_cast<int>(k % static_cast<std::uint64_t>(rle.height));
        mask.set(row, col);
      }
    }
    pos += run;
    value = !value;
  }
  return mask;
}

std::uint64_t rle_area(const MaskRLE& rle) noexcept {
  std::uint64_t area = 0;
  for (std::size_t i = 1; i < rle.counts.size(); i += 2) area += rle.counts[i];
  return area;
}

nlohmann::ordered_json rle_to_json(const MaskRLE& rle) {
  nlohmann::ordered_json j;
  j["size"] = {rle.height, rle.width};
  j["counts"] = rle.counts;
  return j;
}

MaskRLE rle_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("size") || !j.contains("counts")) {
    throw Error("mask_rle must be an object with size and counts");
  }
  const auto& size = j.at("size");
  if (!size.is_array() || size.size() != 2) throw Error("mask_rle.size must be [H,W]");
  const auto& counts = j.at("counts");
  if (!counts.is_array()) throw Error("mask_rle.counts must be an integer array");
  MaskRLE rle;
  rle.height = size[0].get<int>();
  rle.width = size[1].get<int>();
  rle.counts.reserve(counts.size());
  for (const auto& c : counts) {
    if (!c.is_number_integer() || c.get<std::int64_t>() < 0) {
      throw Error("mask_rle.counts must hold non-negative integers");
    }
    rle.counts.push_back(c.get<std::uint64_t>());
  }
  const std::uint64_t sum = std::accumulate(rle.counts.begin(), rle.counts.end(), std::uint64_t{0});
  if (rle.height < 0 || rle.width < 0 ||
      sum != static_cast<std::uint64_t>(rle.height) * static_cast<std::uint64_t>(rle.width)) {
    throw DimensionError("mask_rle counts do not cover the declared size");
  }
  return rle;
}

OverlapCounts overlap_counts(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw DimensionError("mask dimensions differ");
  OverlapCounts oc;
  const auto& x = a.bits();
  const auto& y = b.bits();
  for (std::size_t i = 0; i < x.size(); ++i) {
    oc.intersection += static_cast<std::uint64_t>(x[i] & y[i]);
    oc.union_ += static_cast<std::uint64_t>(x[i] | y[i]);
  }
  return oc;
}

double binary_iou(const BinaryMask& a, const BinaryMask& b) {
  const auto oc = overlap_counts(a, b);
  if (oc.union_ == 0) return 1.0;
  return static_cast<double>(oc.intersection) / static_cast<double>(oc.union_);
}

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw DimensionError("mask dimensions differ");
  std::vector<std::uint8_t> bits(a.bits());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] |= b.bits()[i];
  return BinaryMask(a.height(), a.width(), std::move(bits));
}

namespace {

// One pass of a 1-D minimum filter along rows (horizontal) or columns.
BinaryMask erode_1d(const BinaryMask& in, int radius, bool horizontal) {
  const int h = in.height();
  const int w = in.width();
  BinaryMask out(h, w);
  const int outer = horizontal ? h : w;
  const int inner = horizontal ? w : h;
  std::vector<int> prefix(static_cast<std::size_t>(inner) + 1);
  for (int o = 0; o < outer; ++o) {
    prefix[0] = 0;
    for (int i = 0; i < inner; ++i) {
      const bool v = horizontal ? in.at(o, i) : in.at(i, o);
      prefix[static_cast<std::size_t>(i) + 1] = prefix[static_cast<std::size_t>(i)] + (v ? 1 : 0);
    }
    for (int i = 0; i < inner; ++i) {
      const int lo = i - radius;
      const int hi = i + radius;
      if (lo < 0 || hi >= inner) continue;
      const int ones = prefix[static_cast<std::size_t>(hi) + 1] - prefix[static_cast<std::size_t>(lo)];
      if (ones == 2 * radius + 1) {
        if (horizontal) {
          out.set(o, i);
        } else {
          out.set(i, o);
        }
      }
    }
  }
  return out;
}

}  // namespace

BinaryMask erode(const BinaryMask& mask, int kernel_side, int iterations) {
  if (kernel_side < 1 || kernel_side % 2 == 0) {
    throw Error("erosion kernel side must be odd and positive, got " + std::to_string(kernel_side));
  }
  if (iterations < 0) throw Error("erosion iterations must be non-negative");
  const int radius = kernel_side / 2;
  BinaryMask out = mask;
  if (radius == 0) return out;
  for (int it = 0; it < iterations; ++it) {
    out = erode_1d(erode_1d(out, radius, true), radius, false);
  }
  return out;
}

std::optional<BoundingBox> mask_bbox(const BinaryMask& mask) {
  BoundingBox box{mask.width(), mask.height(), 0, 0};
  bool any = false;
  for (int r = 0; r < mask.height(); ++r) {
    for (int c = 0; c < mask.width(); ++c) {
      if (!mask.at(r, c)) continue;
      any = true;
      box.x_min = std::min(box.x_min, c);
      box.y_min = std::min(box.y_min, r);
      box.x_max = std::max(box.x_max, c + 1);
      box.y_max = std::max(box.y_max, r + 1);
    }
  }
  if (!any) return std::nullopt;
  return box;
}

BoundingBox dilate_box(const BoundingBox& box, double fraction, int image_width, int image_height) {
  const int dx = static_cast<int>(std::lround(box.width() * fraction));
  const int dy = static_cast<int>(std::lround(box.height() * fraction));
  return BoundingBox{std::max(0, box.x_min - dx), std::max(0, box.y_min - dy),
                     std::min(image_width, box.x_max + dx), std::min(image_height, box.y_max + dy)};
}

}  // namespace groundseg
