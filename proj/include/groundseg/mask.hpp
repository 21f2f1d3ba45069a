#pragma once

// Binary masks, COCO-style uncompressed RLE, boxes and basic mask geometry.

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "groundseg/error.hpp"

namespace groundseg {

/// Row-major binary mask. One byte per pixel, values 0 or 1.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width);
  BinaryMask(int height, int width, std::vector<std::uint8_t> bits);

  [[nodiscard]] int height() const noexcept { return height_; }
  [[nodiscard]] int width() const noexcept { return width_; }
  [[nodiscard]] std::size_t size() const noexcept { return bits_.size(); }

  [[nodiscard]] bool at(int row, int col) const { return bits_[index(row, col)] != 0; }
  void set(int row, int col, bool value = true) { bits_[index(row, col)] = value ? 1 : 0; }

  [[nodiscard]] const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  [[nodiscard]] std::size_t count() const noexcept;
  [[nodiscard]] bool empty_foreground() const noexcept { return count() == 0; }
  [[nodiscard]] bool same_shape(const BinaryMask& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }

  /// Sets every pixel inside the half-open rectangle.
  void fill_rect(int x_min, int y_min, int x_max, int y_max);

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  [[nodiscard]] std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Uncompressed RLE over the column-major flattening, zero-run first.
struct MaskRLE {
  int height = 0;
  int width = 0;
  std::vector<std::uint64_t> counts;

  friend bool operator==(const MaskRLE&, const MaskRLE&) = default;
};

/// Half-open pixel box: [x_min, x_max) x [y_min, y_max).
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  [[nodiscard]] int width() const noexcept { return x_max - x_min; }
  [[nodiscard]] int height() const noexcept { return y_max - y_min; }
  [[nodiscard]] bool valid_within(int image_width, int image_height) const noexcept {
    return 0 <= x_min && x_min < x_max && x_max <= image_width && 0 <= y_min &&
           y_min < y_max && y_max <= image_height;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

[[nodiscard]] MaskRLE rle_encode(const BinaryMask& mask);

/// Throws DimensionError when the counts do not cover the mask exactly.
[[nodiscard]] BinaryMask rle_decode(const MaskRLE& rle);

/// Foreground pixel count computed from the runs alone.
[[nodiscard]] std::uint64_t rle_area(const MaskRLE& rle) noexcept;

[[nodiscard]] nlohmann::ordered_json rle_to_json(const MaskRLE& rle);
[[nodiscard]] MaskRLE rle_from_json(const nlohmann::json& j);

struct OverlapCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
};

[[nodiscard]] OverlapCounts overlap_counts(const BinaryMask& a, const BinaryMask& b);

/// |a & b| / |a | b|; 1.0 when both masks are empty.
[[nodiscard]] double binary_iou(const BinaryMask& a, const BinaryMask& b);

[[nodiscard]] BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b);

/// Square-kernel erosion; out-of-bounds neighbours count as background.
[[nodiscard]] BinaryMask erode(const BinaryMask& mask, int kernel_side, int iterations = 1);

/// Tight box around the foreground, or nothing for an empty mask.
[[nodiscard]] std::optional<BoundingBox> mask_bbox(const BinaryMask& mask);

/// Grows a box by `fraction` of its size on every side, clamped to the image.
[[nodiscard]] BoundingBox dilate_box(const BoundingBox& box, double fraction, int image_width,
                                     int image_height);

}  // namespace groundseg
