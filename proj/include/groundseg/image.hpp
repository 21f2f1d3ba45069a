#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "groundseg/mask.hpp"

namespace groundseg {

/// 8-bit RGB image, row-major, interleaved channels.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0) {}

  [[nodiscard]] std::uint8_t& at(int row, int col, int channel) {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
  }
  [[nodiscard]] std::uint8_t at(int row, int col, int channel) const {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
  }
  void set_pixel(int row, int col, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    at(row, col, 0) = r;
    at(row, col, 1) = g;
    at(row, col, 2) = b;
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Dimensions after scaling so the longer side equals `target`.
/// The shorter side is rounded half up and never drops below 1.
[[nodiscard]] std::pair<int, int> longest_side_dims(int height, int width, int target);

[[nodiscard]] RgbImage resize_bilinear(const RgbImage& image, int height, int width);
[[nodiscard]] BinaryMask resize_nearest(const BinaryMask& mask, int height, int width);

/// Bilinear resize of a single-channel row-major float map.
[[nodiscard]] std::vector<float> resize_bilinear(std::span<const float> values, int height,
                                                 int width, int new_height, int new_width);

/// Images use bilinear interpolation, masks nearest neighbour. Inputs whose
/// longer side already equals `target` are returned unchanged.
[[nodiscard]] RgbImage resize_longest_side(const RgbImage& image, int target);
[[nodiscard]] BinaryMask resize_longest_side(const BinaryMask& mask, int target);

/// Zero-pads on the bottom and right to a `side` x `side` canvas.
[[nodiscard]] RgbImage pad_to_square(const RgbImage& image, int side);
[[nodiscard]] BinaryMask pad_to_square(const BinaryMask& mask, int side);

[[nodiscard]] RgbImage load_image(const std::filesystem::path& path);
void save_png(const RgbImage& image, const std::filesystem::path& path);
[[nodiscard]] std::string encode_png(const RgbImage& image);

/// Stable content digest of the pixels (hex SHA-256 over size + bytes).
[[nodiscard]] std::string image_digest(const RgbImage& image);

}  // namespace groundseg
