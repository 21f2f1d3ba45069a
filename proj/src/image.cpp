#include "groundseg/image.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "groundseg/hashing.hpp"

namespace groundseg {

std::pair<int, int> longest_side_dims(int height, int width, int target) {
  if (target < 1) throw Error("resize target must be >= 1");
  if (height < 1 || width < 1) throw DimensionError("cannot resize an empty grid");
  const auto scale_short = [target](long long short_side, long long long_side) {
    // round(short * target / long) with halves rounded up, in exact integer arithmetic
    const long long v = (2 * short_side * target + long_side) / (2 * long_side);
    return static_cast<int>(std::max(1LL, v));
  };
  if (height >= width) return {target, scale_short(width, height)};
  return {scale_short(height, width), target};
}

namespace {

struct Tap {
  int lo;
  int hi;
  float frac;
};

// Half-pixel-centre sampling positions for bilinear interpolation.
std::vector<Tap> bilinear_taps(int src, int dst) {
  std::vector<Tap> taps(static_cast<std::size_t>(dst));
  const double scale = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    double pos = (i + 0.5) * scale - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, src - 1);
    taps[static_cast<std::size_t>(i)] = Tap{lo, hi, static_cast<float>(pos - lo)};
  }
  return taps;
}

int nearest_source(int dst_index, int src, int dst) {
  const long long v = ((2LL * dst_index + 1) * src) / (2LL * dst);
  return static_cast<int>(std::min<long long>(v, src - 1));
}

}  // namespace

RgbImage resize_bilinear(const RgbImage& image, int height, int width) {
  if (height == image.height && width == image.width) return image;
  RgbImage out(height, width);
  const auto ty = bilinear_taps(image.height, height);
  const auto tx = bilinear_taps(image.width, width);
  for (int r = 0; r < height; ++r) {
    const auto& y = ty[static_cast<std::size_t>(r)];
    for (int c = 0; c < width; ++c) {
      const auto& x = tx[static_cast<std::size_t>(c)];
      for (int ch = 0; ch < 3; ++ch) {
        const float top = image.at(y.lo, x.lo, ch) * (1 - x.frac) + image.at(y.lo, x.hi, ch) * x.frac;
        const float bot = image.at(y.hi, x.lo, ch) * (1 - x.frac) + image.at(y.hi, x.hi, ch) * x.frac;
        const float v = top * (1 - y.frac) + bot * y.frac;
        out.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

BinaryMask resize_nearest(const BinaryMask& mask, int height, int width) {
  if (height == mask.height() && width == mask.width()) return mask;
  BinaryMask out(height, width);
  std::vector<int> cols(static_cast<std::size_t>(width));
  for (int c = 0; c < width; ++c) cols[static_cast<std::size_t>(c)] = nearest_source(c, mask.width(), width);
  for (int r = 0; r < height; ++r) {
    const int sr = nearest_source(r, mask.height(), height);
    for (int c = 0; c < width; ++c) {
      if (mask.at(sr, cols[static_cast<std::size_t>(c)])) out.set(r, c);
    }
  }
  return out;
}

std::vector<float> resize_bilinear(std::span<const float> values, int height, int width,
                                   int new_height, int new_width) {
  if (values.size() != static_cast<std::size_t>(height) * width) {
    throw DimensionError("value map size does not match its dimensions");
  }
  if (height == new_height && width == new_width) return {values.begin(), values.end()};
  std::vector<float> out(static_cast<std::size_t>(new_height) * new_width);
  const auto ty = bilinear_taps(height, new_height);
  const auto tx = bilinear_taps(width, new_width);
  const auto v = [&](int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; };
  for (int r = 0; r < new_height; ++r) {
    const auto& y = ty[static_cast<std::size_t>(r)];
    for (int c = 0; c < new_width; ++c) {
      const auto& x = tx[static_cast<std::size_t>(c)];
      const float top = v(y.lo, x.lo) * (1 - x.frac) + v(y.lo, x.hi) * x.frac;
      const float bot = v(y.hi, x.lo) * (1 - x.frac) + v(y.hi, x.hi) * x.frac;
      out[static_cast<std::size_t>(r) * new_width + c] = top * (1 - y.frac) + bot * y.frac;
    }
  }
  return out;
}

RgbImage resize_longest_side(const RgbImage& image, int target) {
  const auto [h, w] = longest_side_dims(image.height, image.width, target);
  return resize_bilinear(image, h, w);
}

BinaryMask resize_longest_side(const BinaryMask& mask, int target) {
  const auto [h, w] = longest_side_dims(mask.height(), mask.width(), target);
  return resize_nearest(mask, h, w);
}

RgbImage pad_to_square(const RgbImage& image, int side) {
  if (image.height > side || image.width > side) throw DimensionError("image larger than pad target");
  RgbImage out(side, side);
  for (int r = 0; r < image.height; ++r) {
    std::copy_n(image.data.begin() + static_cast<std::ptrdiff_t>(r) * image.width * 3, image.width * 3,
                out.data.begin() + static_cast<std::ptrdiff_t>(r) * side * 3);
  }
  return out;
}

BinaryMask pad_to_square(const BinaryMask& mask, int side) {
  if (mask.height() > side || mask.width() > side) throw DimensionError("mask larger than pad target");
  BinaryMask out(side, side);
  for (int r = 0; r < mask.height(); ++r) {
    for (int c = 0; c < mask.width(); ++c) {
      if (mask.at(r, c)) out.set(r, c);
    }
  }
  return out;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RgbImage decode_png(const std::string& bytes, const std::string& name) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()) == 0) {
    throw IoError("cannot decode PNG " + name + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out(static_cast<int>(img.height), static_cast<int>(img.width));
  if (png_image_finish_read(&img, nullptr, out.data.data(), 0, nullptr) == 0) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + name + ": " + img.message);
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

RgbImage decode_jpeg(const std::string& bytes, const std::string& name) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = [](j_common_ptr c) {
    std::longjmp(reinterpret_cast<JpegErrorManager*>(c->err)->jump, 1);
  };
  RgbImage out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("cannot decode JPEG " + name);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()),
               static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out = RgbImage(static_cast<int>(cinfo.output_height), static_cast<int>(cinfo.output_width));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.data.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace

RgbImage load_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0) {
    return decode_png(bytes, path.string());
  }
  if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
      static_cast<unsigned char>(bytes[1]) == 0xD8) {
    return decode_jpeg(bytes, path.string());
  }
  throw IoError("unsupported image format: " + path.string());
}

std::string encode_png(const RgbImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (png_image_write_to_memory(&img, nullptr, &size, 0, image.data.data(), 0, nullptr) == 0) {
    throw IoError(std::string("PNG encode failed: ") + img.message);
  }
  std::string out(size, '\0');
  if (png_image_write_to_memory(&img, out.data(), &size, 0, image.data.data(), 0, nullptr) == 0) {
    throw IoError(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

void save_png(const RgbImage& image, const std::filesystem::path& path) {
  const std::string bytes = encode_png(image);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string image_digest(const RgbImage& image) {
  std::string buf = std::to_string(image.height) + "x" + std::to_string(image.width) + ":";
  buf.append(reinterpret_cast<const char*>(image.data.data()), image.data.size());
  return sha256_hex(buf);
}

}  // namespace groundseg
