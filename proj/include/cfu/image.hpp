#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <png.h>

#include "cfu/error.hpp"

namespace cfu {

/// 8-bit single-channel image stored row-major.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool empty() const { return pixels.empty(); }
  std::size_t size() const { return pixels.size(); }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Circular region in continuous image coordinates. Pixel (x, y) covers
/// [x, x+1) x [y, y+1); its center is (x + 0.5, y + 0.5).
struct Disc {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    return dx * dx + dy * dy <= radius * radius;
  }

  bool contains_pixel(int x, int y) const { return contains(x + 0.5, y + 0.5); }

  /// Centered disc whose radius is `fraction` of the shorter image side.
  static Disc centered(int width, int height, double fraction) {
    return {width / 2.0, height / 2.0, fraction * static_cast<double>(std::min(width, height))};
  }
  static Disc centered(const GrayImage& img, double fraction) {
    return centered(img.width, img.height, fraction);
  }
};

inline std::vector<std::uint8_t> encode_png(const GrayImage& img) {
  require(!img.empty() && img.size() == static_cast<std::size_t>(img.width) * img.height, "image",
          "empty or inconsistent image");
  png_image desc;
  std::memset(&desc, 0, sizeof(desc));
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(img.width);
  desc.height = static_cast<png_uint_32>(img.height);
  desc.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&desc, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::storage, std::string("png encode failed: ") + desc.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&desc, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::storage, std::string("png encode failed: ") + desc.message);
  }
  out.resize(size);
  return out;
}

/// Decodes PNG bytes. Only 8-bit grayscale input is accepted; anything else
/// is a validation error rather than a silent conversion.
inline GrayImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image desc;
  std::memset(&desc, 0, sizeof(desc));
  desc.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&desc, bytes.data(), bytes.size())) {
    fail(ErrorCode::validation, std::string("image: not a readable PNG (") + desc.message + ")");
  }
  const bool gray8 = (desc.format & (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_LINEAR)) == 0;
  if (!gray8) {
    png_image_free(&desc);
    fail(ErrorCode::validation, "image: expected 8-bit grayscale PNG");
  }
  desc.format = PNG_FORMAT_GRAY;
  GrayImage img(static_cast<int>(desc.width), static_cast<int>(desc.height));
  if (!png_image_finish_read(&desc, nullptr, img.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::validation, std::string("image: PNG decode failed (") + desc.message + ")");
  }
  return img;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::not_found, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::storage, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::storage, "short write to " + path.string());
}

inline GrayImage read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  write_file_bytes(path, encode_png(img));
}

}  // namespace cfu
