#ifndef ICE_IMAGE_HPP
#define ICE_IMAGE_HPP

#include "ice/npy.hpp"

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ice {

/// 8-bit RGB bitmap, row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill) {
    detail::require(w >= 1 && h >= 1, "image dimensions must be positive");
  }

  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

inline std::vector<unsigned char> encode_png(const RgbImage& img) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  info.width = static_cast<png_uint_32>(img.width);
  info.height = static_cast<png_uint_32>(img.height);
  info.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&info, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + info.message);
  }
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&info, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + info.message);
  }
  out.resize(size);
  return out;
}

/// Any PNG flavour, converted to 8-bit RGB (alpha composited on black).
inline RgbImage decode_png(std::span<const unsigned char> bytes) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&info, bytes.data(), bytes.size())) {
    throw IoError(std::string("PNG decode failed: ") + info.message);
  }
  info.format = PNG_FORMAT_RGB;
  RgbImage img(static_cast<int>(info.width), static_cast<int>(info.height));
  if (!png_image_finish_read(&info, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&info);
    throw IoError(std::string("PNG decode failed: ") + info.message);
  }
  return img;
}

inline RgbImage read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

inline void write_png(const RgbImage& img, const std::filesystem::path& path) { write_file_bytes(path, encode_png(img)); }

}  // namespace ice

#endif  // ICE_IMAGE_HPP
