#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ctrlloop {

/// Interleaved HWC image with float samples in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  bool operator==(const Image&) const = default;
};

/// Binary H x W mask, one byte per cell holding 0 or 1.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

/// 8-bit RGBA PNG: RGB from `rgb`, A = 255 * alpha.
void write_png_rgba(const std::filesystem::path& path, const Image& rgb, const Mask& alpha);

struct RgbaImage {
  Image rgb;
  Mask alpha;
};
RgbaImage read_png_rgba(const std::filesystem::path& path);

/// Quantizes every sample to the nearest multiple of 1/255, as a PNG round trip would.
Image quantize_8bit(const Image& img);

}  // namespace ctrlloop
