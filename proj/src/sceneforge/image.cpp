#include "ctrlloop/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

#include "ctrlloop/error.hpp"

namespace ctrlloop {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

void write_png_rgba(const std::filesystem::path& path, const Image& rgb, const Mask& alpha) {
  if (rgb.channels != 3 || alpha.width != rgb.width || alpha.height != rgb.height)
    throw ValidationError("write_png_rgba: expected 3-channel image and same-size alpha");

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(rgb.width) * rgb.height * 4);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x) {
      auto* px = &rows[(static_cast<std::size_t>(y) * rgb.width + x) * 4];
      for (int c = 0; c < 3; ++c) px[c] = to_byte(rgb.at(y, x, c));
      px[3] = alpha.at(y, x) ? 255 : 0;
    }
  std::vector<png_bytep> row_ptrs(rgb.height);
  for (int y = 0; y < rgb.height; ++y) row_ptrs[y] = &rows[static_cast<std::size_t>(y) * rgb.width * 4];

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, rgb.width, rgb.height, 8, PNG_COLOR_TYPE_RGBA, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

RgbaImage read_png_rgba(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open for reading: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  RgbaImage out;
  std::vector<std::uint8_t> rows;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt png: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_gray_to_rgb(png);
  png_set_add_alpha(png, 0xff, PNG_FILLER_AFTER);
  png_read_update_info(png, info);
  rows.resize(static_cast<std::size_t>(w) * h * 4);
  row_ptrs.resize(h);
  for (int y = 0; y < h; ++y) row_ptrs[y] = &rows[static_cast<std::size_t>(y) * w * 4];
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out.rgb = Image(w, h, 3);
  out.alpha = Mask(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto* px = &rows[(static_cast<std::size_t>(y) * w + x) * 4];
      for (int c = 0; c < 3; ++c) out.rgb.at(y, x, c) = static_cast<float>(px[c]) / 255.0f;
      out.alpha.at(y, x) = px[3] >= 128 ? 1 : 0;
    }
  return out;
}

Image quantize_8bit(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

}  // namespace ctrlloop
