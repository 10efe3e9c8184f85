#pragma once

// PNG read/write via libpng's simplified API. Images are (C, H, W) in [0, 1];
// masks are single-channel 8-bit and read back as 0/1 after thresholding at 128.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "tino/core/error.hpp"
#include "tino/core/tensor.hpp"
#include "tino/masking.hpp"

namespace tino {

inline Tensor read_png(const std::filesystem::path& path, std::size_t channels = 3) {
  if (channels != 1 && channels != 3) throw ConfigError("read_png supports 1 or 3 channels");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw ConfigError("cannot read PNG '" + path.string() + "': " + img.message);
  }
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ConfigError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  const std::size_t h = img.height, w = img.width;
  Tensor t(Shape{channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) t.at(c, y, x) = buf[(y * w + x) * channels + c] / 255.0;
  return t;
}

inline void write_png(const std::filesystem::path& path, const Tensor& t) {
  const Shape s = t.shape();
  if (s.c != 1 && s.c != 3) throw ShapeError("write_png needs 1 or 3 channels, got " + s.str());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(s.w);
  img.height = static_cast<png_uint_32>(s.h);
  img.format = s.c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(s.size());
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < s.c; ++c) {
        const double v = std::isfinite(t.at(c, y, x)) ? std::clamp(t.at(c, y, x), 0.0, 1.0) : 0.0;
        buf[(y * s.w + x) * s.c + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw Error("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

inline Mask read_mask_png(const std::filesystem::path& path) {
  Tensor t = read_png(path, 1);
  for (auto& v : t.values()) v = v >= 0.5 ? 1.0 : 0.0;
  return Mask{std::move(t), MaskResolution::pixel};
}

inline void write_mask_png(const std::filesystem::path& path, const Mask& m) {
  Tensor t = m.data;
  for (auto& v : t.values()) v = v > 0.0 ? 1.0 : 0.0;
  write_png(path, t);
}

}  // namespace tino
