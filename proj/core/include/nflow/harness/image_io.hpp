#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nflow/tensor.hpp"

namespace nflow::harness {

/// 8-bit planar image, pixels in (C, H, W) order. C is 1 or 3.
struct Image8 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  bool operator==(const Image8&) const = default;
};

Image8 make_image(std::size_t channels, std::size_t height, std::size_t width, std::uint8_t fill = 0);

/// Decodes PNG or JPEG, chosen by the file signature. Alpha is dropped and
/// palettes are expanded; grayscale stays single-channel.
Image8 read_image(const std::string& path);
void write_png(const std::string& path, const Image8& image);

/// Channel conversion: gray replicated to RGB, RGB averaged to gray.
Image8 convert_channels(const Image8& image, std::size_t channels);

/// round(clamp(x, 0, 1) * 255) for a [C, H, W] tensor.
template <typename T>
Image8 to_image8(const Tensor<T>& x);

/// p / 255 as a [C, H, W] tensor.
template <typename T>
Tensor<T> from_image8(const Image8& image);

/// Copies `src` into `dst` with its top-left corner at (y, x).
void paste(Image8& dst, const Image8& src, std::size_t y, std::size_t x);

}  // namespace nflow::harness
