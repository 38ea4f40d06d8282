#include "nflow/harness/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <random>

#include "nflow/random.hpp"

namespace nflow::harness {

std::string to_string(Pattern p) { return p == Pattern::blobs ? "blobs" : "rectangles"; }

Pattern pattern_from_string(const std::string& s) {
  if (s == "rectangles") return Pattern::rectangles;
  if (s == "blobs") return Pattern::blobs;
  throw Error("unknown pattern '" + s + "' (expected rectangles or blobs)");
}

namespace {

void draw_rectangle(std::mt19937_64& rng, std::uint8_t* px, std::size_t channels, std::size_t height,
                    std::size_t width) {
  auto uniform = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  const std::size_t h = uniform(2, height - 1);
  const std::size_t w = uniform(2, width - 1);
  const std::size_t y0 = uniform(0, height - h);
  const std::size_t x0 = uniform(0, width - w);
  for (std::size_t c = 0; c < channels; ++c) {
    const auto background = static_cast<std::uint8_t>(uniform(20, 100));
    const auto foreground = static_cast<std::uint8_t>(uniform(150, 235));
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const bool inside = y >= y0 && y < y0 + h && x >= x0 && x < x0 + w;
        px[(c * height + y) * width + x] = inside ? foreground : background;
      }
  }
}

void draw_blob(std::mt19937_64& rng, std::uint8_t* px, std::size_t channels, std::size_t height, std::size_t width) {
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double side = static_cast<double>(std::min(height, width));
  // centers stay a fifth of the image away from the border
  const double cy = uniform(0.2, 0.8) * static_cast<double>(height - 1);
  const double cx = uniform(0.2, 0.8) * static_cast<double>(width - 1);
  const double sigma = uniform(0.125, 0.3125) * side;
  for (std::size_t c = 0; c < channels; ++c) {
    const double background = uniform(20, 100);
    const double peak = uniform(150, 235);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double v = background + (peak - background) * std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
        px[(c * height + y) * width + x] = static_cast<std::uint8_t>(std::lround(v));
      }
  }
}

}  // namespace

ByteImages synthetic_shapes(std::size_t count, std::size_t channels, std::size_t height, std::size_t width,
                            std::uint64_t seed, Pattern pattern) {
  if (height < 2 || width < 2) throw ShapeError("synthetic_shapes: images must be at least 2x2");
  ByteImages out;
  out.shape = {count, channels, height, width};
  out.pixels.resize(count * channels * height * width);
  for (std::size_t n = 0; n < count; ++n) {
    std::mt19937_64 rng(derive_seed(seed, n));
    std::uint8_t* px = out.pixels.data() + n * channels * height * width;
    if (pattern == Pattern::blobs) {
      draw_blob(rng, px, channels, height, width);
    } else {
      draw_rectangle(rng, px, channels, height, width);
    }
    char id[32];
    std::snprintf(id, sizeof id, "shape_%05zu", n);
    out.ids.emplace_back(id);
  }
  return out;
}

}  // namespace nflow::harness
