#include "nflow/harness/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace nflow::harness {

namespace fs = std::filesystem;

Image8 center_crop(const Image8& img) {
  const std::size_t side = std::min(img.height, img.width);
  const std::size_t y0 = (img.height - side) / 2;
  const std::size_t x0 = (img.width - side) / 2;
  Image8 out = make_image(img.channels, side, side);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

Image8 resize_bilinear(const Image8& img, std::size_t height, std::size_t width) {
  if (img.height == height && img.width == width) return img;
  Image8 out = make_image(img.channels, height, width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  auto coord = [](double dst, double scale, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (dst + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, n - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(static_cast<double>(y), sy, img.height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(static_cast<double>(x), sx, img.width, x0, x1, fx);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
        const double bottom = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
        const double v = top * (1 - fy) + bottom * fy;
        out.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

IngestResult ingest(const std::string& dir, std::size_t channels, std::size_t height, std::size_t width,
                    std::size_t limit, std::ostream* log) {
  if (!fs::is_directory(dir)) throw Error("ingest: " + dir + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  IngestResult res;
  res.images.shape = {0, channels, height, width};
  for (const fs::path& file : files) {
    if (limit && res.images.ids.size() >= limit) break;
    Image8 img;
    try {
      img = read_image(file.string());
    } catch (const Error& e) {
      ++res.skipped;
      res.warnings.push_back(e.what());
      if (log) *log << "warning: skipping " << file.filename().string() << ": " << e.what() << "\n";
      continue;
    }
    img = convert_channels(resize_bilinear(center_crop(img), height, width), channels);
    res.images.pixels.insert(res.images.pixels.end(), img.pixels.begin(), img.pixels.end());
    res.images.ids.push_back(file.stem().string());
  }
  res.images.shape[0] = res.images.ids.size();
  return res;
}

}  // namespace nflow::harness
