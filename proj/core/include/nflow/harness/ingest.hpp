#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "nflow/harness/image_io.hpp"
#include "nflow/trainer.hpp"

namespace nflow::harness {

/// Largest centered square.
Image8 center_crop(const Image8& image);
/// Bilinear resampling with pixel centers at half-integer coordinates.
Image8 resize_bilinear(const Image8& image, std::size_t height, std::size_t width);

struct IngestResult {
  ByteImages images;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

/// Every regular file in `dir`, in lexicographic name order, cropped, resized
/// and converted to `channels`. Files that fail to decode are skipped.
IngestResult ingest(const std::string& dir, std::size_t channels, std::size_t height, std::size_t width,
                    std::size_t limit = 0, std::ostream* log = nullptr);

}  // namespace nflow::harness
