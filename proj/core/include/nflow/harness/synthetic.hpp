#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "nflow/trainer.hpp"

namespace nflow::harness {

enum class Pattern { rectangles, blobs };

std::string to_string(Pattern p);
Pattern pattern_from_string(const std::string& s);

/// Toy images on a flat background of random intensity. rectangles: one
/// axis-aligned rectangle of random size, position and intensity. blobs: one
/// isotropic Gaussian bump of random center, width and peak intensity; the
/// smooth variant suits flows, whose densities favor smooth images.
ByteImages synthetic_shapes(std::size_t count, std::size_t channels, std::size_t height, std::size_t width,
                            std::uint64_t seed, Pattern pattern = Pattern::rectangles);

}  // namespace nflow::harness
