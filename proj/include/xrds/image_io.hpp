#pragma once

// 8-bit PNG previews. Raw float planes remain the canonical image format;
// PNG is only a convenience for looking at results and for LDR inputs.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "xrds/tensor.hpp"

namespace xrds {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 3;                 // 1 (gray) or 3 (RGB), interleaved
  std::vector<std::uint8_t> pixels;  // height * width * channels
};

void write_png(const std::filesystem::path& path, const Image8& image);
/// Decodes any PNG to 8-bit RGB.
Image8 read_png(const std::filesystem::path& path);

/// linear_to_srgb, then round(255 * v) with ties to even.
Image8 srgb_preview(const FeatureMap& linear_rgb);

/// Planar 3 x H x W map with values v / 255.
FeatureMap unit_map_from_png(const Image8& image);

}  // namespace xrds
