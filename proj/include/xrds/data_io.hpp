#pragma once

// On-disk rendering samples. A sample is a directory:
//
//   meta.json    schema_version, height, width (high-res), scale, spp_lr,
//                spp_aux, channels: {plane -> channel names}
//   lr_rgb.f32   3 x H/s x W/s
//   aux.f32      6 x H x W   (albedo R,G,B then normal X,Y,Z, camera space)
//   hr_rgb.f32   3 x H x W   (optional)
//
// Planes are raw little-endian float32 in C x H x W order.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xrds/tensor.hpp"

namespace xrds {

inline constexpr int kSampleSchemaVersion = 1;

struct RenderingSample {
  FeatureMap lr_rgb;                // 3 x H/s x W/s, scene-linear radiance
  FeatureMap aux;                   // 6 x H x W
  std::optional<FeatureMap> hr_rgb;  // 3 x H x W
  int spp_lr = 1;
  int spp_aux = 1;
  int scale = 1;

  int height() const { return aux.height(); }
  int width() const { return aux.width(); }
};

/// Checks dims, scale, spp, finiteness and aux value ranges. Throws ValidationError.
void validate_sample(const RenderingSample& sample);

void save_sample(const RenderingSample& sample, const std::filesystem::path& dir);
RenderingSample load_sample(const std::filesystem::path& dir);

struct PatchBatch {
  int patch = 0;  // p, high-resolution side
  int scale = 1;
  std::vector<FeatureMap> lr;   // 3 x p/s x p/s
  std::vector<FeatureMap> aux;  // 6 x p x p
  std::vector<FeatureMap> hr;   // 3 x p x p
  std::vector<std::pair<int, int>> lr_origins;  // (y, x) in low-res pixels
};

/// `count` aligned random crops; the high-res origin is scale * the low-res origin.
PatchBatch extract_patches(const RenderingSample& sample, int patch, int count, std::uint64_t seed);

/// Copies the window [y0, y0+h) x [x0, x0+w) of every channel.
FeatureMap crop(const FeatureMap& map, int y0, int x0, int h, int w);

// ---- file helpers --------------------------------------------------------

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string encode_plane(const FeatureMap& map);
/// Decodes `bytes` into a map of `shape`; throws IoError on size mismatch and
/// NonFiniteError (naming `name`) on NaN/Inf.
FeatureMap decode_plane(std::string_view bytes, const Shape& shape, const std::string& name);

void check_finite(const FeatureMap& map, const std::string& name);

}  // namespace xrds
