#pragma once

// Procedural toy scenes: textured albedo, bump-mapped normals, diffuse plus a
// specular lobe driven by a hidden glossiness map, and luminance-dependent
// Gaussian noise standing in for Monte Carlo variance.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xrds/data_io.hpp"
#include "xrds/tensor.hpp"

namespace xrds {

inline constexpr double kNoiseK = 0.25;
inline constexpr double kNoiseFloor = 1e-4;
inline constexpr double kAuxNoiseScale = 0.1;
/// spp_aux at or above this value means noise-free auxiliary buffers.
inline constexpr int kGroundTruthAuxSpp = 4000;

struct SceneSpec {
  std::uint64_t seed = 0;
  int height = 64;
  int width = 64;
  int texture_octaves = 4;
  int geometry_bumps = 24;
  std::array<double, 3> light_dir{0.4, 0.3, 0.8660254037844386};
  std::string noise_model = "gaussian-shot";

  /// H, W positive multiples of 8; octaves in [0, 8]; bumps >= 0; light of non-zero length.
  void validate() const;
};

struct CleanRender {
  FeatureMap hr_rgb;  // 3 x H x W
  FeatureMap aux;     // 6 x H x W, albedo then camera-space normal
};

CleanRender render_clean(const SceneSpec& spec);

/// Rec. 709 luminance of an RGB map, 1 x H x W.
FeatureMap luminance(const FeatureMap& rgb);

/// Adds zero-mean noise with std k * sqrt(max(L, eps)) / sqrt(spp) to every
/// channel, then clamps at zero. With `fireflies`, about 0.01% of pixels are
/// replaced by 10x their value.
FeatureMap add_shot_noise(const FeatureMap& clean_rgb, int spp, std::uint64_t sample_seed, double k = kNoiseK,
                          bool fireflies = false);

/// Box-downsamples the clean render by `divisor` and applies add_shot_noise.
FeatureMap render_noisy(const SceneSpec& spec, int spp, int divisor, std::uint64_t sample_seed,
                        bool fireflies = false);

/// Aux noise with 0.1 k; albedo uses its own luminance, normals use L = 1.
/// Albedo is clamped to [0, 1], normals to [-1, 1]. No-op at spp >= 4000.
FeatureMap add_aux_noise(const FeatureMap& clean_aux, int spp_aux, std::uint64_t sample_seed);

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::string split;  // "train", "val" or "test"
  int scale = 1;
  int spp_lr = 1;
  int spp_aux = 1;

  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(const std::string& name) const;
  std::filesystem::path resolve(const ManifestEntry& entry) const { return root / entry.path; }
};

inline constexpr const char* kManifestName = "manifest.json";

/// 80/10/10 split by scene index.
std::string split_for_index(int index, int n_scenes);

struct DatasetOptions {
  int n_scenes = 10;
  int scale = 4;
  int spp_lr = 32;
  int spp_aux = 2;
  std::uint64_t seed = 0;
  bool fireflies = false;
};

/// Renders scenes with seeds `seed ^ index`, writes samples scene_0000... and
/// `manifest.json` under `out_dir`.
Manifest make_dataset(const SceneSpec& scene_template, const std::filesystem::path& out_dir,
                      const DatasetOptions& options);

/// Accepts the manifest file or the directory holding it.
Manifest read_manifest(const std::filesystem::path& path);

}  // namespace xrds
