#pragma once

// Full network: a 3x3 conv lifts the low-resolution rendering to C features
// (F_0); N groups fuse it with the auxiliary guidance maps; a long skip adds
// F_0 back (F_DF = F_N + F_0); the head upsamples with a 1x1 conv to 3*s^2
// channels, pixel shuffle by s and a final 3x3 conv to RGB.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xrds/aux_branch.hpp"
#include "xrds/rdst.hpp"

namespace xrds {

/// Which auxiliary planes the network sees; masked planes are zeroed on input.
enum class AuxMode { both, albedo, normal, none };

std::string to_string(AuxMode mode);
AuxMode parse_aux_mode(const std::string& text);

struct ModelConfig {
  int scale = 4;            // s
  int xdg_groups = 3;       // N
  int rdst_blocks = 5;      // B
  int dense_layers = 4;     // L
  int channels = 64;        // C
  int aux_channels = 32;    // C_A
  int kv_channels = 64;     // C_kv
  int growth = 40;          // G
  int window = 8;
  int heads = 4;
  double mlp_ratio = 2.0;
  AuxMode aux_mode = AuxMode::both;

  /// Throws ValidationError describing the first violated constraint.
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  /// Paper-scale network.
  static ModelConfig paper() { return ModelConfig{}; }
  /// Small network for CPU-scale experiments.
  static ModelConfig desk();

  bool operator==(const ModelConfig&) const = default;
};

/// Fields that differ between two configurations, e.g. {"scale: 2 vs 4"}.
std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b);

template <typename T>
class XrdsModel {
 public:
  explicit XrdsModel(const ModelConfig& config, std::uint64_t init_seed = 0);

  XrdsModel(const XrdsModel&) = delete;
  XrdsModel& operator=(const XrdsModel&) = delete;
  XrdsModel(XrdsModel&&) noexcept = default;
  XrdsModel& operator=(XrdsModel&&) noexcept = default;

  /// lr is 3 x h x w, aux is 6 x s*h x s*w; returns 3 x s*h x s*w.
  /// Throws ValidationError on shape mismatch, NonFiniteError on NaN/Inf output.
  Var<T> forward(const Var<T>& lr, const Var<T>& aux) const;

  /// Inference without recording a graph.
  Tensor<T> infer(const Tensor<T>& lr, const Tensor<T>& aux) const;

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  std::size_t count_parameters() const { return params_.scalar_count(); }

  AuxBranch<T>& aux_branch() { return aux_; }
  std::vector<XdgGroup<T>>& groups() { return groups_; }

 private:
  ModelConfig config_;
  ParameterSet<T> params_;
  AuxBranch<T> aux_;
  Conv2d<T> lr_conv_;
  std::vector<XdgGroup<T>> groups_;
  Conv2d<T> head_proj_;  // C -> 3 s^2 (s > 1) or 3x3 C -> 3 (s == 1)
  Conv2d<T> head_conv_;  // 3x3, 3 -> 3 after pixel shuffle (s > 1)
};

/// Zeroes the aux channels hidden by `mode` (albedo = 0..2, normal = 3..5).
template <typename T>
Tensor<T> mask_aux(const Tensor<T>& aux, AuxMode mode);

struct CheckpointInfo {
  ModelConfig config;
  std::map<std::string, std::string> metadata;
  std::string id;  // crc32 of the payload, hex
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Versioned container: magic, format version, JSON header (config + metadata),
/// named float32 little-endian parameter blobs, trailing CRC-32.
/// Written to a temporary file and renamed into place.
template <typename T>
void save_checkpoint(const XrdsModel<T>& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& metadata = {});

template <typename T>
XrdsModel<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

/// As load_checkpoint, but throws ConfigMismatchError unless the stored
/// architecture equals `expected` (aux_mode excluded).
template <typename T>
XrdsModel<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected,
                             CheckpointInfo* info = nullptr);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Copies every stored tensor whose name and shape match a model parameter;
/// returns how many were copied. Used to fine-tune across scales.
template <typename T>
std::size_t load_matching_weights(XrdsModel<T>& model, const std::filesystem::path& path);

}  // namespace xrds
