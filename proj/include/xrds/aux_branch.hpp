#pragma once

// High-resolution auxiliary-feature branch. A 3x3 conv lifts the 6-channel
// albedo+normal buffer to C_A features (H_0); N-1 residual blocks refine it
// (H_1..H_{N-1}); each H_i is deshuffled by the SR scale onto the
// low-resolution grid and projected to C_kv channels, giving the guidance
// maps D_0..D_{N-1} consumed by the cross-attention of each group.

#include <vector>

#include "xrds/layers.hpp"

namespace xrds {

struct AuxBranchConfig {
  int in_channels = 6;
  int channels = 32;     // C_A
  int stages = 3;        // N
  int scale = 4;         // deshuffle factor s
  int kv_channels = 64;  // C_kv
};

/// y = x + conv2(relu(conv1(x))), 3x3 convs with zero padding, no normalisation.
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(ParameterSet<T>& params, const std::string& name, int channels, Rng& rng);

  Var<T> operator()(const Var<T>& x) const;

  Conv2d<T>& conv1() { return conv1_; }
  Conv2d<T>& conv2() { return conv2_; }

 private:
  Conv2d<T> conv1_;
  Conv2d<T> conv2_;
};

template <typename T>
class AuxBranch {
 public:
  AuxBranch() = default;
  AuxBranch(ParameterSet<T>& params, const std::string& name, const AuxBranchConfig& config, Rng& rng);

  /// Returns `stages` guidance maps, each C_kv x H/s x W/s.
  std::vector<Var<T>> operator()(const Var<T>& aux) const;

  const AuxBranchConfig& config() const { return config_; }
  std::vector<ResidualBlock<T>>& blocks() { return blocks_; }
  std::vector<Conv2d<T>>& projections() { return projections_; }

 private:
  AuxBranchConfig config_;
  Conv2d<T> input_conv_;
  std::vector<ResidualBlock<T>> blocks_;
  std::vector<Conv2d<T>> projections_;
};

}  // namespace xrds
