#pragma once

// Residual densely-connected Swin Transformer block (RDST) and the group
// (XDG) that chains one cross-modality module with B of them.

#include <vector>

#include "xrds/attention.hpp"

namespace xrds {

/// LN -> W-MSA(shift) -> residual -> LN -> MLP -> residual -> 1x1 conv to `growth` channels.
template <typename T>
class DenseSwinLayer {
 public:
  DenseSwinLayer() = default;
  DenseSwinLayer(ParameterSet<T>& params, const std::string& name, int in_channels, int growth, int shift,
                 const WindowConfig& config, Rng& rng);

  Var<T> operator()(const Var<T>& x) const;

  int in_channels() const { return in_channels_; }
  int shift() const { return shift_; }

 private:
  int in_channels_ = 0;
  int shift_ = 0;
  LayerNorm<T> norm_attn_;
  WindowSelfAttention<T> attn_;
  LayerNorm<T> norm_mlp_;
  Mlp<T> mlp_;
  Conv2d<T> to_growth_;
};

struct RdstConfig {
  int channels = 64;  // C
  int layers = 4;     // L
  int growth = 40;    // G
  WindowConfig window;
};

/// Intermediate outputs of one RDST evaluation: features[0] = x, features[l] = g_l.
template <typename T>
struct RdstTrace {
  std::vector<Var<T>> features;
};

template <typename T>
class RdstBlock {
 public:
  RdstBlock() = default;
  RdstBlock(ParameterSet<T>& params, const std::string& name, const RdstConfig& config, Rng& rng);

  Var<T> operator()(const Var<T>& x) const { return forward(x); }

  /// `ablate` >= 0 replaces t_ablate with zeros in every concatenation that
  /// reads it (used to probe dense connectivity).
  Var<T> forward(const Var<T>& x, RdstTrace<T>* trace = nullptr, int ablate = -1) const;

  const std::vector<DenseSwinLayer<T>>& layers() const { return layers_; }
  Conv2d<T>& fusion() { return fusion_; }

 private:
  RdstConfig config_;
  std::vector<DenseSwinLayer<T>> layers_;
  Conv2d<T> fusion_;
};

struct XdgConfig {
  int channels = 64;
  int kv_channels = 64;
  int blocks = 5;  // B
  int layers = 4;
  int growth = 40;
  WindowConfig window;
};

/// F_i = RDST_B(...RDST_1(X)...) + X with X = XM(F_{i-1}, D_{i-1}).
template <typename T>
class XdgGroup {
 public:
  XdgGroup() = default;
  XdgGroup(ParameterSet<T>& params, const std::string& name, const XdgConfig& config, Rng& rng);

  Var<T> operator()(const Var<T>& features, const Var<T>& guidance) const;

  CrossModalityModule<T>& xm() { return xm_; }
  std::vector<RdstBlock<T>>& blocks() { return blocks_; }

 private:
  CrossModalityModule<T> xm_;
  std::vector<RdstBlock<T>> blocks_;
};

}  // namespace xrds
