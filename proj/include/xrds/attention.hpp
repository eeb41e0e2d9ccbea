#pragma once

// Window attention: partitioning, shifted-window masks, W-MSA, W-MCA and
// the cross-modality module (XM) that fuses low-resolution features with the
// auxiliary guidance.
//
// Maps whose sides are not multiples of the window are reflect-padded to the
// next multiple; a cyclic shift (when non-zero) is applied on the padded grid,
// and outputs are cropped back to the original extent. Token pairs whose
// pre-shift positions are not contiguous (wrap-around) are masked.

#include <vector>

#include "xrds/layers.hpp"

namespace xrds {

inline constexpr double kMaskLogit = -1e9;

struct WindowConfig {
  int window = 8;
  int heads = 4;
  double mlp_ratio = 2.0;
};

class WindowGeometry {
 public:
  WindowGeometry(int height, int width, int window, int shift);

  int height() const { return height_; }
  int width() const { return width_; }
  int window() const { return window_; }
  int shift() const { return shift_; }
  int padded_height() const { return padded_h_; }
  int padded_width() const { return padded_w_; }
  int windows_y() const { return padded_h_ / window_; }
  int windows_x() const { return padded_w_ / window_; }
  int num_windows() const { return windows_y() * windows_x(); }
  int tokens() const { return window_ * window_; }

  /// Pixel index (y * width + x) feeding token t of window w.
  int source(int w, int t) const { return source_[static_cast<std::size_t>(w * tokens() + t)]; }
  /// True when token t of window w maps back to an un-padded output pixel.
  bool writes_output(int w, int t) const { return writes_[static_cast<std::size_t>(w * tokens() + t)] != 0; }
  int region(int w, int t) const { return region_[static_cast<std::size_t>(w * tokens() + t)]; }
  bool masked(int w, int i, int j) const { return shift_ > 0 && region(w, i) != region(w, j); }

 private:
  int height_, width_, window_, shift_, padded_h_, padded_w_;
  std::vector<int> source_;
  std::vector<char> writes_;
  std::vector<int> region_;
};

/// Windows of tokens, shape {num_windows, window*window, C}, plus the geometry to undo it.
template <typename T>
struct TokenWindows {
  Tensor<T> tokens;
  int height = 0;
  int width = 0;
  int window = 0;
  int shift = 0;
  int padded_height = 0;
  int padded_width = 0;
};

template <typename T>
TokenWindows<T> window_partition(const Tensor<T>& x, int window, int shift = 0);

template <typename T>
Tensor<T> window_reverse(const TokenWindows<T>& windows);

/// Multi-head attention inside each window: per head
/// A = softmax(Q K^T / sqrt(d) + mask), out = A V. q and k are C_qk x H x W,
/// v is C_v x H x W on the same grid; the result is C_v x H x W.
/// If `weights` is given it receives A for every (window, head) as
/// consecutive n x n blocks.
template <typename T>
Var<T> window_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const WindowGeometry& geometry, int heads,
                        std::vector<T>* weights = nullptr);

/// W-MSA: Q, K, V are linear maps of x; heads concatenated then projected.
template <typename T>
class WindowSelfAttention {
 public:
  WindowSelfAttention() = default;
  WindowSelfAttention(ParameterSet<T>& params, const std::string& name, int channels, const WindowConfig& config,
                      Rng& rng);

  Var<T> operator()(const Var<T>& x, int shift, std::vector<T>* weights = nullptr) const;

  Conv2d<T>& qkv() { return qkv_; }
  Conv2d<T>& proj() { return proj_; }
  int channels() const { return channels_; }

 private:
  int channels_ = 0;
  WindowConfig config_;
  Conv2d<T> qkv_;
  Conv2d<T> proj_;
};

/// W-MCA: queries from `query_src`, keys and values from `kv_src` on the same grid.
template <typename T>
class WindowCrossAttention {
 public:
  WindowCrossAttention() = default;
  WindowCrossAttention(ParameterSet<T>& params, const std::string& name, int channels, int kv_channels,
                       const WindowConfig& config, Rng& rng);

  Var<T> operator()(const Var<T>& query_src, const Var<T>& kv_src, std::vector<T>* weights = nullptr) const;

  Conv2d<T>& q() { return q_; }
  Conv2d<T>& kv() { return kv_; }
  Conv2d<T>& proj() { return proj_; }

 private:
  int channels_ = 0;
  WindowConfig config_;
  Conv2d<T> q_;
  Conv2d<T> kv_;
  Conv2d<T> proj_;
};

/// XM: F_mid = F + W-MSA(LN(F)); F_cross = F_mid + W-MCA(LN(F_mid), LN(D));
/// X = F_cross + MLP(LN(F_cross)).
template <typename T>
class CrossModalityModule {
 public:
  CrossModalityModule() = default;
  CrossModalityModule(ParameterSet<T>& params, const std::string& name, int channels, int kv_channels,
                      const WindowConfig& config, Rng& rng);

  Var<T> operator()(const Var<T>& features, const Var<T>& guidance) const;

  WindowSelfAttention<T>& self_attention() { return msa_; }
  WindowCrossAttention<T>& cross_attention() { return mca_; }
  Mlp<T>& mlp() { return mlp_; }

 private:
  int channels_ = 0;
  int kv_channels_ = 0;
  LayerNorm<T> norm_self_;
  WindowSelfAttention<T> msa_;
  LayerNorm<T> norm_cross_;
  LayerNorm<T> norm_guidance_;
  WindowCrossAttention<T> mca_;
  LayerNorm<T> norm_mlp_;
  Mlp<T> mlp_;
};

}  // namespace xrds
