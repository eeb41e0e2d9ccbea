#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xrds/autograd.hpp"

namespace xrds {

using Rng = std::mt19937_64;

/// Ordered registry of learnable tensors, named by module path
/// (e.g. "xdg.0.rdst.1.layer.0.attn.qkv.weight").
template <typename T>
class ParameterSet {
 public:
  Var<T> create(const std::string& name, Tensor<T> init);

  const std::vector<std::pair<std::string, Var<T>>>& entries() const noexcept { return entries_; }
  std::vector<std::pair<std::string, Var<T>>>& entries() noexcept { return entries_; }

  /// Number of learnable scalars.
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
};

enum class Init {
  kaiming_uniform,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias
  trunc_normal,     // N(0, 0.02) truncated at 2 std; zero bias
  zeros,
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet<T>& params, const std::string& name, int in_channels, int out_channels, int kernel, Init init,
         Rng& rng);

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight_, bias_); }

  Var<T>& weight() { return weight_; }
  Var<T>& bias() { return bias_; }
  int in_channels() const { return weight_.value().dim(1); }
  int out_channels() const { return weight_.value().dim(0); }

 private:
  Var<T> weight_;
  Var<T> bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& params, const std::string& name, int channels);
  Var<T> operator()(const Var<T>& x) const { return layer_norm_channels(x, gamma_, beta_); }

 private:
  Var<T> gamma_;
  Var<T> beta_;
};

/// Per-token two-layer perceptron: linear(C -> hidden), GELU, linear(hidden -> C).
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterSet<T>& params, const std::string& name, int channels, int hidden, Rng& rng, Init tail_init);
  Var<T> operator()(const Var<T>& x) const { return fc2_(gelu(fc1_(x))); }
  Conv2d<T>& fc2() { return fc2_; }

 private:
  Conv2d<T> fc1_;
  Conv2d<T> fc2_;
};

int mlp_hidden(int channels, double ratio);

}  // namespace xrds
