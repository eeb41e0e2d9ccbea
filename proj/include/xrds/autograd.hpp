#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every op returns a Var whose node remembers its inputs and a closure that
// maps the output gradient to input gradients. backward() walks the graph in
// reverse topological order. Graph recording is skipped when no input needs a
// gradient or when a NoGradGuard is alive, so inference keeps no tape.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "xrds/tensor.hpp"

namespace xrds {

template <typename T>
class Var;

namespace detail {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Tensor<T>&)> backward;

  T* grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad.data();
  }
};

}  // namespace detail

template <typename T>
class Var {
 public:
  Var() = default;

  static Var constant(Tensor<T> value) {
    Var v;
    v.node_ = std::make_shared<detail::Node<T>>();
    v.node_->value = std::move(value);
    return v;
  }

  static Var parameter(Tensor<T> value) {
    Var v = constant(std::move(value));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  /// Accumulated gradient; a zero tensor of the value's shape when none has arrived yet.
  const Tensor<T>& grad() const {
    node_->grad_buffer();
    return node_->grad;
  }
  Tensor<T>& mutable_grad() {
    node_->grad_buffer();
    return node_->grad;
  }
  void zero_grad() {
    if (node_ && !node_->grad.empty()) node_->grad.fill(T(0));
  }

  /// Gradient accumulation target, or nullptr when this Var needs no gradient.
  T* grad_sink() const { return requires_grad() ? node_->grad_buffer() : nullptr; }

  const std::shared_ptr<detail::Node<T>>& handle() const noexcept { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// While alive, ops on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

/// Builds an op result. `backward` receives the output gradient and must add
/// into the grad_sink() of each input that has one.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(const Tensor<T>&)> backward);

/// Seeds d(root)/d(root) = 1 and propagates. root must hold exactly one value.
template <typename T>
void backward(const Var<T>& root);

// ---- Ops. Feature maps are C x H x W. -------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

template <typename T>
Var<T> relu(const Var<T>& x);

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x);

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts);

template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int count);

/// Stride-1 convolution with zero padding k/2. weight is {Cout, Cin, k, k};
/// bias is {Cout} or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// Per-pixel normalisation across channels; gamma and beta are {C}.
template <typename T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// Space-to-depth: out channel c*f*f + dy*f + dx at (y, x) = in channel c at (y*f + dy, x*f + dx).
template <typename T>
Var<T> deshuffle(const Var<T>& x, int factor);

/// Depth-to-space, the exact inverse of deshuffle.
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int factor);

/// mean over entries of |d| / (beta + |d|), d = target - pred. Subgradient 0 at d = 0.
template <typename T>
Var<T> robust_loss(const Var<T>& pred, const Tensor<T>& target, T beta);

template <typename T>
Var<T> sum(const Var<T>& x);

template <typename T>
Var<T> mean(const Var<T>& x);

/// sum(x * weights); used to reduce maps to scalars in gradient checks.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

// Plain (non-recording) tensor helpers shared by the ops and layers.
template <typename T>
Tensor<T> deshuffle_tensor(const Tensor<T>& x, int factor);
template <typename T>
Tensor<T> pixel_shuffle_tensor(const Tensor<T>& x, int factor);

}  // namespace xrds
