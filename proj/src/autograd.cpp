#include "xrds/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

#include "xrds/kernels.hpp"

namespace xrds {
namespace {

thread_local bool g_grad_enabled = true;

void require_rank3(const Shape& s, const char* op) {
  if (s.size() != 3) throw std::invalid_argument(std::string(op) + ": expected C x H x W, got " + shape_string(s));
}

template <typename T>
void im2col(const T* x, int channels, int h, int w, int k, T* col) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    const T* src = x + c * plane;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * plane;
        const int dy = ky - pad;
        const int dx = kx - pad;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          T* row = dst + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          for (int x = 0; x < x0; ++x) row[x] = T(0);
          for (int x = x0; x < x1; ++x) row[x] = srow[x + dx];
          for (int x = std::max(x1, x0); x < w; ++x) row[x] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int channels, int h, int w, int k, T* dx_out) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    T* dst = dx_out + c * plane;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * plane;
        const int dy = ky - pad;
        const int dx = kx - pad;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* row = src + static_cast<std::size_t>(y) * w;
          T* drow = dst + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          for (int x = x0; x < x1; ++x) drow[x + dx] += row[x];
        }
      }
    }
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(const Tensor<T>&)> backward_fn) {
  Var<T> out = Var<T>::constant(std::move(value));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.handle();
  node.requires_grad = true;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node.inputs.push_back(in.handle());
  }
  node.backward = std::move(backward_fn);
  return out;
}

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  using NodePtr = detail::Node<T>*;
  std::vector<NodePtr> order;
  std::unordered_set<NodePtr> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root.handle().get(), 0);
  visited.insert(root.handle().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.handle()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodePtr node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad);
  }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    for (const Var<T>* v : {&a, &b}) {
      if (T* s = v->grad_sink()) {
        for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  return make_op<T>(std::move(out), {x}, [x, factor](const Tensor<T>& g) {
    T* s = x.grad_sink();
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += factor * g[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_op<T>(std::move(out), {x}, [x](const Tensor<T>& g) {
    T* s = x.grad_sink();
    const T* xv = x.value().data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) s[i] += g[i];
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return make_op<T>(std::move(out), {x}, [x](const Tensor<T>& g) {
    constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    T* s = x.grad_sink();
    const T* xv = x.value().data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      s[i] += g[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  require_rank3(parts[0].shape(), "concat_channels");
  const int h = parts[0].value().height();
  const int w = parts[0].value().width();
  int total = 0;
  for (const auto& p : parts) {
    require_rank3(p.shape(), "concat_channels");
    if (p.value().height() != h || p.value().width() != w) {
      throw std::invalid_argument("concat_channels: spatial mismatch " + shape_string(p.shape()) + " vs " +
                                  shape_string(parts[0].shape()));
    }
    total += p.value().channels();
  }
  Tensor<T> out = Tensor<T>::map(total, h, w);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return make_op<T>(std::move(out), inputs, [inputs](const Tensor<T>& g) {
    std::size_t off = 0;
    for (const auto& p : inputs) {
      const std::size_t n = p.value().size();
      if (T* s = p.grad_sink()) {
        for (std::size_t i = 0; i < n; ++i) s[i] += g[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int count) {
  require_rank3(x.shape(), "slice_channels");
  if (begin < 0 || count <= 0 || begin + count > x.value().channels()) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") outside " + shape_string(x.shape()));
  }
  const std::size_t plane = x.value().plane();
  Tensor<T> out = Tensor<T>::map(count, x.value().height(), x.value().width());
  const T* src = x.value().data() + begin * plane;
  std::copy(src, src + count * plane, out.data());
  return make_op<T>(std::move(out), {x}, [x, begin, plane](const Tensor<T>& g) {
    T* s = x.grad_sink() + begin * plane;
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank3(x.shape(), "conv2d");
  const Shape& ws = weight.shape();
  if (ws.size() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0) {
    throw std::invalid_argument("conv2d: weight must be {Cout, Cin, k, k} with odd k, got " + shape_string(ws));
  }
  const int cout = ws[0], cin = ws[1], k = ws[2];
  const int h = x.value().height(), w = x.value().width();
  if (x.value().channels() != cin) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(x.value().channels()) +
                                " channels, weight expects " + std::to_string(cin));
  }
  if (bias.defined() && bias.value().size() != static_cast<std::size_t>(cout)) {
    throw std::invalid_argument("conv2d: bias size mismatch");
  }
  const int plane = h * w;
  const int kdim = cin * k * k;

  std::shared_ptr<Tensor<T>> col;
  const T* colp = x.value().data();
  if (k > 1) {
    col = std::make_shared<Tensor<T>>(Shape{kdim, plane});
    im2col(x.value().data(), cin, h, w, k, col->data());
    colp = col->data();
  }

  Tensor<T> out = Tensor<T>::map(cout, h, w);
  if (bias.defined()) {
    for (int o = 0; o < cout; ++o) std::fill_n(out.data() + static_cast<std::size_t>(o) * plane, plane, bias.value()[o]);
  }
  kernels::gemm<T>(kernels::Trans::no, kernels::Trans::no, cout, plane, kdim, T(1), weight.value().data(), kdim, colp,
                   plane, bias.defined() ? T(1) : T(0), out.data(), plane);

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op<T>(std::move(out), inputs, [x, weight, bias, col, cout, cin, k, h, w](const Tensor<T>& g) {
    const int plane = h * w;
    const int kdim = cin * k * k;
    const T* colp = col ? col->data() : x.value().data();
    if (T* s = weight.grad_sink()) {
      kernels::gemm<T>(kernels::Trans::no, kernels::Trans::yes, cout, kdim, plane, T(1), g.data(), plane, colp, plane,
                       T(1), s, kdim);
    }
    if (bias.defined()) {
      if (T* s = bias.grad_sink()) {
        for (int o = 0; o < cout; ++o) {
          const T* row = g.data() + static_cast<std::size_t>(o) * plane;
          T acc = T(0);
          for (int p = 0; p < plane; ++p) acc += row[p];
          s[o] += acc;
        }
      }
    }
    if (T* s = x.grad_sink()) {
      if (k == 1) {
        kernels::gemm<T>(kernels::Trans::yes, kernels::Trans::no, kdim, plane, cout, T(1), weight.value().data(), kdim,
                         g.data(), plane, T(1), s, plane);
      } else {
        std::vector<T> dcol(static_cast<std::size_t>(kdim) * plane);
        kernels::gemm<T>(kernels::Trans::yes, kernels::Trans::no, kdim, plane, cout, T(1), weight.value().data(), kdim,
                         g.data(), plane, T(0), dcol.data(), plane);
        col2im_add(dcol.data(), cin, h, w, k, s);
      }
    }
  });
}

template <typename T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_rank3(x.shape(), "layer_norm_channels");
  const int c = x.value().channels();
  const std::size_t plane = x.value().plane();
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c)) {
    throw std::invalid_argument("layer_norm_channels: affine parameters do not match " + std::to_string(c) +
                                " channels");
  }
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto rstd = std::make_shared<std::vector<T>>(plane);
  std::vector<T> mu(plane, T(0)), var(plane, T(0));
  const T* xv = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* row = xv + ch * plane;
    for (std::size_t p = 0; p < plane; ++p) mu[p] += row[p];
  }
  for (auto& m : mu) m /= T(c);
  for (int ch = 0; ch < c; ++ch) {
    const T* row = xv + ch * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      const T d = row[p] - mu[p];
      var[p] += d * d;
    }
  }
  for (std::size_t p = 0; p < plane; ++p) (*rstd)[p] = T(1) / std::sqrt(var[p] / T(c) + eps);

  Tensor<T> out(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const T* row = xv + ch * plane;
    T* hrow = xhat->data() + ch * plane;
    T* orow = out.data() + ch * plane;
    const T gm = gamma.value()[ch], bt = beta.value()[ch];
    for (std::size_t p = 0; p < plane; ++p) {
      hrow[p] = (row[p] - mu[p]) * (*rstd)[p];
      orow[p] = gm * hrow[p] + bt;
    }
  }
  return make_op<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, c, plane](const Tensor<T>& g) {
    if (T* s = gamma.grad_sink()) {
      for (int ch = 0; ch < c; ++ch) {
        T acc = T(0);
        for (std::size_t p = 0; p < plane; ++p) acc += g[ch * plane + p] * (*xhat)[ch * plane + p];
        s[ch] += acc;
      }
    }
    if (T* s = beta.grad_sink()) {
      for (int ch = 0; ch < c; ++ch) {
        T acc = T(0);
        for (std::size_t p = 0; p < plane; ++p) acc += g[ch * plane + p];
        s[ch] += acc;
      }
    }
    if (T* s = x.grad_sink()) {
      std::vector<T> mean_dh(plane, T(0)), mean_dhx(plane, T(0));
      for (int ch = 0; ch < c; ++ch) {
        const T gm = gamma.value()[ch];
        for (std::size_t p = 0; p < plane; ++p) {
          const T dh = g[ch * plane + p] * gm;
          mean_dh[p] += dh;
          mean_dhx[p] += dh * (*xhat)[ch * plane + p];
        }
      }
      for (std::size_t p = 0; p < plane; ++p) {
        mean_dh[p] /= T(c);
        mean_dhx[p] /= T(c);
      }
      for (int ch = 0; ch < c; ++ch) {
        const T gm = gamma.value()[ch];
        for (std::size_t p = 0; p < plane; ++p) {
          const T dh = g[ch * plane + p] * gm;
          s[ch * plane + p] += (*rstd)[p] * (dh - mean_dh[p] - (*xhat)[ch * plane + p] * mean_dhx[p]);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> deshuffle_tensor(const Tensor<T>& x, int f) {
  require_rank3(x.shape(), "deshuffle");
  if (f < 1) throw std::invalid_argument("deshuffle: factor must be >= 1");
  const int c = x.channels(), h = x.height(), w = x.width();
  if (h % f != 0 || w % f != 0) {
    throw std::invalid_argument("deshuffle: " + shape_string(x.shape()) + " not divisible by factor " +
                                std::to_string(f));
  }
  const int ho = h / f, wo = w / f;
  Tensor<T> out = Tensor<T>::map(c * f * f, ho, wo);
  for (int ch = 0; ch < c; ++ch)
    for (int dy = 0; dy < f; ++dy)
      for (int dx = 0; dx < f; ++dx) {
        const int oc = ch * f * f + dy * f + dx;
        for (int y = 0; y < ho; ++y)
          for (int xx = 0; xx < wo; ++xx) out.at(oc, y, xx) = x.at(ch, y * f + dy, xx * f + dx);
      }
  return out;
}

template <typename T>
Tensor<T> pixel_shuffle_tensor(const Tensor<T>& x, int f) {
  require_rank3(x.shape(), "pixel_shuffle");
  if (f < 1) throw std::invalid_argument("pixel_shuffle: factor must be >= 1");
  const int c = x.channels(), h = x.height(), w = x.width();
  if (c % (f * f) != 0) {
    throw std::invalid_argument("pixel_shuffle: " + std::to_string(c) + " channels not divisible by " +
                                std::to_string(f * f));
  }
  const int co = c / (f * f);
  Tensor<T> out = Tensor<T>::map(co, h * f, w * f);
  for (int ch = 0; ch < co; ++ch)
    for (int dy = 0; dy < f; ++dy)
      for (int dx = 0; dx < f; ++dx) {
        const int ic = ch * f * f + dy * f + dx;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) out.at(ch, y * f + dy, xx * f + dx) = x.at(ic, y, xx);
      }
  return out;
}

template <typename T>
Var<T> deshuffle(const Var<T>& x, int factor) {
  return make_op<T>(deshuffle_tensor(x.value(), factor), {x}, [x, factor](const Tensor<T>& g) {
    const Tensor<T> back = pixel_shuffle_tensor(g, factor);
    T* s = x.grad_sink();
    for (std::size_t i = 0; i < back.size(); ++i) s[i] += back[i];
  });
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int factor) {
  return make_op<T>(pixel_shuffle_tensor(x.value(), factor), {x}, [x, factor](const Tensor<T>& g) {
    const Tensor<T> back = deshuffle_tensor(g, factor);
    T* s = x.grad_sink();
    for (std::size_t i = 0; i < back.size(); ++i) s[i] += back[i];
  });
}

template <typename T>
Var<T> robust_loss(const Var<T>& pred, const Tensor<T>& target, T beta) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("robust_loss: shape mismatch " + shape_string(pred.shape()) + " vs " +
                                shape_string(target.shape()));
  }
  if (!(beta > T(0))) throw std::invalid_argument("robust_loss: beta must be positive");
  const std::size_t n = target.size();
  if (n == 0) throw std::invalid_argument("robust_loss: empty input");
  T acc = T(0);
  const T* pv = pred.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T a = std::abs(target[i] - pv[i]);
    acc += a / (beta + a);
  }
  Tensor<T> out(Shape{1}, acc / static_cast<T>(n));
  auto tgt = std::make_shared<Tensor<T>>(target);
  return make_op<T>(std::move(out), {pred}, [pred, tgt, beta, n](const Tensor<T>& g) {
    T* s = pred.grad_sink();
    const T* pv = pred.value().data();
    const T scale_factor = g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = pv[i] - (*tgt)[i];
      if (d == T(0)) continue;
      const T a = std::abs(d);
      const T slope = beta / ((beta + a) * (beta + a));
      s[i] += scale_factor * (d > T(0) ? slope : -slope);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = T(0);
  for (T v : x.value().values()) acc += v;
  return make_op<T>(Tensor<T>(Shape{1}, acc), {x}, [x](const Tensor<T>& g) {
    T* s = x.grad_sink();
    for (std::size_t i = 0; i < x.value().size(); ++i) s[i] += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  if (x.shape() != weights.shape()) throw std::invalid_argument("weighted_sum: shape mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
  auto wt = std::make_shared<Tensor<T>>(weights);
  return make_op<T>(Tensor<T>(Shape{1}, acc), {x}, [x, wt](const Tensor<T>& g) {
    T* s = x.grad_sink();
    for (std::size_t i = 0; i < wt->size(); ++i) s[i] += g[0] * (*wt)[i];
  });
}

#define XRDS_INSTANTIATE(T)                                                                                  \
  template Var<T> make_op<T>(Tensor<T>, std::vector<Var<T>>, std::function<void(const Tensor<T>&)>);         \
  template void backward<T>(const Var<T>&);                                                                  \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> scale<T>(const Var<T>&, T);                                                                \
  template Var<T> relu<T>(const Var<T>&);                                                                    \
  template Var<T> gelu<T>(const Var<T>&);                                                                    \
  template Var<T> concat_channels<T>(std::span<const Var<T>>);                                               \
  template Var<T> slice_channels<T>(const Var<T>&, int, int);                                                \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                    \
  template Var<T> layer_norm_channels<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                    \
  template Var<T> deshuffle<T>(const Var<T>&, int);                                                          \
  template Var<T> pixel_shuffle<T>(const Var<T>&, int);                                                      \
  template Var<T> robust_loss<T>(const Var<T>&, const Tensor<T>&, T);                                        \
  template Var<T> sum<T>(const Var<T>&);                                                                     \
  template Var<T> mean<T>(const Var<T>&);                                                                    \
  template Var<T> weighted_sum<T>(const Var<T>&, const Tensor<T>&);                                          \
  template Tensor<T> deshuffle_tensor<T>(const Tensor<T>&, int);                                             \
  template Tensor<T> pixel_shuffle_tensor<T>(const Tensor<T>&, int);

XRDS_INSTANTIATE(float)
XRDS_INSTANTIATE(double)

#undef XRDS_INSTANTIATE

}  // namespace xrds
