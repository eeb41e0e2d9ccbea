#include "xrds/attention.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "xrds/kernels.hpp"

namespace xrds {
namespace {

using kernels::Trans;

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

int region_id(int v, int padded, int window, int shift) {
  if (v < padded - window) return 0;
  if (v < padded - shift) return 1;
  return 2;
}

}  // namespace

WindowGeometry::WindowGeometry(int height, int width, int window, int shift)
    : height_(height), width_(width), window_(window), shift_(shift) {
  if (height < 1 || width < 1) throw std::invalid_argument("window geometry: empty map");
  if (window < 1) throw std::invalid_argument("window geometry: window must be positive");
  if (shift < 0 || shift >= window) {
    throw std::invalid_argument("window geometry: shift " + std::to_string(shift) + " outside [0, " +
                                std::to_string(window) + ")");
  }
  padded_h_ = round_up(height, window);
  padded_w_ = round_up(width, window);
  const std::size_t total = static_cast<std::size_t>(padded_h_) * padded_w_;
  source_.resize(total);
  writes_.resize(total);
  region_.resize(total);
  for (int w = 0; w < num_windows(); ++w) {
    const int wy = w / windows_x(), wx = w % windows_x();
    for (int t = 0; t < tokens(); ++t) {
      const int py = wy * window + t / window;
      const int px = wx * window + t % window;
      const int oy = (py + shift) % padded_h_;
      const int ox = (px + shift) % padded_w_;
      const std::size_t idx = static_cast<std::size_t>(w * tokens() + t);
      source_[idx] = reflect_index(oy, height) * width + reflect_index(ox, width);
      writes_[idx] = (oy < height && ox < width) ? 1 : 0;
      region_[idx] = region_id(py, padded_h_, window, shift) * 3 + region_id(px, padded_w_, window, shift);
    }
  }
}

template <typename T>
TokenWindows<T> window_partition(const Tensor<T>& x, int window, int shift) {
  if (x.rank() != 3) throw std::invalid_argument("window_partition: expected C x H x W");
  const WindowGeometry g(x.height(), x.width(), window, shift);
  const int c = x.channels();
  const std::size_t plane = x.plane();
  TokenWindows<T> out;
  out.tokens = Tensor<T>(Shape{g.num_windows(), g.tokens(), c});
  for (int w = 0; w < g.num_windows(); ++w)
    for (int t = 0; t < g.tokens(); ++t) {
      T* dst = out.tokens.data() + (static_cast<std::size_t>(w) * g.tokens() + t) * c;
      const int src = g.source(w, t);
      for (int ch = 0; ch < c; ++ch) dst[ch] = x[ch * plane + src];
    }
  out.height = x.height();
  out.width = x.width();
  out.window = window;
  out.shift = shift;
  out.padded_height = g.padded_height();
  out.padded_width = g.padded_width();
  return out;
}

template <typename T>
Tensor<T> window_reverse(const TokenWindows<T>& windows) {
  const WindowGeometry g(windows.height, windows.width, windows.window, windows.shift);
  const Shape& s = windows.tokens.shape();
  if (s.size() != 3 || s[0] != g.num_windows() || s[1] != g.tokens()) {
    throw std::invalid_argument("window_reverse: token tensor " + shape_string(s) + " does not match geometry");
  }
  const int c = s[2];
  Tensor<T> out = Tensor<T>::map(c, windows.height, windows.width);
  const std::size_t plane = out.plane();
  for (int w = 0; w < g.num_windows(); ++w)
    for (int t = 0; t < g.tokens(); ++t) {
      if (!g.writes_output(w, t)) continue;
      const T* src = windows.tokens.data() + (static_cast<std::size_t>(w) * g.tokens() + t) * c;
      const int dst = g.source(w, t);
      for (int ch = 0; ch < c; ++ch) out[ch * plane + dst] = src[ch];
    }
  return out;
}

namespace {

// Token-major copy of one window: out[t * C + c] = map[c][source(t)].
template <typename T>
void gather_window(const Tensor<T>& map, const WindowGeometry& g, int w, T* out) {
  const int c = map.channels();
  const std::size_t plane = map.plane();
  for (int t = 0; t < g.tokens(); ++t) {
    const int src = g.source(w, t);
    T* row = out + static_cast<std::size_t>(t) * c;
    for (int ch = 0; ch < c; ++ch) row[ch] = map[ch * plane + src];
  }
}

template <typename T>
void scatter_add_window(const T* tokens, int c, const WindowGeometry& g, int w, std::size_t plane, T* map) {
  for (int t = 0; t < g.tokens(); ++t) {
    const int dst = g.source(w, t);
    const T* row = tokens + static_cast<std::size_t>(t) * c;
    for (int ch = 0; ch < c; ++ch) map[ch * plane + dst] += row[ch];
  }
}

}  // namespace

template <typename T>
Var<T> window_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const WindowGeometry& geometry, int heads,
                        std::vector<T>* weights) {
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  if (qv.rank() != 3 || kv.rank() != 3 || vv.rank() != 3) {
    throw std::invalid_argument("window_attention: expected C x H x W inputs");
  }
  if (qv.height() != kv.height() || qv.width() != kv.width() || qv.height() != vv.height() ||
      qv.width() != vv.width()) {
    throw std::invalid_argument("window_attention: grid mismatch between query " + shape_string(qv.shape()) +
                                " and key/value " + shape_string(kv.shape()) + "/" + shape_string(vv.shape()));
  }
  if (qv.height() != geometry.height() || qv.width() != geometry.width()) {
    throw std::invalid_argument("window_attention: geometry does not match input grid");
  }
  const int cqk = qv.channels();
  const int cv = vv.channels();
  if (kv.channels() != cqk) throw std::invalid_argument("window_attention: query/key channel mismatch");
  if (heads < 1 || cqk % heads != 0 || cv % heads != 0) {
    throw std::invalid_argument("window_attention: " + std::to_string(cqk) + "/" + std::to_string(cv) +
                                " channels not divisible by " + std::to_string(heads) + " heads");
  }
  const int dqk = cqk / heads;
  const int dv = cv / heads;
  const int n = geometry.tokens();
  const int nw = geometry.num_windows();
  const T scale = T(1) / std::sqrt(static_cast<T>(dqk));
  const std::size_t plane = qv.plane();
  const std::size_t block = static_cast<std::size_t>(n) * n;

  auto geo = std::make_shared<WindowGeometry>(geometry);
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(nw) * heads * block);

  Tensor<T> out = Tensor<T>::map(cv, qv.height(), qv.width());
  std::vector<T> qw(static_cast<std::size_t>(n) * cqk), kw(qw.size()), vw(static_cast<std::size_t>(n) * cv),
      ow(vw.size());
  for (int w = 0; w < nw; ++w) {
    gather_window(qv, *geo, w, qw.data());
    gather_window(kv, *geo, w, kw.data());
    gather_window(vv, *geo, w, vw.data());
    for (int h = 0; h < heads; ++h) {
      T* p = probs->data() + (static_cast<std::size_t>(w) * heads + h) * block;
      kernels::gemm<T>(Trans::no, Trans::yes, n, n, dqk, scale, qw.data() + h * dqk, cqk, kw.data() + h * dqk, cqk,
                       T(0), p, n);
      for (int i = 0; i < n; ++i) {
        T* row = p + static_cast<std::size_t>(i) * n;
        if (geo->shift() > 0) {
          for (int j = 0; j < n; ++j) {
            if (geo->masked(w, i, j)) row[j] += static_cast<T>(kMaskLogit);
          }
        }
        const T mx = *std::max_element(row, row + n);
        T total = T(0);
        for (int j = 0; j < n; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        const T inv = T(1) / total;
        for (int j = 0; j < n; ++j) row[j] *= inv;
      }
      kernels::gemm<T>(Trans::no, Trans::no, n, dv, n, T(1), p, n, vw.data() + h * dv, cv, T(0), ow.data() + h * dv,
                       cv);
    }
    for (int t = 0; t < n; ++t) {
      if (!geo->writes_output(w, t)) continue;
      const int dst = geo->source(w, t);
      for (int ch = 0; ch < cv; ++ch) out[ch * plane + dst] = ow[static_cast<std::size_t>(t) * cv + ch];
    }
  }
  if (weights) *weights = *probs;

  return make_op<T>(std::move(out), {q, k, v}, [q, k, v, geo, probs, heads, dqk, dv, scale](const Tensor<T>& g) {
    const Tensor<T>& qv = q.value();
    const int cqk = qv.channels();
    const int cv = v.value().channels();
    const int n = geo->tokens();
    const std::size_t plane = qv.plane();
    const std::size_t block = static_cast<std::size_t>(n) * n;
    std::vector<T> qw(static_cast<std::size_t>(n) * cqk), kw(qw.size()), vw(static_cast<std::size_t>(n) * cv);
    std::vector<T> dow(vw.size()), dqw(qw.size()), dkw(qw.size()), dvw(vw.size());
    std::vector<T> dp(block);
    T* sq = q.grad_sink();
    T* sk = k.grad_sink();
    T* sv = v.grad_sink();
    for (int w = 0; w < geo->num_windows(); ++w) {
      gather_window(qv, *geo, w, qw.data());
      gather_window(k.value(), *geo, w, kw.data());
      gather_window(v.value(), *geo, w, vw.data());
      for (int t = 0; t < n; ++t) {
        T* row = dow.data() + static_cast<std::size_t>(t) * cv;
        if (!geo->writes_output(w, t)) {
          std::fill(row, row + cv, T(0));
          continue;
        }
        const int src = geo->source(w, t);
        for (int ch = 0; ch < cv; ++ch) row[ch] = g[ch * plane + src];
      }
      for (int h = 0; h < heads; ++h) {
        const T* p = probs->data() + (static_cast<std::size_t>(w) * heads + h) * block;
        // dP = dO V^T, dV = P^T dO
        kernels::gemm<T>(Trans::no, Trans::yes, n, n, dv, T(1), dow.data() + h * dv, cv, vw.data() + h * dv, cv, T(0),
                         dp.data(), n);
        kernels::gemm<T>(Trans::yes, Trans::no, n, dv, n, T(1), p, n, dow.data() + h * dv, cv, T(0),
                         dvw.data() + h * dv, cv);
        // softmax backward, in place: dS = P * (dP - rowsum(P * dP))
        for (int i = 0; i < n; ++i) {
          const T* prow = p + static_cast<std::size_t>(i) * n;
          T* drow = dp.data() + static_cast<std::size_t>(i) * n;
          T dot = T(0);
          for (int j = 0; j < n; ++j) dot += prow[j] * drow[j];
          for (int j = 0; j < n; ++j) drow[j] = prow[j] * (drow[j] - dot);
        }
        kernels::gemm<T>(Trans::no, Trans::no, n, dqk, n, scale, dp.data(), n, kw.data() + h * dqk, cqk, T(0),
                         dqw.data() + h * dqk, cqk);
        kernels::gemm<T>(Trans::yes, Trans::no, n, dqk, n, scale, dp.data(), n, qw.data() + h * dqk, cqk, T(0),
                         dkw.data() + h * dqk, cqk);
      }
      if (sq) scatter_add_window(dqw.data(), cqk, *geo, w, plane, sq);
      if (sk) scatter_add_window(dkw.data(), cqk, *geo, w, plane, sk);
      if (sv) scatter_add_window(dvw.data(), cv, *geo, w, plane, sv);
    }
  });
}

template <typename T>
WindowSelfAttention<T>::WindowSelfAttention(ParameterSet<T>& params, const std::string& name, int channels,
                                            const WindowConfig& config, Rng& rng)
    : channels_(channels), config_(config) {
  if (config.heads < 1 || channels % config.heads != 0) {
    throw std::invalid_argument(name + ": " + std::to_string(channels) + " channels not divisible by " +
                                std::to_string(config.heads) + " heads");
  }
  qkv_ = Conv2d<T>(params, name + ".qkv", channels, 3 * channels, 1, Init::trunc_normal, rng);
  proj_ = Conv2d<T>(params, name + ".proj", channels, channels, 1, Init::zeros, rng);
}

template <typename T>
Var<T> WindowSelfAttention<T>::operator()(const Var<T>& x, int shift, std::vector<T>* weights) const {
  const Var<T> qkv = qkv_(x);
  const WindowGeometry geometry(x.value().height(), x.value().width(), config_.window, shift);
  const Var<T> attended = window_attention(slice_channels(qkv, 0, channels_), slice_channels(qkv, channels_, channels_),
                                           slice_channels(qkv, 2 * channels_, channels_), geometry, config_.heads,
                                           weights);
  return proj_(attended);
}

template <typename T>
WindowCrossAttention<T>::WindowCrossAttention(ParameterSet<T>& params, const std::string& name, int channels,
                                              int kv_channels, const WindowConfig& config, Rng& rng)
    : channels_(channels), config_(config) {
  if (config.heads < 1 || channels % config.heads != 0) {
    throw std::invalid_argument(name + ": " + std::to_string(channels) + " channels not divisible by " +
                                std::to_string(config.heads) + " heads");
  }
  q_ = Conv2d<T>(params, name + ".q", channels, channels, 1, Init::trunc_normal, rng);
  kv_ = Conv2d<T>(params, name + ".kv", kv_channels, 2 * channels, 1, Init::trunc_normal, rng);
  proj_ = Conv2d<T>(params, name + ".proj", channels, channels, 1, Init::zeros, rng);
}

template <typename T>
Var<T> WindowCrossAttention<T>::operator()(const Var<T>& query_src, const Var<T>& kv_src,
                                           std::vector<T>* weights) const {
  const Tensor<T>& qs = query_src.value();
  const Tensor<T>& ks = kv_src.value();
  if (qs.rank() != 3 || ks.rank() != 3 || qs.height() != ks.height() || qs.width() != ks.width()) {
    throw std::invalid_argument("w_mca: grid mismatch between query source " + shape_string(qs.shape()) +
                                " and key/value source " + shape_string(ks.shape()));
  }
  const Var<T> kv = kv_(kv_src);
  const WindowGeometry geometry(qs.height(), qs.width(), config_.window, 0);
  const Var<T> attended = window_attention(q_(query_src), slice_channels(kv, 0, channels_),
                                           slice_channels(kv, channels_, channels_), geometry, config_.heads, weights);
  return proj_(attended);
}

template <typename T>
CrossModalityModule<T>::CrossModalityModule(ParameterSet<T>& params, const std::string& name, int channels,
                                            int kv_channels, const WindowConfig& config, Rng& rng)
    : channels_(channels),
      kv_channels_(kv_channels),
      norm_self_(params, name + ".norm1", channels),
      msa_(params, name + ".msa", channels, config, rng),
      norm_cross_(params, name + ".norm2", channels),
      norm_guidance_(params, name + ".norm_kv", kv_channels),
      mca_(params, name + ".mca", channels, kv_channels, config, rng),
      norm_mlp_(params, name + ".norm3", channels),
      mlp_(params, name + ".mlp", channels, mlp_hidden(channels, config.mlp_ratio), rng, Init::zeros) {}

template <typename T>
Var<T> CrossModalityModule<T>::operator()(const Var<T>& features, const Var<T>& guidance) const {
  const Tensor<T>& f = features.value();
  const Tensor<T>& d = guidance.value();
  if (f.rank() != 3 || d.rank() != 3 || f.channels() != channels_ || d.channels() != kv_channels_) {
    throw std::invalid_argument("xm: expected features " + std::to_string(channels_) + " x h x w and guidance " +
                                std::to_string(kv_channels_) + " x h x w, got " + shape_string(f.shape()) + " and " +
                                shape_string(d.shape()));
  }
  if (f.height() != d.height() || f.width() != d.width()) {
    throw std::invalid_argument("xm: spatial mismatch between features " + shape_string(f.shape()) + " and guidance " +
                                shape_string(d.shape()));
  }
  const Var<T> mid = add(features, msa_(norm_self_(features), 0));
  const Var<T> cross = add(mid, mca_(norm_cross_(mid), norm_guidance_(guidance)));
  return add(cross, mlp_(norm_mlp_(cross)));
}

template TokenWindows<float> window_partition<float>(const Tensor<float>&, int, int);
template TokenWindows<double> window_partition<double>(const Tensor<double>&, int, int);
template Tensor<float> window_reverse<float>(const TokenWindows<float>&);
template Tensor<double> window_reverse<double>(const TokenWindows<double>&);
template Var<float> window_attention<float>(const Var<float>&, const Var<float>&, const Var<float>&,
                                            const WindowGeometry&, int, std::vector<float>*);
template Var<double> window_attention<double>(const Var<double>&, const Var<double>&, const Var<double>&,
                                              const WindowGeometry&, int, std::vector<double>*);
template class WindowSelfAttention<float>;
template class WindowSelfAttention<double>;
template class WindowCrossAttention<float>;
template class WindowCrossAttention<double>;
template class CrossModalityModule<float>;
template class CrossModalityModule<double>;

}  // namespace xrds
