#pragma once

// Shared test helpers: random data, temporary directories, finite-difference
// gradient checks and reference implementations used as oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "xrds/attention.hpp"
#include "xrds/autograd.hpp"
#include "xrds/layers.hpp"
#include "xrds/tensor.hpp"

namespace xrds::test {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// Replaces every parameter with U(-scale, scale) values so that zero-initialised
/// residual tails do not hide gradient paths.
template <typename T>
void randomize_parameters(ParameterSet<T>& params, std::mt19937_64& rng, double scale = 0.3) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [name, p] : params.entries())
    for (auto& v : p.mutable_value().values()) v = static_cast<T>(u(rng));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("xrds-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6e", v);
  return buf;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  std::string worst;
};

/// Central differences with step h on `samples` randomly chosen entries of
/// `targets` (inputs or parameters). `loss` rebuilds the graph from the
/// current values and returns a scalar.
/// Relative error: |analytic - numeric| / max(|analytic| + |numeric|, 1e-5 * max(1, |L|)).
/// The floor is an absolute tolerance of 1e-8 * max(1, |L|): round-off in the
/// summed loss limits what central differences at h = 1e-6 can resolve.
inline GradCheckResult finite_difference_check(std::vector<std::pair<std::string, Var<double>>> targets,
                                               const std::function<Var<double>()>& loss, int samples,
                                               std::mt19937_64& rng, double h = 1e-6) {
  for (auto& [name, v] : targets) v.zero_grad();
  const Var<double> base = loss();
  const double floor = 1e-5 * std::max(1.0, std::abs(base.value()[0]));
  backward(base);
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (auto& [name, v] : targets) {
    sizes.push_back(v.value().size());
    total += v.value().size();
  }
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheckResult r;
  for (int s = 0; s < samples; ++s) {
    std::size_t flat = pick(rng), t = 0;
    while (flat >= sizes[t]) flat -= sizes[t++];
    Var<double>& var = targets[t].second;
    const double analytic = var.grad()[flat];
    double& slot = var.mutable_value()[flat];
    const double saved = slot;
    double plus = 0.0, minus = 0.0;
    {
      NoGradGuard guard;
      slot = saved + h;
      plus = loss().value()[0];
      slot = saved - h;
      minus = loss().value()[0];
    }
    slot = saved;
    const double numeric = (plus - minus) / (2.0 * h);
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst = targets[t].first + "[" + std::to_string(flat) + "] analytic " + sci(analytic) +
                " numeric " + sci(numeric);
    }
    ++r.checked;
  }
  return r;
}

// ---- brute-force window attention ------------------------------------------

/// Reflected index, bouncing off both edges until it lands inside [0, n).
inline int mirror(int p, int n) {
  if (n == 1) return 0;
  while (p < 0 || p >= n) p = p < 0 ? -p : 2 * (n - 1) - p;
  return p;
}

/// Geometric mask rule: a pair may attend iff its displacement in the shifted
/// frame equals its displacement in the unshifted padded frame (no wrap-around).
inline bool same_region(int sy_i, int sx_i, int sy_j, int sx_j, int shift, int hp, int wp) {
  const int oy_i = (sy_i + shift) % hp, ox_i = (sx_i + shift) % wp;
  const int oy_j = (sy_j + shift) % hp, ox_j = (sx_j + shift) % wp;
  return (oy_i - oy_j) == (sy_i - sy_j) && (ox_i - ox_j) == (sx_i - sx_j);
}

/// Dense softmax attention per window computed in double from q, k, v maps
/// (C x H x W). Returns C_v x H x W.
inline Tensor<double> brute_force_window_attention(const Tensor<double>& q, const Tensor<double>& k,
                                                   const Tensor<double>& v, int window, int shift, int heads) {
  const int h = q.height(), w = q.width(), cq = q.channels(), cv = v.channels();
  const int hp = (h + window - 1) / window * window, wp = (w + window - 1) / window * window;
  const int dq = cq / heads, dv = cv / heads;
  auto sample = [&](const Tensor<double>& m, int c, int sy, int sx) {
    const int oy = (sy + shift) % hp, ox = (sx + shift) % wp;
    return m.at(c, mirror(oy, h), mirror(ox, w));
  };
  Tensor<double> out = Tensor<double>::map(cv, h, w);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dq));
  for (int wy = 0; wy < hp; wy += window)
    for (int wx = 0; wx < wp; wx += window)
      for (int head = 0; head < heads; ++head)
        for (int iy = wy; iy < wy + window; ++iy)
          for (int ix = wx; ix < wx + window; ++ix) {
            const int oy = (iy + shift) % hp, ox = (ix + shift) % wp;
            if (oy >= h || ox >= w) continue;
            std::vector<double> logits;
            std::vector<std::pair<int, int>> keys;
            for (int jy = wy; jy < wy + window; ++jy)
              for (int jx = wx; jx < wx + window; ++jx) {
                if (shift > 0 && !same_region(iy, ix, jy, jx, shift, hp, wp)) continue;
                double dot = 0.0;
                for (int c = 0; c < dq; ++c) dot += sample(q, head * dq + c, iy, ix) * sample(k, head * dq + c, jy, jx);
                logits.push_back(dot * scale);
                keys.emplace_back(jy, jx);
              }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (double& l : logits) z += (l = std::exp(l - mx));
            for (int c = 0; c < dv; ++c) {
              double acc = 0.0;
              for (std::size_t j = 0; j < keys.size(); ++j) {
                acc += logits[j] / z * sample(v, head * dv + c, keys[j].first, keys[j].second);
              }
              out.at(head * dv + c, oy, ox) = acc;
            }
          }
  return out;
}

/// 1x1 convolution (per-pixel linear map) in double.
template <typename T>
Tensor<double> linear_map(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const int co = weight.dim(0), ci = weight.dim(1);
  Tensor<double> out = Tensor<double>::map(co, x.height(), x.width());
  for (int o = 0; o < co; ++o)
    for (int y = 0; y < x.height(); ++y)
      for (int xx = 0; xx < x.width(); ++xx) {
        double acc = bias.empty() ? 0.0 : static_cast<double>(bias[static_cast<std::size_t>(o)]);
        for (int i = 0; i < ci; ++i) acc += static_cast<double>(weight[static_cast<std::size_t>(o * ci + i)]) * x.at(i, y, xx);
        out.at(o, y, xx) = acc;
      }
  return out;
}

template <typename T>
Tensor<double> slice(const Tensor<T>& x, int begin, int count) {
  Tensor<double> out = Tensor<double>::map(count, x.height(), x.width());
  for (int c = 0; c < count; ++c)
    for (int y = 0; y < x.height(); ++y)
      for (int xx = 0; xx < x.width(); ++xx) out.at(c, y, xx) = x.at(begin + c, y, xx);
  return out;
}

/// W-MSA recomputed from its parameters with the brute-force attention loop.
template <typename T>
Tensor<double> oracle_msa(WindowSelfAttention<T>& msa, const Tensor<T>& x, int window, int shift, int heads) {
  const int c = msa.channels();
  const Tensor<double> qkv = linear_map(x, msa.qkv().weight().value(), msa.qkv().bias().value());
  const Tensor<double> att =
      brute_force_window_attention(slice(qkv, 0, c), slice(qkv, c, c), slice(qkv, 2 * c, c), window, shift, heads);
  return linear_map(att, msa.proj().weight().value().template cast<double>(), msa.proj().bias().value().template cast<double>());
}

/// W-MCA recomputed from its parameters with the brute-force attention loop.
template <typename T>
Tensor<double> oracle_mca(WindowCrossAttention<T>& mca, const Tensor<T>& query_src, const Tensor<T>& kv_src, int window,
                          int heads) {
  const int c = mca.q().out_channels();
  const Tensor<double> q = linear_map(query_src, mca.q().weight().value(), mca.q().bias().value());
  const Tensor<double> kv = linear_map(kv_src, mca.kv().weight().value(), mca.kv().bias().value());
  const Tensor<double> att = brute_force_window_attention(q, slice(kv, 0, c), slice(kv, c, c), window, 0, heads);
  return linear_map(att, mca.proj().weight().value().template cast<double>(), mca.proj().bias().value().template cast<double>());
}

/// Largest attention weight placed on a pair the geometric oracle says must
/// not interact. `weights` holds one n x n block per (window, head).
template <typename T>
double max_masked_weight(const std::vector<T>& weights, const WindowGeometry& g, int heads) {
  const int n = g.tokens(), win = g.window();
  double worst = 0.0;
  for (int w = 0; w < g.num_windows(); ++w) {
    const int wy = w / g.windows_x() * win, wx = w % g.windows_x() * win;
    for (int h = 0; h < heads; ++h) {
      const T* block = weights.data() + (static_cast<std::size_t>(w) * heads + h) * n * n;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          if (same_region(wy + i / win, wx + i % win, wy + j / win, wx + j % win, g.shift(), g.padded_height(),
                          g.padded_width())) {
            continue;
          }
          worst = std::max(worst, static_cast<double>(block[i * n + j]));
        }
    }
  }
  return worst;
}

/// Largest per-query attention mass on keys outside the query's region.
template <typename T>
double max_cross_region_mass(const std::vector<T>& weights, const WindowGeometry& g, int heads) {
  const int n = g.tokens(), win = g.window();
  double worst = 0.0;
  for (int w = 0; w < g.num_windows(); ++w) {
    const int wy = w / g.windows_x() * win, wx = w % g.windows_x() * win;
    for (int h = 0; h < heads; ++h) {
      const T* block = weights.data() + (static_cast<std::size_t>(w) * heads + h) * n * n;
      for (int i = 0; i < n; ++i) {
        double mass = 0.0;
        for (int j = 0; j < n; ++j) {
          if (!same_region(wy + i / win, wx + i % win, wy + j / win, wx + j % win, g.shift(), g.padded_height(),
                           g.padded_width())) {
            mass += static_cast<double>(block[i * n + j]);
          }
        }
        worst = std::max(worst, mass);
      }
    }
  }
  return worst;
}

}  // namespace xrds::test
