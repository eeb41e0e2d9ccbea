#include "xrds/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace xrds {

template <typename T>
Var<T> ParameterSet<T>::create(const std::string& name, Tensor<T> init) {
  for (const auto& [existing, _] : entries_) {
    if (existing == name) throw std::logic_error("duplicate parameter name: " + name);
  }
  Var<T> v = Var<T>::parameter(std::move(init));
  entries_.emplace_back(name, v);
  return v;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : entries_) n += v.value().size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& [_, v] : entries_) v.zero_grad();
}

namespace {

template <typename T>
Tensor<T> uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> truncated_normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) {
    double s = dist(rng);
    while (std::abs(s) > 2.0 * stddev) s = dist(rng);
    v = static_cast<T>(s);
  }
  return t;
}

}  // namespace

template <typename T>
Conv2d<T>::Conv2d(ParameterSet<T>& params, const std::string& name, int in_channels, int out_channels, int kernel,
                  Init init, Rng& rng) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || kernel % 2 == 0) {
    throw std::invalid_argument("Conv2d " + name + ": invalid geometry");
  }
  const Shape wshape{out_channels, in_channels, kernel, kernel};
  const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
  Tensor<T> w(wshape), b(Shape{out_channels});
  switch (init) {
    case Init::kaiming_uniform:
      w = uniform<T>(wshape, 1.0 / std::sqrt(fan_in), rng);
      b = uniform<T>({out_channels}, 1.0 / std::sqrt(fan_in), rng);
      break;
    case Init::trunc_normal:
      w = truncated_normal<T>(wshape, 0.02, rng);
      break;
    case Init::zeros:
      break;
  }
  weight_ = params.create(name + ".weight", std::move(w));
  bias_ = params.create(name + ".bias", std::move(b));
}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterSet<T>& params, const std::string& name, int channels) {
  gamma_ = params.create(name + ".weight", Tensor<T>(Shape{channels}, T(1)));
  beta_ = params.create(name + ".bias", Tensor<T>(Shape{channels}, T(0)));
}

template <typename T>
Mlp<T>::Mlp(ParameterSet<T>& params, const std::string& name, int channels, int hidden, Rng& rng, Init tail_init)
    : fc1_(params, name + ".fc1", channels, hidden, 1, Init::trunc_normal, rng),
      fc2_(params, name + ".fc2", hidden, channels, 1, tail_init, rng) {}

int mlp_hidden(int channels, double ratio) {
  const int hidden = static_cast<int>(std::lround(channels * ratio));
  if (hidden < 1) throw std::invalid_argument("mlp_ratio yields an empty hidden layer");
  return hidden;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class Mlp<float>;
template class Mlp<double>;

}  // namespace xrds
