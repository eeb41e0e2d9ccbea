#include "xrds/rdst.hpp"

#include <stdexcept>

namespace xrds {

template <typename T>
DenseSwinLayer<T>::DenseSwinLayer(ParameterSet<T>& params, const std::string& name, int in_channels, int growth,
                                  int shift, const WindowConfig& config, Rng& rng)
    : in_channels_(in_channels),
      shift_(shift),
      norm_attn_(params, name + ".norm1", in_channels),
      attn_(params, name + ".attn", in_channels, config, rng),
      norm_mlp_(params, name + ".norm2", in_channels),
      mlp_(params, name + ".mlp", in_channels, mlp_hidden(in_channels, config.mlp_ratio), rng, Init::zeros),
      to_growth_(params, name + ".out", in_channels, growth, 1, Init::kaiming_uniform, rng) {}

template <typename T>
Var<T> DenseSwinLayer<T>::operator()(const Var<T>& x) const {
  const Var<T> y = add(x, attn_(norm_attn_(x), shift_));
  const Var<T> z = add(y, mlp_(norm_mlp_(y)));
  return to_growth_(z);
}

template <typename T>
RdstBlock<T>::RdstBlock(ParameterSet<T>& params, const std::string& name, const RdstConfig& config, Rng& rng)
    : config_(config) {
  if (config.layers < 1 || config.growth < 1 || config.channels < 1) {
    throw std::invalid_argument("rdst: layers, growth and channels must be positive");
  }
  const int half = config.window.window / 2;
  for (int l = 0; l < config.layers; ++l) {
    const int shift = (l % 2 == 1) ? half : 0;
    layers_.emplace_back(params, name + ".layer." + std::to_string(l), config.channels + l * config.growth,
                         config.growth, shift, config.window, rng);
  }
  fusion_ = Conv2d<T>(params, name + ".lff", config.channels + config.layers * config.growth, config.channels, 1,
                      Init::zeros, rng);
}

template <typename T>
Var<T> RdstBlock<T>::forward(const Var<T>& x, RdstTrace<T>* trace, int ablate) const {
  if (x.shape().size() != 3 || x.value().channels() != config_.channels) {
    throw std::invalid_argument("rdst: expected " + std::to_string(config_.channels) + " channels, got " +
                                shape_string(x.shape()));
  }
  std::vector<Var<T>> features{x};
  auto visible = [&]() {
    std::vector<Var<T>> parts = features;
    if (ablate >= 0 && ablate < static_cast<int>(parts.size())) {
      parts[static_cast<std::size_t>(ablate)] = Var<T>::constant(Tensor<T>(parts[static_cast<std::size_t>(ablate)].shape()));
    }
    return parts;
  };
  for (const auto& layer : layers_) {
    const std::vector<Var<T>> parts = visible();
    features.push_back(layer(concat_channels<T>(parts)));
  }
  const std::vector<Var<T>> parts = visible();
  const Var<T> fused = fusion_(concat_channels<T>(parts));
  if (trace) trace->features = features;
  return add(x, fused);
}

template <typename T>
XdgGroup<T>::XdgGroup(ParameterSet<T>& params, const std::string& name, const XdgConfig& config, Rng& rng)
    : xm_(params, name + ".xm", config.channels, config.kv_channels, config.window, rng) {
  if (config.blocks < 1) throw std::invalid_argument("xdg: at least one RDST block is required");
  const RdstConfig rc{config.channels, config.layers, config.growth, config.window};
  for (int b = 0; b < config.blocks; ++b) blocks_.emplace_back(params, name + ".rdst." + std::to_string(b), rc, rng);
}

template <typename T>
Var<T> XdgGroup<T>::operator()(const Var<T>& features, const Var<T>& guidance) const {
  const Var<T> x = xm_(features, guidance);
  Var<T> deep = x;
  for (const auto& block : blocks_) deep = block(deep);
  return add(deep, x);
}

template class DenseSwinLayer<float>;
template class DenseSwinLayer<double>;
template class RdstBlock<float>;
template class RdstBlock<double>;
template class XdgGroup<float>;
template class XdgGroup<double>;

}  // namespace xrds
