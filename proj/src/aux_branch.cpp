#include "xrds/aux_branch.hpp"

#include <stdexcept>

namespace xrds {

template <typename T>
ResidualBlock<T>::ResidualBlock(ParameterSet<T>& params, const std::string& name, int channels, Rng& rng)
    : conv1_(params, name + ".conv1", channels, channels, 3, Init::kaiming_uniform, rng),
      conv2_(params, name + ".conv2", channels, channels, 3, Init::zeros, rng) {}

template <typename T>
Var<T> ResidualBlock<T>::operator()(const Var<T>& x) const {
  if (x.value().channels() != conv1_.in_channels()) {
    throw std::invalid_argument("residual block: input has " + std::to_string(x.value().channels()) +
                                " channels, expected " + std::to_string(conv1_.in_channels()));
  }
  return add(x, conv2_(relu(conv1_(x))));
}

template <typename T>
AuxBranch<T>::AuxBranch(ParameterSet<T>& params, const std::string& name, const AuxBranchConfig& config, Rng& rng)
    : config_(config) {
  if (config.stages < 1 || config.channels < 1 || config.kv_channels < 1 || config.scale < 1) {
    throw std::invalid_argument("aux branch: stages, channels and scale must be positive");
  }
  input_conv_ = Conv2d<T>(params, name + ".conv_in", config.in_channels, config.channels, 3, Init::kaiming_uniform, rng);
  for (int i = 1; i < config.stages; ++i) {
    blocks_.emplace_back(params, name + ".rb." + std::to_string(i), config.channels, rng);
  }
  const int deshuffled = config.channels * config.scale * config.scale;
  for (int i = 0; i < config.stages; ++i) {
    projections_.emplace_back(params, name + ".proj." + std::to_string(i), deshuffled, config.kv_channels, 1,
                              Init::kaiming_uniform, rng);
  }
}

template <typename T>
std::vector<Var<T>> AuxBranch<T>::operator()(const Var<T>& aux) const {
  const Shape& s = aux.shape();
  if (s.size() != 3 || s[0] != config_.in_channels) {
    throw std::invalid_argument("aux branch: expected " + std::to_string(config_.in_channels) +
                                " x H x W input, got " + shape_string(s));
  }
  if (s[1] % config_.scale != 0 || s[2] % config_.scale != 0) {
    throw std::invalid_argument("aux branch: " + shape_string(s) + " not divisible by scale " +
                                std::to_string(config_.scale));
  }
  std::vector<Var<T>> guidance;
  guidance.reserve(static_cast<std::size_t>(config_.stages));
  Var<T> h = input_conv_(aux);
  for (int i = 0; i < config_.stages; ++i) {
    if (i > 0) h = blocks_[static_cast<std::size_t>(i - 1)](h);
    guidance.push_back(projections_[static_cast<std::size_t>(i)](deshuffle(h, config_.scale)));
  }
  return guidance;
}

template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class AuxBranch<float>;
template class AuxBranch<double>;

}  // namespace xrds
