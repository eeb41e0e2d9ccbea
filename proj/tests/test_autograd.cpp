#include <doctest.h>

#include "support.hpp"

using namespace xrds;
using test::finite_difference_check;
using test::random_tensor;

namespace {

using V = Var<double>;

void expect_gradients(std::vector<std::pair<std::string, V>> targets, const std::function<V()>& loss, int samples = 60) {
  std::mt19937_64 rng(99);
  const auto r = finite_difference_check(std::move(targets), loss, samples, rng);
  CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
}

}  // namespace

TEST_CASE("elementwise ops pass finite differences") {
  std::mt19937_64 rng(1);
  V a = V::parameter(random_tensor<double>({2, 3, 4}, rng));
  V b = V::parameter(random_tensor<double>({2, 3, 4}, rng));
  const auto w = random_tensor<double>({2, 3, 4}, rng);
  expect_gradients({{"a", a}, {"b", b}}, [&] { return weighted_sum(add(scale(a, 1.5), gelu(b)), w); });
  // Keep relu inputs away from the kink.
  for (auto& v : a.mutable_value().values()) v += v >= 0 ? 0.1 : -0.1;
  expect_gradients({{"a", a}}, [&] { return weighted_sum(relu(a), w); });
  expect_gradients({{"a", a}}, [&] { return mean(a); });
  expect_gradients({{"a", a}}, [&] { return sum(gelu(a)); });
}

TEST_CASE("conv2d passes finite differences for 1x1 and 3x3 kernels") {
  std::mt19937_64 rng(2);
  for (int k : {1, 3}) {
    V x = V::parameter(random_tensor<double>({3, 5, 6}, rng));
    V w = V::parameter(random_tensor<double>({4, 3, k, k}, rng));
    V b = V::parameter(random_tensor<double>({4}, rng));
    const auto proj = random_tensor<double>({4, 5, 6}, rng);
    expect_gradients({{"x", x}, {"w", w}, {"b", b}}, [&] { return weighted_sum(conv2d(x, w, b), proj); }, 120);
  }
}

TEST_CASE("conv2d zero-pads the border") {
  V x = V::constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
  V w = V::constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  const auto y = conv2d(x, w, V()).value();
  // Every output sees the whole 2x2 input.
  for (double v : y.values()) CHECK(v == 10.0);
}

TEST_CASE("layer norm, concat and slice pass finite differences") {
  std::mt19937_64 rng(3);
  V x = V::parameter(random_tensor<double>({5, 3, 3}, rng));
  V g = V::parameter(random_tensor<double>({5}, rng));
  V b = V::parameter(random_tensor<double>({5}, rng));
  V y = V::parameter(random_tensor<double>({2, 3, 3}, rng));
  const auto w1 = random_tensor<double>({5, 3, 3}, rng);
  const auto w2 = random_tensor<double>({4, 3, 3}, rng);
  expect_gradients({{"x", x}, {"gamma", g}, {"beta", b}}, [&] { return weighted_sum(layer_norm_channels(x, g, b), w1); });
  expect_gradients({{"x", x}, {"y", y}}, [&] {
    const std::vector<V> parts{x, y};
    return weighted_sum(slice_channels(concat_channels<double>(parts), 3, 4), w2);
  });
}

TEST_CASE("layer norm normalises each pixel across channels") {
  std::mt19937_64 rng(4);
  V x = V::constant(random_tensor<double>({8, 2, 2}, rng, -3, 5));
  const auto y = layer_norm_channels(x, V::constant(Tensor<double>({8}, 1.0)), V::constant(Tensor<double>({8}, 0.0))).value();
  for (int p = 0; p < 4; ++p) {
    double mu = 0, var = 0;
    for (int c = 0; c < 8; ++c) mu += y[static_cast<std::size_t>(c * 4 + p)] / 8;
    for (int c = 0; c < 8; ++c) var += std::pow(y[static_cast<std::size_t>(c * 4 + p)] - mu, 2) / 8;
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("deshuffle uses the c*f*f + dy*f + dx channel convention") {
  Tensor<double> x = Tensor<double>::map(2, 4, 4);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 4; ++xx) x.at(c, y, xx) = 100 * c + 10 * y + xx;
  const auto d = deshuffle_tensor(x, 2);
  REQUIRE(d.shape() == Shape{8, 2, 2});
  for (int c = 0; c < 2; ++c)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx)
        for (int y = 0; y < 2; ++y)
          for (int xx = 0; xx < 2; ++xx) CHECK(d.at(c * 4 + dy * 2 + dx, y, xx) == x.at(c, 2 * y + dy, 2 * xx + dx));
  CHECK(bitwise_equal(pixel_shuffle_tensor(d, 2), x));
}

TEST_CASE("deshuffle and pixel shuffle pass finite differences") {
  std::mt19937_64 rng(5);
  V x = V::parameter(random_tensor<double>({2, 4, 6}, rng));
  V z = V::parameter(random_tensor<double>({8, 2, 3}, rng));
  const auto w1 = random_tensor<double>({8, 2, 3}, rng);
  const auto w2 = random_tensor<double>({2, 4, 6}, rng);
  expect_gradients({{"x", x}}, [&] { return weighted_sum(deshuffle(x, 2), w1); });
  expect_gradients({{"z", z}}, [&] { return weighted_sum(pixel_shuffle(z, 2), w2); });
}

TEST_CASE("robust loss value and gradient") {
  const Tensor<double> target({1, 1, 2}, {0.1, -0.3});
  V pred = V::parameter(Tensor<double>({1, 1, 2}, {0.0, 0.2}));
  const V loss = robust_loss(pred, target, 0.1);
  CHECK(loss.value()[0] == doctest::Approx((0.5 + 0.5 / 0.6) / 2).epsilon(1e-14));
  expect_gradients({{"pred", pred}}, [&] { return robust_loss(pred, target, 0.1); }, 20);
  // Subgradient at d = 0 is zero.
  V exact = V::parameter(Tensor<double>({1, 1, 2}, {0.1, -0.3}));
  backward(robust_loss(exact, target, 0.1));
  CHECK(exact.grad()[0] == 0.0);
  CHECK(exact.grad()[1] == 0.0);
}

TEST_CASE("gradients accumulate across backward calls and reset with zero_grad") {
  V a = V::parameter(Tensor<double>({1}, {2.0}));
  backward(scale(a, 3.0));
  backward(scale(a, 3.0));
  CHECK(a.grad()[0] == 6.0);
  a.zero_grad();
  CHECK(a.grad()[0] == 0.0);
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  V a = V::parameter(Tensor<double>({1}, {2.0}));
  V out;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_mode_enabled());
    out = scale(a, 3.0);
  }
  CHECK(grad_mode_enabled());
  CHECK_FALSE(out.requires_grad());
  CHECK(out.value()[0] == 6.0);
}

TEST_CASE("shared subexpressions receive the sum of both paths") {
  V a = V::parameter(Tensor<double>({1}, {1.5}));
  const V b = scale(a, 2.0);
  backward(sum(add(b, b)));
  CHECK(a.grad()[0] == 4.0);
}

TEST_CASE("shape errors are reported") {
  V a = V::constant(Tensor<double>({1, 2, 2}));
  V b = V::constant(Tensor<double>({1, 2, 3}));
  CHECK_THROWS(add(a, b));
  CHECK_THROWS(deshuffle(b, 2));
  CHECK_THROWS(slice_channels(a, 0, 2));
}
