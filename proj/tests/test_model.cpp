#include <doctest.h>

#include <fstream>

#include "support.hpp"
#include "xrds/data_io.hpp"
#include "xrds/errors.hpp"
#include "xrds/model.hpp"

using namespace xrds;
using test::random_tensor;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(int scale) {
  ModelConfig c;
  c.scale = scale;
  c.xdg_groups = 2;
  c.rdst_blocks = 1;
  c.dense_layers = 2;
  c.channels = 8;
  c.aux_channels = 4;
  c.kv_channels = 8;
  c.growth = 4;
  c.window = 4;
  c.heads = 2;
  return c;
}

ModelConfig micro(int scale) {
  ModelConfig c;
  c.scale = scale;
  c.xdg_groups = 1;
  c.rdst_blocks = 1;
  c.dense_layers = 1;
  c.channels = 8;
  c.window = 4;
  return c;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> inputs(int h, int w, int s, std::mt19937_64& rng) {
  return {random_tensor<T>({3, h, w}, rng, 0.0, 1.0), random_tensor<T>({6, s * h, s * w}, rng, 0.0, 1.0)};
}

}  // namespace

TEST_CASE("output shape is the low-resolution size times the scale") {
  std::mt19937_64 rng(1);
  for (int s : {1, 2, 4, 8}) {
    XrdsModel<float> model(tiny(s));
    const auto [lr, aux] = inputs<float>(8, 12, s, rng);
    CHECK(model.infer(lr, aux).shape() == Shape{3, 8 * s, 12 * s});
  }
  XrdsModel<float> model(tiny(4));
  const auto [lr, aux] = inputs<float>(16, 16, 4, rng);
  CHECK(model.infer(lr, aux).shape() == Shape{3, 64, 64});
  // Sides that are not window multiples are padded internally.
  const auto [lr2, aux2] = inputs<float>(5, 7, 4, rng);
  CHECK(model.infer(lr2, aux2).shape() == Shape{3, 20, 28});
}

TEST_CASE("pixel shuffle places channels a, b, c, d row-major") {
  const Tensor<float> x({4, 1, 1}, {1, 2, 3, 4});
  const auto y = pixel_shuffle_tensor(x, 2);
  CHECK(y.shape() == Shape{1, 2, 2});
  CHECK(y.storage() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("invalid configs and inputs are rejected") {
  ModelConfig bad = tiny(3);
  CHECK_THROWS_AS(XrdsModel<float>{bad}, ValidationError);
  bad = tiny(2);
  bad.channels = 7;
  CHECK_THROWS_AS(XrdsModel<float>{bad}, ValidationError);
  bad = tiny(2);
  bad.rdst_blocks = 0;
  CHECK_THROWS_AS(XrdsModel<float>{bad}, ValidationError);

  XrdsModel<float> model(tiny(2));
  CHECK_THROWS_AS(model.infer(Tensor<float>({3, 8, 8}), Tensor<float>({6, 8, 8})), ValidationError);
  CHECK_THROWS_AS(model.infer(Tensor<float>({4, 8, 8}), Tensor<float>({6, 16, 16})), ValidationError);
  CHECK_THROWS_AS(model.infer(Tensor<float>({3, 8, 8}), Tensor<float>({3, 16, 16})), ValidationError);
}

TEST_CASE("non-finite activations raise instead of propagating") {
  XrdsModel<float> model(tiny(2));
  Tensor<float> lr({3, 8, 8}, 0.5f);
  lr[3] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(model.infer(lr, Tensor<float>({6, 16, 16}, 0.5f)), NonFiniteError);
}

TEST_CASE("at initialisation the output does not depend on the aux input") {
  std::mt19937_64 rng(2);
  XrdsModel<float> model(tiny(2), 9);
  const auto [lr, aux] = inputs<float>(8, 8, 2, rng);
  const auto other = random_tensor<float>({6, 16, 16}, rng, 0.0, 1.0);
  CHECK(bitwise_equal(model.infer(lr, aux), model.infer(lr, other)));
  // Once the tails are trained (here: randomised) the aux path is live.
  test::randomize_parameters(model.parameters(), rng, 0.2);
  CHECK(test::max_abs_diff(model.infer(lr, aux), model.infer(lr, other)) > 1e-6);
}

TEST_CASE("aux modes zero the hidden planes") {
  std::mt19937_64 rng(3);
  const auto aux = random_tensor<float>({6, 4, 4}, rng, 0.1, 1.0);
  auto zero_planes = [](const Tensor<float>& t) {
    std::vector<bool> zero(6, true);
    for (int c = 0; c < 6; ++c)
      for (int i = 0; i < 16; ++i) zero[static_cast<std::size_t>(c)] = zero[static_cast<std::size_t>(c)] && t[static_cast<std::size_t>(c * 16 + i)] == 0.0f;
    return zero;
  };
  CHECK(zero_planes(mask_aux(aux, AuxMode::both)) == std::vector<bool>{false, false, false, false, false, false});
  CHECK(zero_planes(mask_aux(aux, AuxMode::albedo)) == std::vector<bool>{false, false, false, true, true, true});
  CHECK(zero_planes(mask_aux(aux, AuxMode::normal)) == std::vector<bool>{true, true, true, false, false, false});
  CHECK(zero_planes(mask_aux(aux, AuxMode::none)) == std::vector<bool>{true, true, true, true, true, true});
  CHECK(parse_aux_mode(to_string(AuxMode::normal)) == AuxMode::normal);
  CHECK_THROWS_AS(parse_aux_mode("depth"), ValidationError);

  ModelConfig c = tiny(2);
  c.aux_mode = AuxMode::none;
  XrdsModel<float> blind(c);
  test::randomize_parameters(blind.parameters(), rng, 0.2);
  const auto [lr, a] = inputs<float>(8, 8, 2, rng);
  CHECK(bitwise_equal(blind.infer(lr, a), blind.infer(lr, random_tensor<float>({6, 16, 16}, rng))));
}

TEST_CASE("micro model gradients match central differences") {
  std::mt19937_64 rng(4);
  XrdsModel<double> model(micro(2), 5);
  test::randomize_parameters(model.parameters(), rng, 0.2);
  Var<double> lr = Var<double>::parameter(random_tensor<double>({3, 8, 8}, rng, 0.0, 1.0));
  Var<double> aux = Var<double>::parameter(random_tensor<double>({6, 16, 16}, rng, 0.0, 1.0));
  const auto target = random_tensor<double>({3, 16, 16}, rng, 0.0, 1.0);
  std::vector<std::pair<std::string, Var<double>>> targets{{"lr", lr}, {"aux", aux}};
  for (const auto& e : model.parameters().entries()) targets.push_back(e);
  const auto r = test::finite_difference_check(
      targets, [&] { return weighted_sum(model.forward(lr, aux), target); }, 200, rng);
  CHECK_MESSAGE(r.max_rel_error < 1e-3, r.worst);
}

TEST_CASE("parameter count is monotone in B and C") {
  auto count = [](int b, int c) {
    ModelConfig cfg = ModelConfig::paper();
    cfg.rdst_blocks = b;
    cfg.channels = c;
    return XrdsModel<float>(cfg).count_parameters();
  };
  const std::size_t b1 = count(1, 64), b3 = count(3, 64), b5 = count(5, 64);
  CHECK(b1 < b3);
  CHECK(b3 < b5);
  CHECK(count(1, 32) < b1);
  const double paper = 9.36e6;
  CHECK(std::abs(static_cast<double>(b5) - paper) / paper < 0.15);
}

TEST_CASE("two forwards of the same model agree bit for bit") {
  std::mt19937_64 rng(5);
  XrdsModel<float> model(tiny(4), 3);
  test::randomize_parameters(model.parameters(), rng, 0.1);
  const auto [lr, aux] = inputs<float>(8, 8, 4, rng);
  CHECK(bitwise_equal(model.infer(lr, aux), model.infer(lr, aux)));
  XrdsModel<float> twin(tiny(4), 3);
  XrdsModel<float> other(tiny(4), 4);
  CHECK(bitwise_equal(twin.parameters().entries()[0].second.value(),
                      XrdsModel<float>(tiny(4), 3).parameters().entries()[0].second.value()));
  CHECK_FALSE(bitwise_equal(twin.parameters().entries()[0].second.value(),
                            other.parameters().entries()[0].second.value()));
}

TEST_CASE("checkpoint round trip reproduces forward outputs exactly") {
  std::mt19937_64 rng(6);
  test::TempDir dir("ckpt");
  XrdsModel<float> model(tiny(2), 1);
  test::randomize_parameters(model.parameters(), rng, 0.2);
  save_checkpoint(model, dir / "m.ckpt", {{"note", "hello"}});
  CheckpointInfo info;
  const XrdsModel<float> back = load_checkpoint<float>(dir / "m.ckpt", &info);
  CHECK(info.config == model.config());
  CHECK(info.metadata.at("note") == "hello");
  CHECK(info.id.size() == 8);
  CHECK(read_checkpoint_info(dir / "m.ckpt").id == info.id);
  const auto [lr, aux] = inputs<float>(8, 8, 2, rng);
  CHECK(bitwise_equal(back.infer(lr, aux), model.infer(lr, aux)));
  // Saving the same weights again gives the same bytes.
  save_checkpoint(back, dir / "n.ckpt", {{"note", "hello"}});
  CHECK(read_file(dir / "m.ckpt") == read_file(dir / "n.ckpt"));
}

TEST_CASE("checkpoint errors: config mismatch, truncation, corruption") {
  test::TempDir dir("ckpt");
  XrdsModel<float> model(tiny(2));
  save_checkpoint(model, dir / "s2.ckpt");

  CHECK_THROWS_AS(load_checkpoint<float>(dir / "s2.ckpt", tiny(4)), ConfigMismatchError);
  try {
    load_checkpoint<float>(dir / "s2.ckpt", tiny(4));
  } catch (const ConfigMismatchError& e) {
    CHECK(std::string(e.what()).find("scale: 2 vs 4") != std::string::npos);
  }
  ModelConfig other_mode = tiny(2);
  other_mode.aux_mode = AuxMode::none;
  CHECK_NOTHROW(load_checkpoint<float>(dir / "s2.ckpt", other_mode));

  SUBCASE("truncated") {
    fs::copy_file(dir / "s2.ckpt", dir / "t.ckpt");
    fs::resize_file(dir / "t.ckpt", fs::file_size(dir / "t.ckpt") - 10);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "t.ckpt"), IoError);
  }
  SUBCASE("flipped byte") {
    std::string bytes = read_file(dir / "s2.ckpt");
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x10);
    std::ofstream(dir / "c.ckpt", std::ios::binary) << bytes;
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(dir / "c.ckpt"), doctest::Contains("CRC"), IoError);
  }
  SUBCASE("not a checkpoint") {
    std::ofstream(dir / "x.ckpt") << "hello world, definitely not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "x.ckpt"), IoError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint<float>(dir / "none.ckpt"), IoError); }
}

TEST_CASE("matching weights transfer across scales except the head") {
  std::mt19937_64 rng(7);
  test::TempDir dir("ckpt");
  XrdsModel<float> source(tiny(2), 1);
  test::randomize_parameters(source.parameters(), rng, 0.2);
  save_checkpoint(source, dir / "s2.ckpt");
  XrdsModel<float> target(tiny(4), 2);
  const std::size_t copied = load_matching_weights(target, dir / "s2.ckpt");
  std::size_t expected = 0;
  for (const auto& [name, var] : target.parameters().entries()) {
    for (const auto& [sname, svar] : source.parameters().entries()) {
      if (name == sname && var.shape() == svar.shape()) {
        ++expected;
        CHECK(bitwise_equal(var.value(), svar.value()));
      }
    }
  }
  CHECK(copied == expected);
  CHECK(copied > 0);
  CHECK(copied < target.parameters().entries().size());
}
