#include <doctest.h>

#include <cstring>
#include <fstream>
#include <limits>

#include "support.hpp"
#include "xrds/data_io.hpp"
#include "xrds/errors.hpp"

using namespace xrds;
namespace fs = std::filesystem;

namespace {

RenderingSample make_sample(int h, int w, int s, std::mt19937_64& rng) {
  RenderingSample sample;
  sample.scale = s;
  sample.spp_lr = 16;
  sample.spp_aux = 1;
  sample.lr_rgb = test::random_tensor<float>({3, h / s, w / s}, rng, 0.0, 2.0);
  sample.aux = test::random_tensor<float>({6, h, w}, rng, 0.0, 1.0);
  for (std::size_t i = 3 * sample.aux.plane(); i < sample.aux.size(); ++i) sample.aux[i] = 2.0f * sample.aux[i] - 1.0f;
  sample.hr_rgb = test::random_tensor<float>({3, h, w}, rng, 0.0, 2.0);
  return sample;
}

void overwrite_bytes(const fs::path& path, std::size_t offset, const void* data, std::size_t n) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(static_cast<std::streamoff>(offset));
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

}  // namespace

TEST_CASE("save then load is bit exact, including subnormals") {
  std::mt19937_64 rng(1);
  test::TempDir dir("io");
  RenderingSample s = make_sample(8, 12, 2, rng);
  s.lr_rgb[0] = std::numeric_limits<float>::denorm_min();
  s.lr_rgb[1] = -std::numeric_limits<float>::denorm_min();
  s.hr_rgb->storage()[5] = 1e-40f;
  s.lr_rgb[2] = -0.0f;
  save_sample(s, dir / "a");
  const RenderingSample back = load_sample(dir / "a");
  CHECK(bitwise_equal(back.lr_rgb, s.lr_rgb));
  CHECK(bitwise_equal(back.aux, s.aux));
  REQUIRE(back.hr_rgb.has_value());
  CHECK(bitwise_equal(*back.hr_rgb, *s.hr_rgb));
  CHECK(back.scale == 2);
  CHECK(back.spp_lr == 16);
  CHECK(back.spp_aux == 1);
  CHECK(std::signbit(back.lr_rgb[2]));
}

TEST_CASE("sample without hr_rgb round-trips without the plane") {
  std::mt19937_64 rng(2);
  test::TempDir dir("io");
  RenderingSample s = make_sample(4, 4, 1, rng);
  s.hr_rgb.reset();
  save_sample(s, dir / "x");
  CHECK_FALSE(fs::exists(dir / "x" / "hr_rgb.f32"));
  CHECK_FALSE(load_sample(dir / "x").hr_rgb.has_value());
}

TEST_CASE("a 3x2x2 plane is a 48-byte little-endian payload") {
  std::mt19937_64 rng(3);
  test::TempDir dir("io");
  RenderingSample s = make_sample(4, 4, 2, rng);
  s.lr_rgb[0] = 1.0f;  // 0x3f800000
  save_sample(s, dir / "p");
  CHECK(fs::file_size(dir / "p" / "lr_rgb.f32") == 48);
  const std::string bytes = read_file(dir / "p" / "lr_rgb.f32");
  CHECK(static_cast<unsigned char>(bytes[0]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[2]) == 0x80);
  CHECK(static_cast<unsigned char>(bytes[3]) == 0x3f);
}

TEST_CASE("meta.json records dims, spp, scale and channel names") {
  std::mt19937_64 rng(4);
  test::TempDir dir("io");
  save_sample(make_sample(8, 8, 4, rng), dir / "m");
  const std::string meta = read_file(dir / "m" / "meta.json");
  for (const char* key : {"\"schema_version\"", "\"height\"", "\"width\"", "\"scale\"", "\"spp_lr\"", "\"spp_aux\"",
                          "\"albedo_r\"", "\"normal_z\"", "\"hr_rgb\""}) {
    CHECK_MESSAGE(meta.find(key) != std::string::npos, key);
  }
}

TEST_CASE("inconsistent samples are rejected before anything is written") {
  std::mt19937_64 rng(5);
  test::TempDir dir("io");
  RenderingSample s = make_sample(8, 8, 2, rng);
  s.aux = Tensor<float>::map(6, 6, 8);
  CHECK_THROWS_AS(save_sample(s, dir / "bad"), ValidationError);
  CHECK_FALSE(fs::exists(dir / "bad"));

  RenderingSample t = make_sample(8, 8, 2, rng);
  t.scale = 3;
  CHECK_THROWS_AS(validate_sample(t), ValidationError);
  t = make_sample(8, 8, 2, rng);
  t.aux[0] = 1.5f;  // albedo out of range
  CHECK_THROWS_AS(validate_sample(t), ValidationError);
  t = make_sample(8, 8, 2, rng);
  t.spp_aux = 0;
  CHECK_THROWS_AS(validate_sample(t), ValidationError);
  t = make_sample(8, 8, 2, rng);
  t.lr_rgb[3] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(validate_sample(t), NonFiniteError);
}

TEST_CASE("load errors: truncation, missing plane, NaN on disk") {
  std::mt19937_64 rng(6);
  test::TempDir dir("io");
  save_sample(make_sample(8, 8, 2, rng), dir / "s");

  SUBCASE("payload truncated by 4 bytes") {
    const fs::path p = dir / "s" / "aux.f32";
    fs::resize_file(p, fs::file_size(p) - 4);
    CHECK_THROWS_WITH_AS(load_sample(dir / "s"), doctest::Contains("size mismatch"), IoError);
  }
  SUBCASE("missing plane file") {
    fs::remove(dir / "s" / "lr_rgb.f32");
    CHECK_THROWS_WITH_AS(load_sample(dir / "s"), doctest::Contains("missing plane"), IoError);
  }
  SUBCASE("one NaN pixel names the plane") {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    overwrite_bytes(dir / "s" / "hr_rgb.f32", 4 * 17, &nan, 4);
    CHECK_THROWS_WITH_AS(load_sample(dir / "s"), doctest::Contains("hr_rgb"), NonFiniteError);
  }
  SUBCASE("missing sidecar") {
    fs::remove(dir / "s" / "meta.json");
    CHECK_THROWS_AS(load_sample(dir / "s"), IoError);
  }
}

TEST_CASE("saving over an existing sample replaces it and leaves no temporaries") {
  std::mt19937_64 rng(7);
  test::TempDir dir("io");
  save_sample(make_sample(8, 8, 2, rng), dir / "r");
  const RenderingSample second = make_sample(8, 8, 2, rng);
  save_sample(second, dir / "r");
  CHECK(bitwise_equal(load_sample(dir / "r").lr_rgb, second.lr_rgb));
  int entries = 0;
  for (const auto& e : fs::directory_iterator(dir.path())) {
    (void)e;
    ++entries;
  }
  CHECK(entries == 1);
}

namespace {

// Each pixel stores its own coordinates: value = 1000 * y + x.
RenderingSample ramp_sample(int h, int w, int s) {
  RenderingSample sample;
  sample.scale = s;
  sample.lr_rgb = Tensor<float>::map(3, h / s, w / s);
  sample.aux = Tensor<float>::map(6, h, w);
  sample.hr_rgb = Tensor<float>::map(3, h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h / s; ++y)
      for (int x = 0; x < w / s; ++x) sample.lr_rgb.at(c, y, x) = static_cast<float>(1000 * (s * y) + s * x);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) sample.hr_rgb->at(c, y, x) = static_cast<float>(1000 * y + x);
  // Aux must stay in range, so encode coordinates in [0, 1].
  for (int c = 0; c < 6; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) sample.aux.at(c, y, x) = static_cast<float>((y * w + x) / double(h * w));
  return sample;
}

}  // namespace

TEST_CASE("patches are aligned: hr/aux origin = scale * lr origin") {
  const int s = 4, h = 64, w = 96, p = 16;
  const RenderingSample sample = ramp_sample(h, w, s);
  const PatchBatch batch = extract_patches(sample, p, 50, 123);
  REQUIRE(batch.lr.size() == 50);
  bool saw_min = false, saw_max_y = false;
  for (std::size_t i = 0; i < batch.lr.size(); ++i) {
    const auto [ly, lx] = batch.lr_origins[i];
    CHECK(ly >= 0);
    CHECK(lx >= 0);
    CHECK(ly + p / s <= h / s);
    CHECK(lx + p / s <= w / s);
    saw_min = saw_min || ly == 0;
    saw_max_y = saw_max_y || ly == h / s - p / s;
    // Nearest-neighbour downsampled hr crop origin equals the lr crop origin pixel.
    CHECK(batch.hr[i].at(0, 0, 0) == batch.lr[i].at(0, 0, 0));
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x) {
        CHECK(batch.hr[i].at(1, y, x) == sample.hr_rgb->at(1, s * ly + y, s * lx + x));
        CHECK(batch.aux[i].at(4, y, x) == sample.aux.at(4, s * ly + y, s * lx + x));
      }
  }
  CHECK(saw_min);
  CHECK(saw_max_y);
}

TEST_CASE("patch extraction never leaves the image") {
  // Every crop pixel must decode to an in-bounds source coordinate, and crops
  // must reach the last row and column exactly.
  const int s = 2, h = 32, w = 32;
  const RenderingSample sample = ramp_sample(h, w, s);
  int max_y = 0, max_x = 0;
  for (int seed = 0; seed < 40; ++seed) {
    const PatchBatch b = extract_patches(sample, 8, 4, static_cast<std::uint64_t>(seed));
    for (const auto& m : b.hr)
      for (float v : m.values()) {
        const int y = static_cast<int>(v) / 1000, x = static_cast<int>(v) % 1000;
        CHECK(y < h);
        CHECK(x < w);
        max_y = std::max(max_y, y);
        max_x = std::max(max_x, x);
      }
  }
  CHECK(max_y == h - 1);
  CHECK(max_x == w - 1);
}

TEST_CASE("patch extraction: determinism, full-frame crop and errors") {
  std::mt19937_64 rng(8);
  const RenderingSample sample = make_sample(16, 16, 2, rng);
  const PatchBatch a = extract_patches(sample, 8, 5, 42);
  const PatchBatch b = extract_patches(sample, 8, 5, 42);
  CHECK(a.lr_origins == b.lr_origins);
  const PatchBatch full = extract_patches(sample, 16, 3, 1);
  for (const auto& o : full.lr_origins) CHECK(o == std::pair{0, 0});
  CHECK(bitwise_equal(full.hr[2], *sample.hr_rgb));
  CHECK_THROWS_AS(extract_patches(sample, 7, 1, 0), ValidationError);
  CHECK_THROWS_AS(extract_patches(sample, 32, 1, 0), ValidationError);
  RenderingSample no_hr = sample;
  no_hr.hr_rgb.reset();
  CHECK_THROWS_AS(extract_patches(no_hr, 8, 1, 0), ValidationError);
}
