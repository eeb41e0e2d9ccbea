#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "xrds/errors.hpp"
#include "xrds/metrics.hpp"

using namespace xrds;

TEST_CASE("robust loss of |d| = beta is exactly one half") {
  const FeatureMap sr({1, 1, 1}, 0.0f);
  const FeatureMap hr({1, 1, 1}, 0.1f);
  CHECK(robust_loss_value(sr, hr, 0.1) == 0.5);
  // Bounded by 1 for arbitrarily large errors.
  CHECK(robust_loss_value(FeatureMap({1, 1, 1}, 1e6f), hr) < 1.0);
  CHECK(robust_loss_value(hr, hr) == 0.0);
}

TEST_CASE("psnr of mse 0.01 is 20 dB") {
  CHECK(std::abs(psnr_from_mse(0.01) - 20.0) <= 1e-6);
  CHECK(std::abs(psnr_from_mse(1e-4) - 40.0) <= 1e-6);
  CHECK(std::isinf(psnr_from_mse(0.0)));
  CHECK_THROWS_AS(psnr_from_mse(-1.0), ValidationError);
}

TEST_CASE("spp average counts low-res samples per high-res pixel") {
  CHECK(spp_average(16, 1, 4) == 2.0);
  CHECK(spp_average(32, 2, 4) == 4.0);
  CHECK(spp_average(4, 1, 1) == 5.0);
  CHECK_THROWS_AS(spp_average(0, 1, 4), ValidationError);
}

TEST_CASE("sRGB transfer: continuity at the knee, clamping, inverse") {
  const double knee = 0.0031308;
  const double linear_side = 12.92 * knee;
  const double power_side = 1.055 * std::pow(knee, 1.0 / 2.4) - 0.055;
  CHECK(std::abs(linear_side - power_side) <= 1e-6);
  CHECK(std::abs(linear_to_srgb(knee) - linear_to_srgb(std::nextafter(knee, 1.0))) <= 1e-6);
  CHECK(linear_to_srgb(-0.5) == 0.0);
  CHECK(linear_to_srgb(3.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(linear_to_srgb(1.0) == doctest::Approx(1.0).epsilon(1e-15));
  double prev = -1.0;
  for (int i = 0; i <= 1000; ++i) {
    const double v = i / 1000.0;
    const double s = linear_to_srgb(v);
    CHECK(s > prev);
    prev = s;
    CHECK(srgb_to_linear(s) == doctest::Approx(v).epsilon(1e-12));
  }
}

TEST_CASE("psnr is computed after sRGB conversion") {
  const FeatureMap hr({3, 2, 2}, 0.25f);
  const FeatureMap sr({3, 2, 2}, 0.2f);
  const double d = linear_to_srgb(0.2f) - linear_to_srgb(0.25f);
  CHECK(psnr_srgb(sr, hr) == doctest::Approx(-10.0 * std::log10(d * d)).epsilon(1e-12));
  // Values above 1 saturate in display space.
  CHECK(std::isinf(psnr_srgb(FeatureMap({3, 2, 2}, 2.0f), FeatureMap({3, 2, 2}, 5.0f))));
}

TEST_CASE("relmse: reference-normalised error with negative predictions clamped") {
  const FeatureMap hr({1, 1, 2}, std::vector<float>{0.0f, 1.0f});
  const FeatureMap sr({1, 1, 2}, std::vector<float>{-3.0f, 0.5f});
  const double expected = (0.0 / 0.01 + 0.25 / (1.0 + 0.01)) / 2.0;
  CHECK(relmse(sr, hr) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(relmse(hr, hr) == 0.0);
  CHECK_THROWS_AS(relmse(sr, FeatureMap({1, 1, 3})), ValidationError);
}

TEST_CASE("identical images: +inf sentinel is flagged in aggregates") {
  const FeatureMap hr({3, 4, 4}, 0.3f);
  const ImageScores same = score_image(hr, hr);
  CHECK(std::isinf(same.psnr_db));
  CHECK(same.relmse == 0.0);
  const ImageScores other = score_image(FeatureMap({3, 4, 4}, 0.2f), hr);
  const AggregateScores a = aggregate({same, other});
  CHECK(a.has_identical);
  CHECK_FALSE(a.mean_psnr_db.has_value());
  CHECK(std::isfinite(a.pooled_psnr_db));
  CHECK(a.pooled_psnr_db == doctest::Approx(psnr_from_mse(other.mse_srgb / 2)).epsilon(1e-12));
  CHECK_THROWS_AS(mean_psnr({same, other}), ValidationError);
  const AggregateScores b = aggregate({other, other});
  REQUIRE(b.mean_psnr_db.has_value());
  CHECK(*b.mean_psnr_db == doctest::Approx(other.psnr_db));
  CHECK_THROWS_AS(aggregate({}), ValidationError);
}

TEST_CASE("cubic kernel: Catmull-Rom values and partition of unity") {
  CHECK(cubic_kernel(0.0) == 1.0);
  CHECK(cubic_kernel(1.0) == 0.0);
  CHECK(cubic_kernel(2.0) == 0.0);
  CHECK(cubic_kernel(0.5) == doctest::Approx(0.5625));
  CHECK(cubic_kernel(1.5) == doctest::Approx(-0.0625));
  CHECK(cubic_kernel(-0.5) == cubic_kernel(0.5));
  for (double t = 0.0; t < 1.0; t += 0.0625) {
    const double s = cubic_kernel(t + 1) + cubic_kernel(t) + cubic_kernel(1 - t) + cubic_kernel(2 - t);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
    // First moment: linear functions are reproduced.
    const double m = -(t + 1) * cubic_kernel(t + 1) - t * cubic_kernel(t) + (1 - t) * cubic_kernel(1 - t) +
                     (2 - t) * cubic_kernel(2 - t);
    CHECK(m == doctest::Approx(0.0).epsilon(1e-15));
  }
}

namespace {

// Direct 16-tap evaluation, independent of the separable implementation.
double bicubic_at(const FeatureMap& lr, int c, int oy, int ox, int s) {
  const double sy = (oy + 0.5) / s - 0.5, sx = (ox + 0.5) / s - 0.5;
  const int by = static_cast<int>(std::floor(sy)), bx = static_cast<int>(std::floor(sx));
  double acc = 0.0;
  for (int j = by - 1; j <= by + 2; ++j)
    for (int i = bx - 1; i <= bx + 2; ++i) {
      const int yy = std::clamp(j, 0, lr.height() - 1), xx = std::clamp(i, 0, lr.width() - 1);
      acc += cubic_kernel(sy - j) * cubic_kernel(sx - i) * lr.at(c, yy, xx);
    }
  return acc;
}

}  // namespace

TEST_CASE("bicubic upsampling matches a direct 16-tap evaluation") {
  std::mt19937_64 rng(4);
  for (int s : {2, 4, 8}) {
    const FeatureMap lr = test::random_tensor<float>({3, 5, 7}, rng, 0.0, 1.0);
    const FeatureMap up = bicubic_upsample(lr, s);
    REQUIRE(up.shape() == Shape{3, 5 * s, 7 * s});
    double worst = 0.0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < up.height(); ++y)
        for (int x = 0; x < up.width(); ++x) worst = std::max(worst, std::abs(up.at(c, y, x) - bicubic_at(lr, c, y, x, s)));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("bicubic reproduces linear ramps away from the border") {
  for (int s : {2, 4, 8}) {
    const int h = 12, w = 10;
    FeatureMap lr = FeatureMap::map(1, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) lr.at(0, y, x) = static_cast<float>(0.3 * y - 0.2 * x + 1.0);
    const FeatureMap up = bicubic_upsample(lr, s);
    for (int y = 2 * s; y < (h - 2) * s; ++y)
      for (int x = 2 * s; x < (w - 2) * s; ++x) {
        const double sy = (y + 0.5) / s - 0.5, sx = (x + 0.5) / s - 0.5;
        CHECK(up.at(0, y, x) == doctest::Approx(0.3 * sy - 0.2 * sx + 1.0).epsilon(1e-5));
      }
    const FeatureMap flat = bicubic_upsample(FeatureMap({2, 3, 3}, 0.7f), s);
    for (float v : flat.values()) CHECK(v == doctest::Approx(0.7f).epsilon(1e-6));
  }
  CHECK_THROWS_AS(bicubic_upsample(FeatureMap({3, 4, 4}), 3), ValidationError);
}

TEST_CASE("box downsample averages blocks") {
  FeatureMap x = FeatureMap::map(1, 2, 4);
  for (int i = 0; i < 8; ++i) x[static_cast<std::size_t>(i)] = static_cast<float>(i);
  const FeatureMap d = box_downsample(x, 2);
  REQUIRE(d.shape() == Shape{1, 1, 2});
  CHECK(d[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0));
  CHECK(d[1] == doctest::Approx((2 + 3 + 6 + 7) / 4.0));
  CHECK_THROWS_AS(box_downsample(x, 3), ValidationError);
}

TEST_CASE("metrics report round-trips through JSON and renders a table") {
  MetricsReport r;
  r.split = "test";
  r.scale = 4;
  r.spp_lr = 16;
  r.spp_aux = 1;
  r.spp_avg = spp_average(16, 1, 4);
  r.checkpoint_id = "deadbeef";
  r.aux_mode = "both";
  const FeatureMap hr({3, 4, 4}, 0.3f);
  r.rows.push_back({"scene_0000", score_image(FeatureMap({3, 4, 4}, 0.25f), hr), score_image(hr, hr)});
  r.rows.push_back({"scene_0001", score_image(FeatureMap({3, 4, 4}, 0.35f), hr), score_image(FeatureMap({3, 4, 4}, 0.1f), hr)});
  r.model = aggregate({r.rows[0].model, r.rows[1].model});
  r.bicubic = aggregate({r.rows[0].bicubic, r.rows[1].bicubic});
  const MetricsReport back = MetricsReport::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  CHECK(std::isinf(back.rows[0].bicubic.psnr_db));
  CHECK(back.bicubic.has_identical);
  CHECK(back.spp_avg == 2.0);
  const std::string table = r.render_table();
  CHECK(table.find("bicubic") != std::string::npos);
  CHECK(table.find("spp_avg") != std::string::npos);
  CHECK(table.find("scene_0001") != std::string::npos);
  CHECK(table.find("inf") != std::string::npos);
  CHECK_THROWS_AS(MetricsReport::from_json("{}"), ValidationError);
}
