#include "xrds/toyscenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <random>

#include "xrds/errors.hpp"
#include "xrds/metrics.hpp"

namespace xrds {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kAmbient = 0.15;
constexpr double kShininess = 24.0;
constexpr double kMaxSpecular = 0.35;

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

// Lattice value noise with cell size `cell`, values in [0, 1].
class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, int height, int width, double cell) : cell_(cell) {
    rows_ = static_cast<int>(std::ceil(height / cell)) + 2;
    cols_ = static_cast<int>(std::ceil(width / cell)) + 2;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    lattice_.resize(static_cast<std::size_t>(rows_) * cols_);
    for (auto& v : lattice_) v = u(rng);
  }

  double operator()(double y, double x) const {
    const double gy = y / cell_, gx = x / cell_;
    const int iy = static_cast<int>(gy), ix = static_cast<int>(gx);
    const double ty = fade(gy - iy), tx = fade(gx - ix);
    const double a = at(iy, ix), b = at(iy, ix + 1), c = at(iy + 1, ix), d = at(iy + 1, ix + 1);
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
  }

 private:
  double at(int r, int c) const { return lattice_[static_cast<std::size_t>(r) * cols_ + c]; }

  double cell_;
  int rows_ = 0, cols_ = 0;
  std::vector<double> lattice_;
};

// Octave sum starting at `base_cell`, halving the cell each octave; in [0, 1].
class Fbm {
 public:
  Fbm(std::uint64_t seed, int height, int width, int octaves, double base_cell) {
    double cell = base_cell, amp = 1.0;
    for (int o = 0; o < octaves; ++o) {
      layers_.emplace_back(mix(seed + static_cast<std::uint64_t>(o)), height, width, cell);
      amps_.push_back(amp);
      total_ += amp;
      cell = std::max(cell / 2.0, 1.0);
      amp *= 0.6;
    }
  }

  double operator()(double y, double x) const {
    if (layers_.empty()) return 0.5;
    double acc = 0.0;
    for (std::size_t i = 0; i < layers_.size(); ++i) acc += amps_[i] * layers_[i](y, x);
    return acc / total_;
  }

 private:
  std::vector<ValueNoise> layers_;
  std::vector<double> amps_;
  double total_ = 0.0;
};

struct Bump {
  double cy, cx, sigma, amplitude;
};

std::array<double, 3> normalize3(std::array<double, 3> v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

double dot3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

double luma(double r, double g, double b) { return 0.2126 * r + 0.7152 * g + 0.0722 * b; }

}  // namespace

void SceneSpec::validate() const {
  if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0) {
    throw ValidationError("scene resolution " + std::to_string(height) + "x" + std::to_string(width) +
                          " must be positive multiples of 8");
  }
  if (texture_octaves < 0 || texture_octaves > 8) throw ValidationError("texture_octaves must be in [0, 8]");
  if (geometry_bumps < 0) throw ValidationError("geometry_bumps must be non-negative");
  const double n = std::sqrt(dot3(light_dir, light_dir));
  if (!(n > 1e-9) || !std::isfinite(n)) throw ValidationError("light direction must be a non-zero finite vector");
  if (noise_model != "gaussian-shot") throw ValidationError("unknown noise model '" + noise_model + "'");
}

CleanRender render_clean(const SceneSpec& spec) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  const std::uint64_t s = spec.seed;

  // Palette: three colours; a sharp-edged mask picks between the first two and
  // a smooth field blends in the third.
  std::mt19937_64 prng(mix(s ^ 0x70a1e77eull));
  std::uniform_real_distribution<double> col(0.08, 0.92);
  std::array<std::array<double, 3>, 3> palette{};
  for (auto& c : palette)
    for (auto& v : c) v = col(prng);

  const Fbm mask(mix(s ^ 0x11), h, w, spec.texture_octaves, 24.0);
  const Fbm blend(mix(s ^ 0x22), h, w, spec.texture_octaves, 32.0);
  const Fbm grain(mix(s ^ 0x33), h, w, spec.texture_octaves, 8.0);
  const ValueNoise illum(mix(s ^ 0x44), h, w, 48.0);
  const ValueNoise gloss(mix(s ^ 0x55), h, w, 20.0);

  std::vector<Bump> bumps;
  {
    std::mt19937_64 rng(mix(s ^ 0x66));
    std::uniform_real_distribution<double> uy(0.0, h), ux(0.0, w), us(1.5, 8.0), ua(-1.0, 1.0);
    for (int i = 0; i < spec.geometry_bumps; ++i) {
      Bump b{uy(rng), ux(rng), us(rng), 0.0};
      b.amplitude = 0.9 * b.sigma * ua(rng);
      bumps.push_back(b);
    }
  }

  const auto light = normalize3(spec.light_dir);
  const auto half = normalize3({light[0], light[1], light[2] + 1.0});

  CleanRender out{FeatureMap::map(3, h, w), FeatureMap::map(6, h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double py = y + 0.5, px = x + 0.5;
      std::array<double, 3> albedo;
      if (spec.texture_octaves == 0) {
        albedo = palette[0];
      } else {
        const double t = smoothstep(0.47, 0.53, mask(py, px));
        const double u = blend(py, px);
        const double g = 0.75 + 0.5 * grain(py, px);
        for (int c = 0; c < 3; ++c) {
          const double base = palette[0][c] * (1.0 - t) + palette[1][c] * t;
          albedo[c] = std::clamp((base * (1.0 - 0.5 * u) + palette[2][c] * 0.5 * u) * g, 0.0, 1.0);
        }
      }

      double gy = 0.0, gx = 0.0;
      for (const Bump& b : bumps) {
        const double dy = py - b.cy, dx = px - b.cx;
        const double r2 = dy * dy + dx * dx;
        if (r2 > 25.0 * b.sigma * b.sigma) continue;
        const double e = b.amplitude * std::exp(-r2 / (2.0 * b.sigma * b.sigma)) / (b.sigma * b.sigma);
        gy -= dy * e;
        gx -= dx * e;
      }
      const auto n = normalize3({-gx, -gy, 1.0});

      const double e = 0.7 + 0.3 * illum(py, px);
      const double ks = kMaxSpecular * smoothstep(0.3, 0.7, gloss(py, px));
      const double diffuse = std::max(0.0, dot3(n, light));
      const double spec_term = ks * std::pow(std::max(0.0, dot3(n, half)), kShininess);
      for (int c = 0; c < 3; ++c) {
        out.hr_rgb.at(c, y, x) = static_cast<float>(albedo[c] * (kAmbient + (1.0 - kAmbient) * e * diffuse) + e * spec_term);
        out.aux.at(c, y, x) = static_cast<float>(albedo[c]);
        out.aux.at(3 + c, y, x) = static_cast<float>(n[c]);
      }
    }
  }
  return out;
}

FeatureMap luminance(const FeatureMap& rgb) {
  if (rgb.rank() != 3 || rgb.channels() != 3) throw ValidationError("luminance: expected 3 x H x W");
  FeatureMap out = FeatureMap::map(1, rgb.height(), rgb.width());
  for (int y = 0; y < rgb.height(); ++y)
    for (int x = 0; x < rgb.width(); ++x)
      out.at(0, y, x) = static_cast<float>(luma(rgb.at(0, y, x), rgb.at(1, y, x), rgb.at(2, y, x)));
  return out;
}

FeatureMap add_shot_noise(const FeatureMap& clean, int spp, std::uint64_t sample_seed, double k, bool fireflies) {
  if (spp < 1) throw ValidationError("spp must be >= 1, got " + std::to_string(spp));
  if (clean.rank() != 3 || clean.channels() != 3) throw ValidationError("add_shot_noise: expected 3 x H x W");
  std::mt19937_64 rng(mix(sample_seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution firefly(1e-4);
  FeatureMap out = clean;
  const double inv = 1.0 / std::sqrt(static_cast<double>(spp));
  for (int y = 0; y < clean.height(); ++y) {
    for (int x = 0; x < clean.width(); ++x) {
      const double l = luma(clean.at(0, y, x), clean.at(1, y, x), clean.at(2, y, x));
      const double sigma = k * std::sqrt(std::max(l, kNoiseFloor)) * inv;
      for (int c = 0; c < 3; ++c) {
        const double v = clean.at(c, y, x) + sigma * normal(rng);
        out.at(c, y, x) = static_cast<float>(std::max(v, 0.0));
      }
      if (fireflies && firefly(rng)) {
        for (int c = 0; c < 3; ++c) out.at(c, y, x) *= 10.0f;
      }
    }
  }
  return out;
}

FeatureMap render_noisy(const SceneSpec& spec, int spp, int divisor, std::uint64_t sample_seed, bool fireflies) {
  if (spp < 1) throw ValidationError("spp must be >= 1, got " + std::to_string(spp));
  if (divisor != 1 && divisor != 2 && divisor != 4 && divisor != 8) {
    throw ValidationError("divisor must be 1, 2, 4 or 8, got " + std::to_string(divisor));
  }
  const CleanRender clean = render_clean(spec);
  return add_shot_noise(box_downsample(clean.hr_rgb, divisor), spp, sample_seed, kNoiseK, fireflies);
}

FeatureMap add_aux_noise(const FeatureMap& clean_aux, int spp_aux, std::uint64_t sample_seed) {
  if (spp_aux < 1) throw ValidationError("spp_aux must be >= 1, got " + std::to_string(spp_aux));
  if (clean_aux.rank() != 3 || clean_aux.channels() != 6) throw ValidationError("add_aux_noise: expected 6 x H x W");
  if (spp_aux >= kGroundTruthAuxSpp) return clean_aux;
  std::mt19937_64 rng(mix(sample_seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double k = kAuxNoiseScale * kNoiseK / std::sqrt(static_cast<double>(spp_aux));
  FeatureMap out = clean_aux;
  for (int y = 0; y < clean_aux.height(); ++y) {
    for (int x = 0; x < clean_aux.width(); ++x) {
      const double l = luma(clean_aux.at(0, y, x), clean_aux.at(1, y, x), clean_aux.at(2, y, x));
      const double sa = k * std::sqrt(std::max(l, kNoiseFloor));
      for (int c = 0; c < 3; ++c) {
        out.at(c, y, x) = static_cast<float>(std::clamp(clean_aux.at(c, y, x) + sa * normal(rng), 0.0, 1.0));
      }
      for (int c = 3; c < 6; ++c) {
        out.at(c, y, x) = static_cast<float>(std::clamp(clean_aux.at(c, y, x) + k * normal(rng), -1.0, 1.0));
      }
    }
  }
  return out;
}

std::vector<ManifestEntry> Manifest::split(const std::string& name) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == name) out.push_back(e);
  return out;
}

std::string split_for_index(int index, int n_scenes) {
  const int n_train = n_scenes * 8 / 10;
  const int n_val = n_scenes / 10;
  if (index < n_train) return "train";
  if (index < n_train + n_val) return "val";
  return "test";
}

namespace {

std::string manifest_json(const Manifest& m) {
  json arr = json::array();
  for (const auto& e : m.entries) {
    arr.push_back({{"path", e.path}, {"split", e.split}, {"scale", e.scale}, {"spp_lr", e.spp_lr}, {"spp_aux", e.spp_aux}});
  }
  return arr.dump(2) + "\n";
}

}  // namespace

Manifest make_dataset(const SceneSpec& scene_template, const fs::path& out_dir, const DatasetOptions& o) {
  if (o.n_scenes < 1) throw ValidationError("n_scenes must be >= 1");
  if (o.scale != 1 && o.scale != 2 && o.scale != 4 && o.scale != 8) {
    throw ValidationError("scale must be 1, 2, 4 or 8, got " + std::to_string(o.scale));
  }
  if (o.spp_lr < 1 || o.spp_aux < 1) throw ValidationError("spp values must be >= 1");
  scene_template.validate();

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  Manifest m;
  m.root = out_dir;
  for (int i = 0; i < o.n_scenes; ++i) {
    SceneSpec spec = scene_template;
    spec.seed = o.seed ^ static_cast<std::uint64_t>(i);
    const CleanRender clean = render_clean(spec);
    RenderingSample sample;
    sample.scale = o.scale;
    sample.spp_lr = o.spp_lr;
    sample.spp_aux = o.spp_aux;
    sample.lr_rgb = add_shot_noise(box_downsample(clean.hr_rgb, o.scale), o.spp_lr, mix(spec.seed ^ 0x1a), kNoiseK,
                                   o.fireflies);
    sample.aux = add_aux_noise(clean.aux, o.spp_aux, mix(spec.seed ^ 0x2b));
    sample.hr_rgb = clean.hr_rgb;

    char name[32];
    std::snprintf(name, sizeof name, "scene_%04d", i);
    save_sample(sample, out_dir / name);
    m.entries.push_back({name, split_for_index(i, o.n_scenes), o.scale, o.spp_lr, o.spp_aux});
  }
  write_file_atomic(out_dir / kManifestName, manifest_json(m));
  return m;
}

Manifest read_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / kManifestName : path;
  if (!fs::exists(file)) throw ValidationError("manifest not found: " + file.string());
  Manifest m;
  m.root = file.parent_path();
  try {
    const json arr = json::parse(read_file(file));
    if (!arr.is_array()) throw ValidationError("manifest must be a JSON array: " + file.string());
    for (const auto& e : arr) {
      m.entries.push_back({e.at("path").get<std::string>(), e.at("split").get<std::string>(), e.at("scale").get<int>(),
                           e.at("spp_lr").get<int>(), e.at("spp_aux").get<int>()});
    }
  } catch (const json::exception& e) {
    throw ValidationError("bad manifest " + file.string() + ": " + e.what());
  }
  return m;
}

}  // namespace xrds
