#include "xrds/data_io.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "xrds/errors.hpp"

namespace xrds {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::vector<std::string> kRgbNames{"r", "g", "b"};
const std::vector<std::string> kAuxNames{"albedo_r", "albedo_g", "albedo_b", "normal_x", "normal_y", "normal_z"};

std::string unique_suffix() {
  static std::random_device rd;
  std::ostringstream s;
  s << ".tmp-" << std::hex << rd() << rd();
  return s.str();
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return s.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = path.string() + unique_suffix();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed: " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

std::string encode_plane(const FeatureMap& map) {
  std::string out(map.size() * 4, '\0');
  for (std::size_t i = 0; i < map.size(); ++i) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(map[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  return out;
}

FeatureMap decode_plane(std::string_view bytes, const Shape& shape, const std::string& name) {
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != n * 4) {
    throw IoError("plane '" + name + "' size mismatch: expected " + std::to_string(n * 4) + " bytes for " +
                  shape_string(shape) + ", found " + std::to_string(bytes.size()));
  }
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  FeatureMap map(shape, std::move(values));
  check_finite(map, name);
  return map;
}

void check_finite(const FeatureMap& map, const std::string& name) {
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (!std::isfinite(map[i])) {
      throw NonFiniteError("plane '" + name + "' contains a non-finite value at index " + std::to_string(i));
    }
  }
}

void validate_sample(const RenderingSample& s) {
  if (s.scale != 1 && s.scale != 2 && s.scale != 4 && s.scale != 8) {
    throw ValidationError("sample scale must be 1, 2, 4 or 8, got " + std::to_string(s.scale));
  }
  if (s.spp_lr < 1 || s.spp_aux < 1) throw ValidationError("sample spp values must be positive");
  if (s.lr_rgb.rank() != 3 || s.lr_rgb.channels() != 3) {
    throw ValidationError("lr_rgb must be 3 x h x w, got " + shape_string(s.lr_rgb.shape()));
  }
  if (s.aux.rank() != 3 || s.aux.channels() != 6) {
    throw ValidationError("aux must be 6 x H x W, got " + shape_string(s.aux.shape()));
  }
  if (s.aux.height() != s.scale * s.lr_rgb.height() || s.aux.width() != s.scale * s.lr_rgb.width()) {
    throw ValidationError("aux dims " + shape_string(s.aux.shape()) + " are not scale " + std::to_string(s.scale) +
                          " x lr dims " + shape_string(s.lr_rgb.shape()));
  }
  if (s.hr_rgb) {
    if (s.hr_rgb->rank() != 3 || s.hr_rgb->channels() != 3 || s.hr_rgb->height() != s.aux.height() ||
        s.hr_rgb->width() != s.aux.width()) {
      throw ValidationError("hr_rgb dims " + shape_string(s.hr_rgb->shape()) + " differ from aux dims " +
                            shape_string(s.aux.shape()));
    }
    check_finite(*s.hr_rgb, "hr_rgb");
  }
  check_finite(s.lr_rgb, "lr_rgb");
  check_finite(s.aux, "aux");
  const std::size_t plane = s.aux.plane();
  for (std::size_t i = 0; i < 3 * plane; ++i) {
    if (s.aux[i] < 0.0f || s.aux[i] > 1.0f) throw ValidationError("aux albedo value outside [0, 1]");
  }
  for (std::size_t i = 3 * plane; i < 6 * plane; ++i) {
    if (s.aux[i] < -1.0f || s.aux[i] > 1.0f) throw ValidationError("aux normal value outside [-1, 1]");
  }
}

void save_sample(const RenderingSample& sample, const fs::path& dir) {
  validate_sample(sample);
  json channels{{"lr_rgb", kRgbNames}, {"aux", kAuxNames}};
  if (sample.hr_rgb) channels["hr_rgb"] = kRgbNames;
  const json meta{{"schema_version", kSampleSchemaVersion},
                  {"height", sample.height()},
                  {"width", sample.width()},
                  {"scale", sample.scale},
                  {"spp_lr", sample.spp_lr},
                  {"spp_aux", sample.spp_aux},
                  {"channels", channels}};

  fs::path target = dir;
  if (target.filename().empty()) target = target.parent_path();
  const fs::path tmp = target.string() + unique_suffix();
  std::error_code ec;
  fs::create_directories(tmp, ec);
  if (ec) throw IoError("cannot create " + tmp.string() + ": " + ec.message());
  try {
    write_file_atomic(tmp / "lr_rgb.f32", encode_plane(sample.lr_rgb));
    write_file_atomic(tmp / "aux.f32", encode_plane(sample.aux));
    if (sample.hr_rgb) write_file_atomic(tmp / "hr_rgb.f32", encode_plane(*sample.hr_rgb));
    write_file_atomic(tmp / "meta.json", meta.dump(2) + "\n");
    if (fs::exists(target)) fs::remove_all(target);
    fs::rename(tmp, target);
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
}

RenderingSample load_sample(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(read_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw IoError("bad meta.json in " + dir.string() + ": " + e.what());
  }
  RenderingSample s;
  int h = 0, w = 0;
  bool has_hr = false;
  try {
    const int version = meta.at("schema_version").get<int>();
    if (version != kSampleSchemaVersion) {
      throw IoError("unsupported sample schema_version " + std::to_string(version) + " in " + dir.string());
    }
    h = meta.at("height").get<int>();
    w = meta.at("width").get<int>();
    s.scale = meta.at("scale").get<int>();
    s.spp_lr = meta.at("spp_lr").get<int>();
    s.spp_aux = meta.at("spp_aux").get<int>();
    has_hr = meta.at("channels").contains("hr_rgb");
  } catch (const json::exception& e) {
    throw IoError("bad meta.json in " + dir.string() + ": " + e.what());
  }
  if (s.scale < 1 || h < 1 || w < 1 || h % s.scale != 0 || w % s.scale != 0) {
    throw IoError("meta.json in " + dir.string() + " has inconsistent dims");
  }
  auto plane = [&](const char* name, Shape shape) {
    const fs::path path = dir / (std::string(name) + ".f32");
    if (!fs::exists(path)) throw IoError("missing plane file " + path.string());
    return decode_plane(read_file(path), shape, name);
  };
  s.lr_rgb = plane("lr_rgb", {3, h / s.scale, w / s.scale});
  s.aux = plane("aux", {6, h, w});
  if (has_hr) s.hr_rgb = plane("hr_rgb", {3, h, w});
  validate_sample(s);
  return s;
}

FeatureMap crop(const FeatureMap& map, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || y0 + h > map.height() || x0 + w > map.width()) {
    throw ValidationError("crop window outside " + shape_string(map.shape()));
  }
  FeatureMap out = FeatureMap::map(map.channels(), h, w);
  for (int c = 0; c < map.channels(); ++c)
    for (int y = 0; y < h; ++y) {
      const float* src = &map.at(c, y0 + y, x0);
      std::copy(src, src + w, &out.at(c, y, 0));
    }
  return out;
}

PatchBatch extract_patches(const RenderingSample& sample, int patch, int count, std::uint64_t seed) {
  const int s = sample.scale;
  if (patch < 1 || patch % s != 0) {
    throw ValidationError("patch size " + std::to_string(patch) + " is not divisible by scale " + std::to_string(s));
  }
  if (count < 1) throw ValidationError("patch count must be positive");
  if (!sample.hr_rgb) throw ValidationError("extract_patches needs hr_rgb");
  if (sample.height() < patch || sample.width() < patch) {
    throw ValidationError("image " + std::to_string(sample.height()) + "x" + std::to_string(sample.width()) +
                          " is smaller than patch " + std::to_string(patch));
  }
  const int lp = patch / s;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> oy(0, sample.lr_rgb.height() - lp);
  std::uniform_int_distribution<int> ox(0, sample.lr_rgb.width() - lp);
  PatchBatch batch;
  batch.patch = patch;
  batch.scale = s;
  for (int i = 0; i < count; ++i) {
    const int y = oy(rng);
    const int x = ox(rng);
    batch.lr_origins.emplace_back(y, x);
    batch.lr.push_back(crop(sample.lr_rgb, y, x, lp, lp));
    batch.aux.push_back(crop(sample.aux, s * y, s * x, patch, patch));
    batch.hr.push_back(crop(*sample.hr_rgb, s * y, s * x, patch, patch));
  }
  return batch;
}

}  // namespace xrds
