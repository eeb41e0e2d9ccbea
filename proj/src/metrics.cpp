#include "xrds/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>

#include "xrds/errors.hpp"

namespace xrds {

using json = nlohmann::json;

namespace {

void require_same_shape(const FeatureMap& a, const FeatureMap& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
  if (a.size() == 0) throw ValidationError(std::string(what) + ": empty image");
}

}  // namespace

double robust_loss_value(const FeatureMap& sr, const FeatureMap& hr, double beta) {
  require_same_shape(sr, hr, "robust_loss");
  if (!(beta > 0.0)) throw ValidationError("robust_loss: beta must be positive");
  // Same float beta as the training loss, so |d| = beta gives exactly 1/2.
  const double b = static_cast<float>(beta);
  double acc = 0.0;
  for (std::size_t i = 0; i < sr.size(); ++i) {
    const double a = std::abs(static_cast<double>(hr[i]) - static_cast<double>(sr[i]));
    acc += a / (b + a);
  }
  return acc / static_cast<double>(sr.size());
}

double linear_to_srgb(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

double srgb_to_linear(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

FeatureMap linear_to_srgb(const FeatureMap& x) {
  FeatureMap out = x;
  for (auto& v : out.values()) v = static_cast<float>(linear_to_srgb(static_cast<double>(v)));
  return out;
}

double mse(const FeatureMap& a, const FeatureMap& b) {
  require_same_shape(a, b, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double mse_srgb(const FeatureMap& sr, const FeatureMap& hr) {
  require_same_shape(sr, hr, "psnr");
  double acc = 0.0;
  for (std::size_t i = 0; i < sr.size(); ++i) {
    const double d = linear_to_srgb(static_cast<double>(sr[i])) - linear_to_srgb(static_cast<double>(hr[i]));
    acc += d * d;
  }
  return acc / static_cast<double>(sr.size());
}

double psnr_from_mse(double m) {
  if (m < 0.0 || !std::isfinite(m)) throw ValidationError("psnr: invalid mse");
  if (m == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(1.0 / m);
}

double psnr_srgb(const FeatureMap& sr, const FeatureMap& hr) { return psnr_from_mse(mse_srgb(sr, hr)); }

double relmse(const FeatureMap& sr, const FeatureMap& hr, double eps) {
  require_same_shape(sr, hr, "relmse");
  if (!(eps > 0.0)) throw ValidationError("relmse: eps must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < sr.size(); ++i) {
    const double r = static_cast<double>(hr[i]);
    const double d = std::max(static_cast<double>(sr[i]), 0.0) - r;
    acc += d * d / (r * r + eps);
  }
  return acc / static_cast<double>(sr.size());
}

double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace {

// Upsamples along one axis of a (rows x n) strip into (rows x n*scale).
struct Taps {
  int index[4];
  double weight[4];
};

std::vector<Taps> cubic_taps(int n, int scale) {
  std::vector<Taps> taps(static_cast<std::size_t>(n) * scale);
  for (int o = 0; o < n * scale; ++o) {
    const double src = (o + 0.5) / scale - 0.5;
    const int base = static_cast<int>(std::floor(src));
    const double t = src - base;
    Taps& tp = taps[static_cast<std::size_t>(o)];
    for (int k = 0; k < 4; ++k) {
      tp.index[k] = std::clamp(base - 1 + k, 0, n - 1);
      tp.weight[k] = cubic_kernel(t - (k - 1));
    }
  }
  return taps;
}

}  // namespace

FeatureMap bicubic_upsample(const FeatureMap& lr, int scale) {
  if (scale != 2 && scale != 4 && scale != 8) {
    throw ValidationError("bicubic_upsample: scale must be 2, 4 or 8, got " + std::to_string(scale));
  }
  if (lr.rank() != 3) throw ValidationError("bicubic_upsample: expected C x H x W");
  const int c = lr.channels(), h = lr.height(), w = lr.width();
  const int ho = h * scale, wo = w * scale;
  const auto tx = cubic_taps(w, scale);
  const auto ty = cubic_taps(h, scale);
  FeatureMap out = FeatureMap::map(c, ho, wo);
  std::vector<double> rows(static_cast<std::size_t>(h) * wo);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < wo; ++x) {
        const Taps& t = tx[static_cast<std::size_t>(x)];
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += t.weight[k] * lr.at(ch, y, t.index[k]);
        rows[static_cast<std::size_t>(y) * wo + x] = acc;
      }
    for (int y = 0; y < ho; ++y) {
      const Taps& t = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < wo; ++x) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += t.weight[k] * rows[static_cast<std::size_t>(t.index[k]) * wo + x];
        out.at(ch, y, x) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

FeatureMap box_downsample(const FeatureMap& hr, int factor) {
  if (factor < 1 || hr.rank() != 3 || hr.height() % factor != 0 || hr.width() % factor != 0) {
    throw ValidationError("box_downsample: " + shape_string(hr.shape()) + " not divisible by " +
                          std::to_string(factor));
  }
  const int ho = hr.height() / factor, wo = hr.width() / factor;
  FeatureMap out = FeatureMap::map(hr.channels(), ho, wo);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int c = 0; c < hr.channels(); ++c)
    for (int y = 0; y < ho; ++y)
      for (int x = 0; x < wo; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += hr.at(c, y * factor + dy, x * factor + dx);
        out.at(c, y, x) = static_cast<float>(acc * inv);
      }
  return out;
}

double spp_average(int spp_lr, int spp_aux, int scale) {
  if (spp_lr < 1 || spp_aux < 1 || scale < 1) throw ValidationError("spp_average: inputs must be positive");
  return static_cast<double>(spp_lr) / (static_cast<double>(scale) * scale) + spp_aux;
}

ImageScores score_image(const FeatureMap& sr, const FeatureMap& hr, double relmse_eps) {
  ImageScores s;
  s.mse_srgb = mse_srgb(sr, hr);
  s.psnr_db = psnr_from_mse(s.mse_srgb);
  s.relmse = relmse(sr, hr, relmse_eps);
  return s;
}

double mean_psnr(const std::vector<ImageScores>& scores) {
  if (scores.empty()) throw ValidationError("mean_psnr: no images");
  double acc = 0.0;
  for (const auto& s : scores) {
    if (std::isinf(s.psnr_db)) throw ValidationError("mean_psnr: an image is identical to its reference");
    acc += s.psnr_db;
  }
  return acc / static_cast<double>(scores.size());
}

AggregateScores aggregate(const std::vector<ImageScores>& scores) {
  if (scores.empty()) throw ValidationError("aggregate: no images");
  AggregateScores a;
  double mse_acc = 0.0, rel_acc = 0.0;
  for (const auto& s : scores) {
    a.has_identical = a.has_identical || std::isinf(s.psnr_db);
    mse_acc += s.mse_srgb;
    rel_acc += s.relmse;
  }
  const double n = static_cast<double>(scores.size());
  if (!a.has_identical) a.mean_psnr_db = mean_psnr(scores);
  a.pooled_psnr_db = psnr_from_mse(mse_acc / n);
  a.mean_relmse = rel_acc / n;
  return a;
}

namespace {

json psnr_json(double v) { return std::isinf(v) ? json("inf") : json(v); }

double psnr_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return kPsnrIdentical;
    throw ValidationError("bad psnr value in report");
  }
  return j.get<double>();
}

json scores_json(const ImageScores& s) {
  return {{"psnr_db", psnr_json(s.psnr_db)}, {"relmse", s.relmse}, {"mse_srgb", s.mse_srgb}};
}

ImageScores scores_from_json(const json& j) {
  ImageScores s;
  s.psnr_db = psnr_from_json(j.at("psnr_db"));
  s.relmse = j.at("relmse").get<double>();
  s.mse_srgb = j.at("mse_srgb").get<double>();
  return s;
}

json aggregate_json(const AggregateScores& a) {
  return {{"mean_psnr_db", a.mean_psnr_db ? json(*a.mean_psnr_db) : json(nullptr)},
          {"pooled_psnr_db", psnr_json(a.pooled_psnr_db)},
          {"mean_relmse", a.mean_relmse},
          {"has_identical", a.has_identical}};
}

AggregateScores aggregate_from_json(const json& j) {
  AggregateScores a;
  if (!j.at("mean_psnr_db").is_null()) a.mean_psnr_db = j.at("mean_psnr_db").get<double>();
  a.pooled_psnr_db = psnr_from_json(j.at("pooled_psnr_db"));
  a.mean_relmse = j.at("mean_relmse").get<double>();
  a.has_identical = j.at("has_identical").get<bool>();
  return a;
}

std::string fmt_psnr(double v) {
  if (std::isinf(v)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string fmt(const char* f, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::string MetricsReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) rows_j.push_back({{"name", r.name}, {"model", scores_json(r.model)}, {"bicubic", scores_json(r.bicubic)}});
  const json j{{"schema_version", 1},
               {"split", split},
               {"context",
                {{"scale", scale},
                 {"spp_lr", spp_lr},
                 {"spp_aux", spp_aux},
                 {"spp_avg", spp_avg},
                 {"relmse_eps", relmse_eps},
                 {"checkpoint_id", checkpoint_id},
                 {"aux_mode", aux_mode}}},
               {"rows", rows_j},
               {"aggregate", {{"model", aggregate_json(model)}, {"bicubic", aggregate_json(bicubic)}}}};
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  MetricsReport r;
  try {
    const json j = json::parse(text);
    if (j.at("schema_version").get<int>() != 1) throw ValidationError("unsupported report schema_version");
    r.split = j.at("split").get<std::string>();
    const json& c = j.at("context");
    r.scale = c.at("scale").get<int>();
    r.spp_lr = c.at("spp_lr").get<int>();
    r.spp_aux = c.at("spp_aux").get<int>();
    r.spp_avg = c.at("spp_avg").get<double>();
    r.relmse_eps = c.at("relmse_eps").get<double>();
    r.checkpoint_id = c.at("checkpoint_id").get<std::string>();
    r.aux_mode = c.at("aux_mode").get<std::string>();
    for (const auto& row : j.at("rows")) {
      r.rows.push_back({row.at("name").get<std::string>(), scores_from_json(row.at("model")),
                        scores_from_json(row.at("bicubic"))});
    }
    r.model = aggregate_from_json(j.at("aggregate").at("model"));
    r.bicubic = aggregate_from_json(j.at("aggregate").at("bicubic"));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad metrics report: ") + e.what());
  }
  return r;
}

std::string MetricsReport::render_table() const {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-24s %12s %12s %12s %12s %9s\n", "image", "psnr_db", "relmse", "bicubic_psnr",
                "bicubic_rel", "spp_avg");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-24s %12s %12s %12s %12s %9s\n", r.name.c_str(), fmt_psnr(r.model.psnr_db).c_str(),
                  fmt("%.6f", r.model.relmse).c_str(), fmt_psnr(r.bicubic.psnr_db).c_str(),
                  fmt("%.6f", r.bicubic.relmse).c_str(), fmt("%.3f", spp_avg).c_str());
    out << line;
  }
  auto mean_str = [](const AggregateScores& a) {
    return a.mean_psnr_db ? fmt_psnr(*a.mean_psnr_db) : std::string("identical");
  };
  std::snprintf(line, sizeof line, "%-24s %12s %12s %12s %12s %9s\n", "mean", mean_str(model).c_str(),
                fmt("%.6f", model.mean_relmse).c_str(), mean_str(bicubic).c_str(),
                fmt("%.6f", bicubic.mean_relmse).c_str(), fmt("%.3f", spp_avg).c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-24s %12s %12s %12s %12s %9s\n", "pooled", fmt_psnr(model.pooled_psnr_db).c_str(),
                "", fmt_psnr(bicubic.pooled_psnr_db).c_str(), "", "");
  out << line;
  out << "split=" << split << " scale=" << scale << " spp=(" << spp_lr << " - " << spp_aux << ")"
      << " spp_avg=" << fmt("%.3f", spp_avg) << " relmse_eps=" << relmse_eps << " aux_mode=" << aux_mode
      << " checkpoint=" << checkpoint_id << "\n";
  return out.str();
}

}  // namespace xrds
