#pragma once

// Image metrics: robust loss, PSNR in sRGB, RelMSE in scene-linear space,
// the bicubic baseline and the average-spp accounting used in reports.

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "xrds/tensor.hpp"

namespace xrds {

inline constexpr double kRobustBeta = 0.1;
inline constexpr double kRelMseEps = 0.01;
/// Returned by psnr_srgb for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// mean over all entries of |d| / (beta + |d|); value in [0, 1).
double robust_loss_value(const FeatureMap& sr, const FeatureMap& hr, double beta = kRobustBeta);

/// sRGB transfer of a value clamped to [0, 1].
double linear_to_srgb(double v);
FeatureMap linear_to_srgb(const FeatureMap& x);
/// Inverse transfer for display-encoded values in [0, 1].
double srgb_to_linear(double v);

double mse(const FeatureMap& a, const FeatureMap& b);
/// MSE after converting both images to sRGB.
double mse_srgb(const FeatureMap& sr, const FeatureMap& hr);
/// 10 log10(1 / mse); +inf for mse == 0.
double psnr_from_mse(double mse);
double psnr_srgb(const FeatureMap& sr, const FeatureMap& hr);

/// mean of (max(sr, 0) - hr)^2 / (hr^2 + eps).
double relmse(const FeatureMap& sr, const FeatureMap& hr, double eps = kRelMseEps);

/// Keys cubic kernel with a = -0.5 (Catmull-Rom).
double cubic_kernel(double x);
/// Separable cubic upsampling, edge-replicated borders, half-pixel centres.
FeatureMap bicubic_upsample(const FeatureMap& lr, int scale);
/// Mean over s x s blocks.
FeatureMap box_downsample(const FeatureMap& hr, int factor);

/// spp_lr / s^2 + spp_aux.
double spp_average(int spp_lr, int spp_aux, int scale);

struct ImageScores {
  double psnr_db = 0.0;  // +inf when identical
  double relmse = 0.0;
  double mse_srgb = 0.0;
};

ImageScores score_image(const FeatureMap& sr, const FeatureMap& hr, double relmse_eps = kRelMseEps);

struct AggregateScores {
  std::optional<double> mean_psnr_db;  // empty when any image was identical to its reference
  double pooled_psnr_db = 0.0;         // PSNR of the mean sRGB MSE
  double mean_relmse = 0.0;
  bool has_identical = false;
};

/// Throws ValidationError if `scores` is empty.
AggregateScores aggregate(const std::vector<ImageScores>& scores);

/// Mean per-image PSNR; throws ValidationError if any image is identical to its reference.
double mean_psnr(const std::vector<ImageScores>& scores);

struct MetricsRow {
  std::string name;
  ImageScores model;
  ImageScores bicubic;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  AggregateScores model;
  AggregateScores bicubic;
  std::string split;
  int scale = 1;
  int spp_lr = 0;
  int spp_aux = 0;
  double spp_avg = 0.0;
  double relmse_eps = kRelMseEps;
  std::string checkpoint_id;
  std::string aux_mode;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  /// Aligned text table with per-image rows, aggregates and context.
  std::string render_table() const;
};

}  // namespace xrds
