#pragma once

// Training loop, evaluation and ablation driver.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xrds/metrics.hpp"
#include "xrds/model.hpp"
#include "xrds/toyscenes.hpp"

namespace xrds {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction; state is allocated lazily per parameter.
template <typename T>
class Adam {
 public:
  Adam(ParameterSet<T>& params, const AdamConfig& config);

  /// Applies one update from the accumulated gradients.
  void step();
  long steps() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  ParameterSet<T>* params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  long step_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm);

struct TrainConfig {
  AdamConfig adam;
  int batch_size = 4;
  int epochs = 50;
  long max_steps = 0;  // 0: bounded by epochs only
  int patch = 64;      // high-resolution crop side
  int crops_per_image = 8;
  std::uint64_t seed = 0;
  std::string manifest;
  ModelConfig model = ModelConfig::desk();
  int val_every = 250;  // steps between validations; a final one always runs
  int patience = 0;     // validations without improvement before stopping; 0 disables
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  std::string init_checkpoint;  // fine-tune start point
  std::string out_dir = "run";

  /// Throws ValidationError naming the offending key.
  void validate() const;

  /// Paper-scale hyperparameters and network.
  static TrainConfig paper();
  /// CPU-scale profile.
  static TrainConfig desk();
};

struct LogRecord {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_psnr;

  std::string to_json() const;
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path log_path;
  long steps = 0;
  int epochs = 0;
  double best_val_psnr = 0.0;
  double last_val_psnr = 0.0;
  std::vector<LogRecord> log;
};

using ProgressFn = std::function<void(const LogRecord&)>;

/// Writes best.ckpt, last.ckpt and train_log.jsonl under cfg.out_dir.
/// Throws NonFiniteError with the step and batch provenance on NaN/Inf loss,
/// ConfigMismatchError when the dataset scale differs from the model's.
TrainResult train(const TrainConfig& cfg, const ProgressFn& progress = {});

/// Samples of `split`, each entry checked against `scale`. Throws ValidationError
/// for an empty split and ConfigMismatchError for a scale mismatch.
std::vector<ManifestEntry> split_entries(const Manifest& manifest, const std::string& split, int scale);

/// Whole-image evaluation against hr_rgb with a bicubic baseline per row.
MetricsReport evaluate(const XrdsModel<float>& model, const Manifest& manifest, const std::string& split,
                       const std::string& checkpoint_id = "");

MetricsReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                       const std::string& split);

struct AblationVariant {
  std::string name;
  TrainConfig train;  // train.model is the variant's network
};

struct AblationRow {
  std::string name;
  ModelConfig model;
  std::size_t parameters = 0;
  std::filesystem::path checkpoint;
  MetricsReport report;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::string render() const;
};

/// Trains and evaluates each variant in order with the first variant's seed;
/// variant i writes to <its out_dir>/<name>.
AblationTable run_ablation(const std::vector<AblationVariant>& grid, const std::string& split = "test",
                           const ProgressFn& progress = {});

}  // namespace xrds
