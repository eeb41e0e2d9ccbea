#include "xrds/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "xrds/errors.hpp"
#include "xrds/kernels.hpp"

namespace xrds {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- optimizer ------------------------------------------------------------

template <typename T>
Adam<T>::Adam(ParameterSet<T>& params, const AdamConfig& config) : params_(&params), config_(config) {
  if (!(config.lr >= 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) || !(config.beta2 >= 0.0 && config.beta2 < 1.0) ||
      !(config.eps > 0.0)) {
    throw ValidationError("adam: invalid hyperparameters");
  }
}

template <typename T>
void Adam<T>::step() {
  auto& entries = params_->entries();
  if (m_.empty()) {
    m_.resize(entries.size());
    v_.resize(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      m_[i].assign(entries[i].second.value().size(), T(0));
      v_[i].assign(entries[i].second.value().size(), T(0));
    }
  }
  ++step_;
  const kernels::AdamStep<T> s{static_cast<T>(config_.lr), static_cast<T>(config_.beta1),
                               static_cast<T>(config_.beta2), static_cast<T>(config_.eps), step_};
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var<T>& p = entries[i].second;
    const Tensor<T>& g = p.grad();
    kernels::adam_update<T>(p.mutable_value().values(), g.values(), m_[i], v_[i], s);
  }
}

template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params.entries())
    for (T g : p.grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& [name, p] : params.entries())
      for (T& g : p.mutable_grad().values()) g *= f;
  }
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double clip_grad_norm<float>(ParameterSet<float>&, double);
template double clip_grad_norm<double>(ParameterSet<double>&, double);

// ---- configuration --------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ValidationError(key + ": " + why); };
  if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) fail("train.lr", "must be finite and >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) fail("train.adam_beta1", "must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) fail("train.adam_beta2", "must be in [0, 1)");
  if (!(adam.eps > 0.0)) fail("train.adam_eps", "must be positive");
  if (batch_size < 1) fail("train.batch_size", "must be positive");
  if (epochs < 1) fail("train.epochs", "must be positive");
  if (max_steps < 0) fail("train.max_steps", "must be >= 0");
  if (crops_per_image < 1) fail("train.crops_per_image", "must be positive");
  if (val_every < 1) fail("train.val_every", "must be positive");
  if (patience < 0) fail("train.patience", "must be >= 0");
  if (!(grad_clip >= 0.0)) fail("train.grad_clip", "must be >= 0");
  if (manifest.empty()) fail("train.manifest", "is required");
  if (out_dir.empty()) fail("train.out_dir", "is required");
  model.validate();
  const int unit = model.scale * model.window;
  if (patch < 1 || patch % unit != 0) {
    fail("train.patch", std::to_string(patch) + " must be a positive multiple of scale * window = " + std::to_string(unit));
  }
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.model = ModelConfig::paper();
  c.batch_size = 16;
  c.epochs = 400;
  c.patch = 256;
  c.crops_per_image = 1;
  return c;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

std::string LogRecord::to_json() const {
  json j{{"step", step}, {"epoch", epoch}, {"loss", loss}, {"lr", lr}};
  if (val_psnr) j["val_psnr"] = *val_psnr;
  return j.dump();
}

// ---- evaluation -----------------------------------------------------------

std::vector<ManifestEntry> split_entries(const Manifest& manifest, const std::string& split, int scale) {
  auto entries = manifest.split(split);
  if (entries.empty()) throw ValidationError("split '" + split + "' has no samples in " + manifest.root.string());
  for (const auto& e : entries) {
    if (e.scale != scale) {
      throw ConfigMismatchError("dataset scale " + std::to_string(e.scale) + " (" + e.path + ") does not match model scale " +
                                std::to_string(scale));
    }
  }
  return entries;
}

namespace {

FeatureMap baseline_upsample(const FeatureMap& lr, int scale) {
  return scale == 1 ? lr : bicubic_upsample(lr, scale);
}

double selection_psnr(const AggregateScores& a) { return a.mean_psnr_db ? *a.mean_psnr_db : a.pooled_psnr_db; }

}  // namespace

MetricsReport evaluate(const XrdsModel<float>& model, const Manifest& manifest, const std::string& split,
                       const std::string& checkpoint_id) {
  const int s = model.config().scale;
  const auto entries = split_entries(manifest, split, s);
  MetricsReport report;
  report.split = split;
  report.scale = s;
  report.spp_lr = entries.front().spp_lr;
  report.spp_aux = entries.front().spp_aux;
  report.spp_avg = spp_average(report.spp_lr, report.spp_aux, s);
  report.checkpoint_id = checkpoint_id;
  report.aux_mode = to_string(model.config().aux_mode);
  std::vector<ImageScores> model_scores, bicubic_scores;
  for (const auto& e : entries) {
    const RenderingSample sample = load_sample(manifest.resolve(e));
    if (!sample.hr_rgb) throw ValidationError("sample " + e.path + " has no hr_rgb reference");
    if (sample.scale != s) {
      throw ConfigMismatchError("sample " + e.path + " has scale " + std::to_string(sample.scale) + ", model scale " +
                                std::to_string(s));
    }
    const FeatureMap sr = model.infer(sample.lr_rgb, sample.aux);
    MetricsRow row{e.path, score_image(sr, *sample.hr_rgb), score_image(baseline_upsample(sample.lr_rgb, s), *sample.hr_rgb)};
    model_scores.push_back(row.model);
    bicubic_scores.push_back(row.bicubic);
    report.rows.push_back(std::move(row));
  }
  report.model = aggregate(model_scores);
  report.bicubic = aggregate(bicubic_scores);
  return report;
}

MetricsReport evaluate(const fs::path& checkpoint, const fs::path& manifest_path, const std::string& split) {
  CheckpointInfo info;
  const XrdsModel<float> model = load_checkpoint<float>(checkpoint, &info);
  const Manifest manifest = read_manifest(manifest_path);
  return evaluate(model, manifest, split, info.id);
}

// ---- training -------------------------------------------------------------

namespace {

struct LoadedSample {
  std::string path;
  RenderingSample sample;
};

std::vector<LoadedSample> load_split(const Manifest& m, const std::string& split, int scale) {
  std::vector<LoadedSample> out;
  for (const auto& e : split_entries(m, split, scale)) {
    LoadedSample ls{e.path, load_sample(m.resolve(e))};
    if (!ls.sample.hr_rgb) throw ValidationError("training sample " + e.path + " has no hr_rgb");
    out.push_back(std::move(ls));
  }
  return out;
}

double validate_psnr(const XrdsModel<float>& model, const std::vector<LoadedSample>& val) {
  std::vector<ImageScores> scores;
  for (const auto& v : val) scores.push_back(score_image(model.infer(v.sample.lr_rgb, v.sample.aux), *v.sample.hr_rgb));
  return selection_psnr(aggregate(scores));
}

struct BatchItem {
  int image = 0;
  std::uint64_t crop_seed = 0;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const Manifest manifest = read_manifest(cfg.manifest);
  const int s = cfg.model.scale;
  const auto train_set = load_split(manifest, "train", s);
  const auto val_set = load_split(manifest, "val", s);
  for (const auto& t : train_set) {
    if (t.sample.height() < cfg.patch || t.sample.width() < cfg.patch) {
      throw ValidationError("train.patch " + std::to_string(cfg.patch) + " exceeds image " + t.path);
    }
  }

  XrdsModel<float> model(cfg.model, cfg.seed);
  if (!cfg.init_checkpoint.empty()) {
    if (load_matching_weights(model, cfg.init_checkpoint) == 0) {
      throw ConfigMismatchError("train.init_checkpoint " + cfg.init_checkpoint + " shares no tensors with the model");
    }
  }
  Adam<float> adam(model.parameters(), cfg.adam);

  const fs::path out_dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  TrainResult result;
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  result.log_path = out_dir / "train_log.jsonl";
  const fs::path partial_log = out_dir / "train_log.jsonl.partial";
  std::ofstream log(partial_log, std::ios::trunc);
  if (!log) throw IoError("cannot write " + partial_log.string());

  std::map<std::string, std::string> meta{{"seed", std::to_string(cfg.seed)}};
  auto emit = [&](const LogRecord& r) {
    log << r.to_json() << "\n";
    log.flush();
    result.log.push_back(r);
    if (progress) progress(r);
  };

  std::mt19937_64 rng(cfg.seed);
  const long per_epoch_items = static_cast<long>(train_set.size()) * cfg.crops_per_image;
  const float beta = static_cast<float>(kRobustBeta);
  bool have_best = false;
  int stale = 0;
  bool stop = false;
  long step = 0;

  for (int epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
    std::vector<BatchItem> items;
    items.reserve(static_cast<std::size_t>(per_epoch_items));
    for (int i = 0; i < static_cast<int>(train_set.size()); ++i)
      for (int c = 0; c < cfg.crops_per_image; ++c) items.push_back({i, 0});
    std::shuffle(items.begin(), items.end(), rng);
    for (auto& it : items) it.crop_seed = rng();
    result.epochs = epoch;

    for (std::size_t start = 0; start < items.size() && !stop; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const float inv = 1.0f / static_cast<float>(end - start);
      model.parameters().zero_grad();
      double loss_sum = 0.0;
      std::string provenance;
      for (std::size_t b = start; b < end; ++b) {
        const auto& src = train_set[static_cast<std::size_t>(items[b].image)];
        const PatchBatch pb = extract_patches(src.sample, cfg.patch, 1, items[b].crop_seed);
        std::ostringstream where;
        where << src.path << "@lr(" << pb.lr_origins[0].first << "," << pb.lr_origins[0].second << ") ";
        provenance += where.str();
        try {
          const Var<float> pred = model.forward(Var<float>::constant(pb.lr[0]), Var<float>::constant(pb.aux[0]));
          const Var<float> loss = robust_loss(pred, pb.hr[0], beta);
          const double value = loss.value()[0];
          if (!std::isfinite(value)) throw NonFiniteError("loss is " + std::to_string(value));
          loss_sum += value;
          backward(scale(loss, inv));
        } catch (const NonFiniteError& e) {
          throw NonFiniteError("training aborted at step " + std::to_string(step + 1) + " (epoch " + std::to_string(epoch) +
                               "): " + e.what() + "; batch: " + provenance);
        }
      }
      if (cfg.grad_clip > 0.0) clip_grad_norm(model.parameters(), cfg.grad_clip);
      adam.step();
      ++step;

      LogRecord rec{step, epoch, loss_sum * inv, cfg.adam.lr, std::nullopt};
      const bool last_step = (cfg.max_steps > 0 && step >= cfg.max_steps) ||
                             (epoch == cfg.epochs && end == items.size());
      if (step % cfg.val_every == 0 || last_step) {
        const double psnr = validate_psnr(model, val_set);
        rec.val_psnr = psnr;
        result.last_val_psnr = psnr;
        if (!have_best || psnr > result.best_val_psnr) {
          have_best = true;
          stale = 0;
          result.best_val_psnr = psnr;
          auto m = meta;
          m["step"] = std::to_string(step);
          m["val_psnr"] = std::to_string(psnr);
          save_checkpoint(model, result.best_checkpoint, m);
        } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
          stop = true;
        }
      }
      emit(rec);
      if (cfg.max_steps > 0 && step >= cfg.max_steps) stop = true;
    }
  }

  if (!result.log.back().val_psnr) {
    // Early stop always follows a validation, so this only guards odd configs.
    const double psnr = validate_psnr(model, val_set);
    result.last_val_psnr = psnr;
    if (!have_best || psnr > result.best_val_psnr) {
      result.best_val_psnr = psnr;
      save_checkpoint(model, result.best_checkpoint, meta);
    }
  }
  auto m = meta;
  m["step"] = std::to_string(step);
  m["val_psnr"] = std::to_string(result.last_val_psnr);
  save_checkpoint(model, result.last_checkpoint, m);
  result.steps = step;
  log.close();
  fs::rename(partial_log, result.log_path, ec);
  if (ec) throw IoError("cannot finalize " + result.log_path.string());
  return result;
}

// ---- ablation -------------------------------------------------------------

AblationTable run_ablation(const std::vector<AblationVariant>& grid, const std::string& split,
                           const ProgressFn& progress) {
  if (grid.empty()) throw ValidationError("ablation grid is empty");
  AblationTable table;
  const std::uint64_t seed = grid.front().train.seed;
  for (const auto& v : grid) {
    if (v.name.empty()) throw ValidationError("ablation variant without a name");
    TrainConfig cfg = v.train;
    cfg.seed = seed;
    cfg.out_dir = (fs::path(v.train.out_dir) / v.name).string();
    const TrainResult r = train(cfg, progress);
    CheckpointInfo info;
    const XrdsModel<float> model = load_checkpoint<float>(r.best_checkpoint, &info);
    AblationRow row{v.name, cfg.model, model.count_parameters(), r.best_checkpoint,
                    evaluate(model, read_manifest(cfg.manifest), split, info.id)};
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string AblationTable::render() const {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-8s %3s %3s %4s %10s %10s %10s %12s\n", "variant", "aux", "N", "B", "C",
                "params", "psnr_db", "relmse", "bicubic_db");
  out << line;
  for (const auto& r : rows) {
    const auto& a = r.report.model;
    const double psnr = a.mean_psnr_db ? *a.mean_psnr_db : a.pooled_psnr_db;
    const auto& b = r.report.bicubic;
    const double bpsnr = b.mean_psnr_db ? *b.mean_psnr_db : b.pooled_psnr_db;
    std::snprintf(line, sizeof line, "%-16s %-8s %3d %3d %4d %10zu %10.3f %10.6f %12.3f\n", r.name.c_str(),
                  to_string(r.model.aux_mode).c_str(), r.model.xdg_groups, r.model.rdst_blocks, r.model.channels,
                  r.parameters, psnr, a.mean_relmse, bpsnr);
    out << line;
  }
  return out.str();
}

}  // namespace xrds
