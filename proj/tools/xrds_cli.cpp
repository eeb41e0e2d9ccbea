// xrds: dataset generation, training, evaluation and one-shot super-resolution.
//
// Exit status: 0 success, 1 runtime failure, 2 usage or validation error.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xrds/config.hpp"
#include "xrds/data_io.hpp"
#include "xrds/errors.hpp"
#include "xrds/image_io.hpp"
#include "xrds/metrics.hpp"
#include "xrds/model.hpp"
#include "xrds/toyscenes.hpp"
#include "xrds/trainer.hpp"

namespace fs = std::filesystem;
using namespace xrds;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct GenDataArgs {
  int n_scenes = 10;
  std::string out;
  int scale = 4;
  int spp_lr = 32;
  int spp_aux = 2;
  std::uint64_t seed = 0;
  int height = 64;
  int width = 64;
  int octaves = 4;
  int bumps = 24;
  bool fireflies = false;
};

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  bool print_config = false;
};

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string out;
};

struct SrArgs {
  std::string checkpoint;
  std::string lr;
  std::string albedo;
  std::string normal;
  std::string out;
  std::string lr_dims;
};

std::string temp_sibling(const fs::path& target) {
  std::random_device rd;
  std::ostringstream s;
  s << target.string() << ".tmp-" << std::hex << rd() << rd();
  return s.str();
}

int cmd_gen_data(const GenDataArgs& a) {
  if (a.n_scenes < 1) throw ValidationError("--n-scenes must be >= 1");
  if (a.scale != 1 && a.scale != 2 && a.scale != 4 && a.scale != 8) {
    throw ValidationError("--scale must be 1, 2, 4 or 8, got " + std::to_string(a.scale));
  }
  if (a.spp_lr < 1) throw ValidationError("--spp-lr must be >= 1");
  if (a.spp_aux < 1) throw ValidationError("--spp-aux must be >= 1");
  if (a.height < 8 || a.height % 8 != 0) throw ValidationError("--height must be a positive multiple of 8");
  if (a.width < 8 || a.width % 8 != 0) throw ValidationError("--width must be a positive multiple of 8");
  if (a.octaves < 0 || a.octaves > 8) throw ValidationError("--octaves must be in [0, 8]");
  if (a.bumps < 0) throw ValidationError("--bumps must be >= 0");

  fs::path out = fs::path(a.out);
  if (out.filename().empty()) out = out.parent_path();
  if (fs::exists(out) && !fs::is_empty(out) && !fs::exists(out / kManifestName)) {
    throw ValidationError("--out " + out.string() + " exists and is not a dataset; refusing to overwrite");
  }

  SceneSpec spec;
  spec.height = a.height;
  spec.width = a.width;
  spec.texture_octaves = a.octaves;
  spec.geometry_bumps = a.bumps;
  DatasetOptions opt{a.n_scenes, a.scale, a.spp_lr, a.spp_aux, a.seed, a.fireflies};

  const fs::path tmp = temp_sibling(out);
  try {
    make_dataset(spec, tmp, opt);
    if (fs::exists(out)) fs::remove_all(out);
    fs::rename(tmp, out);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
  std::cout << (out / kManifestName).string() << "\n";
  return kExitOk;
}

int cmd_train(const TrainArgs& a) {
  const TrainConfig cfg = load_config(a.config, a.overrides);
  if (a.print_config) {
    std::cout << dump_config(cfg);
    return kExitOk;
  }
  cfg.validate();
  const TrainResult r = train(cfg, [](const LogRecord& rec) {
    if (rec.val_psnr) {
      std::fprintf(stderr, "step %ld epoch %d loss %.6f val_psnr %.3f\n", rec.step, rec.epoch, rec.loss, *rec.val_psnr);
    }
  });
  std::cout << r.best_checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_eval(const EvalArgs& a) {
  if (!fs::exists(a.checkpoint)) throw ValidationError("--checkpoint not found: " + a.checkpoint);
  const MetricsReport report = evaluate(a.checkpoint, a.manifest, a.split);
  if (!a.out.empty()) write_file_atomic(a.out, report.to_json() + "\n");
  std::cout << report.render_table();
  return kExitOk;
}

bool is_png(const std::string& path) {
  const std::string ext = fs::path(path).extension().string();
  return ext == ".png" || ext == ".PNG";
}

std::string dims(int c, int h, int w) {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

FeatureMap read_raw_plane(const std::string& flag, const std::string& path, int c, int h, int w) {
  if (!fs::exists(path)) throw ValidationError(flag + " not found: " + path);
  const std::string bytes = read_file(path);
  const std::size_t expected = static_cast<std::size_t>(c) * h * w * 4;
  if (bytes.size() != expected) {
    throw ValidationError(flag + ": expected " + dims(c, h, w) + " float32 (" + std::to_string(expected) +
                          " bytes), got " + std::to_string(bytes.size()) + " bytes");
  }
  return decode_plane(bytes, {c, h, w}, flag);
}

FeatureMap read_png_plane(const std::string& flag, const std::string& path) {
  if (!fs::exists(path)) throw ValidationError(flag + " not found: " + path);
  return unit_map_from_png(read_png(path));
}

int cmd_sr(const SrArgs& a) {
  if (!fs::exists(a.checkpoint)) throw ValidationError("--checkpoint not found: " + a.checkpoint);
  CheckpointInfo info;
  const XrdsModel<float> model = load_checkpoint<float>(a.checkpoint, &info);
  const int s = model.config().scale;

  FeatureMap lr;
  if (is_png(a.lr)) {
    lr = read_png_plane("--lr", a.lr);
    for (auto& v : lr.values()) v = static_cast<float>(srgb_to_linear(v));
  } else {
    int h = 0, w = 0;
    if (a.lr_dims.empty() || std::sscanf(a.lr_dims.c_str(), "%dx%d", &h, &w) != 2 || h < 1 || w < 1) {
      throw ValidationError("--lr-dims HxW is required for raw --lr input");
    }
    lr = read_raw_plane("--lr", a.lr, 3, h, w);
  }
  const int hh = lr.height() * s, ww = lr.width() * s;

  FeatureMap albedo, normal;
  if (is_png(a.albedo)) {
    albedo = read_png_plane("--albedo", a.albedo);
  } else {
    albedo = read_raw_plane("--albedo", a.albedo, 3, hh, ww);
  }
  if (is_png(a.normal)) {
    normal = read_png_plane("--normal", a.normal);
    for (auto& v : normal.values()) v = 2.0f * v - 1.0f;
  } else {
    normal = read_raw_plane("--normal", a.normal, 3, hh, ww);
  }
  for (const auto& [flag, map] : {std::pair<const char*, const FeatureMap*>{"--albedo", &albedo}, {"--normal", &normal}}) {
    if (map->height() != hh || map->width() != ww) {
      throw ValidationError(std::string(flag) + ": expected " + dims(3, hh, ww) + " (scale " + std::to_string(s) +
                            " x lr " + dims(3, lr.height(), lr.width()) + "), got " +
                            dims(3, map->height(), map->width()));
    }
  }
  FeatureMap aux = FeatureMap::map(6, hh, ww);
  std::copy(albedo.values().begin(), albedo.values().end(), aux.values().begin());
  std::copy(normal.values().begin(), normal.values().end(), aux.values().begin() + static_cast<std::ptrdiff_t>(albedo.size()));

  const FeatureMap out = model.infer(lr, aux);
  write_file_atomic(a.out + ".f32", encode_plane(out));
  write_png(a.out + ".png", srgb_preview(out));
  std::cout << a.out << ".f32 " << dims(out.channels(), out.height(), out.width()) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Auxiliary-feature guided super-resolution for rendered images"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a procedural toy dataset and its manifest");
  gen_cmd->add_option("--n-scenes", gen.n_scenes, "Number of scenes");
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
  gen_cmd->add_option("--scale", gen.scale, "Upscaling factor (1, 2, 4, 8)");
  gen_cmd->add_option("--spp-lr", gen.spp_lr, "Samples per pixel of the low-resolution rendering");
  gen_cmd->add_option("--spp-aux", gen.spp_aux, "Samples per pixel of albedo/normal (>= 4000: noise-free)");
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed; scene i uses seed ^ i");
  gen_cmd->add_option("--height", gen.height, "High-resolution height (multiple of 8)");
  gen_cmd->add_option("--width", gen.width, "High-resolution width (multiple of 8)");
  gen_cmd->add_option("--octaves", gen.octaves, "Albedo texture octaves");
  gen_cmd->add_option("--bumps", gen.bumps, "Geometry bumps per scene");
  gen_cmd->add_flag("--fireflies", gen.fireflies, "Inject rare 10x outliers into the low-resolution image");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", tr.config, "Flat key = value config file (desk profile when omitted)");
  train_cmd->add_option("--override", tr.overrides, "key=value setting applied after the file (repeatable)");
  train_cmd->add_flag("--print-config", tr.print_config, "Print the resolved configuration and exit");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--manifest", ev.manifest, "Dataset manifest file or directory")->required();
  eval_cmd->add_option("--split", ev.split, "Split to evaluate (train, val, test)");
  eval_cmd->add_option("--out", ev.out, "JSON report path");

  SrArgs sr;
  auto* sr_cmd = app.add_subcommand("sr", "Super-resolve one rendering");
  sr_cmd->add_option("--checkpoint", sr.checkpoint, "Checkpoint file")->required();
  sr_cmd->add_option("--lr", sr.lr, "Low-resolution radiance: raw float32 3xhxw or sRGB PNG")->required();
  sr_cmd->add_option("--albedo", sr.albedo, "Albedo: raw float32 3xHxW or PNG (v/255)")->required();
  sr_cmd->add_option("--normal", sr.normal, "Normal: raw float32 3xHxW or PNG (2v/255-1)")->required();
  sr_cmd->add_option("--out", sr.out, "Output prefix; writes PREFIX.f32 and PREFIX.png")->required();
  sr_cmd->add_option("--lr-dims", sr.lr_dims, "HxW of a raw --lr plane");

  std::string keys_help = "Config keys:\n";
  const TrainConfig defaults = TrainConfig::desk();
  for (const auto& k : config_keys()) {
    keys_help += "  " + k.key + " = " + config_value(defaults, k.key) + "    " + k.help + "\n";
  }
  train_cmd->footer(keys_help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(tr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*sr_cmd) return cmd_sr(sr);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
