#include "xrds/config.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "xrds/data_io.hpp"
#include "xrds/errors.hpp"

namespace xrds {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ValidationError(key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ValidationError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Prefer the shortest representation that round-trips.
  for (int p = 1; p <= 17; ++p) {
    char tmp[32];
    std::snprintf(tmp, sizeof tmp, "%.*g", p, v);
    if (std::stod(tmp) == v) return tmp;
  }
  return buf;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"model.scale", "upscaling factor s (1, 2, 4 or 8)"},
      {"model.xdg_groups", "number of fusion groups N"},
      {"model.rdst_blocks", "dense transformer blocks per group B"},
      {"model.dense_layers", "transformer layers per block L"},
      {"model.channels", "trunk feature channels C"},
      {"model.aux_channels", "auxiliary branch channels"},
      {"model.kv_channels", "guidance key/value channels"},
      {"model.growth", "dense growth rate G"},
      {"model.window", "attention window side"},
      {"model.heads", "attention heads"},
      {"model.mlp_ratio", "MLP hidden width / channels"},
      {"model.aux_mode", "auxiliary planes seen by the model: both, albedo, normal, none"},
      {"train.lr", "Adam learning rate (constant)"},
      {"train.adam_beta1", "Adam beta1"},
      {"train.adam_beta2", "Adam beta2"},
      {"train.adam_eps", "Adam epsilon"},
      {"train.batch_size", "crops per optimizer step"},
      {"train.epochs", "passes of images x crops_per_image"},
      {"train.max_steps", "step cap, 0 for none"},
      {"train.patch", "high-resolution crop side"},
      {"train.crops_per_image", "crops drawn per image each epoch"},
      {"train.seed", "seed for initialization and sampling"},
      {"train.manifest", "dataset manifest file or directory"},
      {"train.val_every", "steps between validations"},
      {"train.patience", "validations without improvement before stopping, 0 disables"},
      {"train.grad_clip", "global gradient-norm clip, 0 disables"},
      {"train.init_checkpoint", "checkpoint to fine-tune from"},
      {"train.out_dir", "directory for checkpoints and the training log"},
  };
  return keys;
}

void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  ModelConfig& m = c.model;
  if (key == "model.scale") m.scale = parse_int<int>(key, value);
  else if (key == "model.xdg_groups") m.xdg_groups = parse_int<int>(key, value);
  else if (key == "model.rdst_blocks") m.rdst_blocks = parse_int<int>(key, value);
  else if (key == "model.dense_layers") m.dense_layers = parse_int<int>(key, value);
  else if (key == "model.channels") m.channels = parse_int<int>(key, value);
  else if (key == "model.aux_channels") m.aux_channels = parse_int<int>(key, value);
  else if (key == "model.kv_channels") m.kv_channels = parse_int<int>(key, value);
  else if (key == "model.growth") m.growth = parse_int<int>(key, value);
  else if (key == "model.window") m.window = parse_int<int>(key, value);
  else if (key == "model.heads") m.heads = parse_int<int>(key, value);
  else if (key == "model.mlp_ratio") m.mlp_ratio = parse_double(key, value);
  else if (key == "model.aux_mode") {
    try {
      m.aux_mode = parse_aux_mode(value);
    } catch (const std::exception& e) {
      throw ValidationError(key + ": " + e.what());
    }
  }
  else if (key == "train.lr") c.adam.lr = parse_double(key, value);
  else if (key == "train.adam_beta1") c.adam.beta1 = parse_double(key, value);
  else if (key == "train.adam_beta2") c.adam.beta2 = parse_double(key, value);
  else if (key == "train.adam_eps") c.adam.eps = parse_double(key, value);
  else if (key == "train.batch_size") c.batch_size = parse_int<int>(key, value);
  else if (key == "train.epochs") c.epochs = parse_int<int>(key, value);
  else if (key == "train.max_steps") c.max_steps = parse_int<long>(key, value);
  else if (key == "train.patch") c.patch = parse_int<int>(key, value);
  else if (key == "train.crops_per_image") c.crops_per_image = parse_int<int>(key, value);
  else if (key == "train.seed") c.seed = parse_int<std::uint64_t>(key, value);
  else if (key == "train.manifest") c.manifest = value;
  else if (key == "train.val_every") c.val_every = parse_int<int>(key, value);
  else if (key == "train.patience") c.patience = parse_int<int>(key, value);
  else if (key == "train.grad_clip") c.grad_clip = parse_double(key, value);
  else if (key == "train.init_checkpoint") c.init_checkpoint = value;
  else if (key == "train.out_dir") c.out_dir = value;
  else throw ValidationError("unknown config key '" + key + "'");
}

std::string config_value(const TrainConfig& c, const std::string& key) {
  const ModelConfig& m = c.model;
  if (key == "model.scale") return std::to_string(m.scale);
  if (key == "model.xdg_groups") return std::to_string(m.xdg_groups);
  if (key == "model.rdst_blocks") return std::to_string(m.rdst_blocks);
  if (key == "model.dense_layers") return std::to_string(m.dense_layers);
  if (key == "model.channels") return std::to_string(m.channels);
  if (key == "model.aux_channels") return std::to_string(m.aux_channels);
  if (key == "model.kv_channels") return std::to_string(m.kv_channels);
  if (key == "model.growth") return std::to_string(m.growth);
  if (key == "model.window") return std::to_string(m.window);
  if (key == "model.heads") return std::to_string(m.heads);
  if (key == "model.mlp_ratio") return num(m.mlp_ratio);
  if (key == "model.aux_mode") return to_string(m.aux_mode);
  if (key == "train.lr") return num(c.adam.lr);
  if (key == "train.adam_beta1") return num(c.adam.beta1);
  if (key == "train.adam_beta2") return num(c.adam.beta2);
  if (key == "train.adam_eps") return num(c.adam.eps);
  if (key == "train.batch_size") return std::to_string(c.batch_size);
  if (key == "train.epochs") return std::to_string(c.epochs);
  if (key == "train.max_steps") return std::to_string(c.max_steps);
  if (key == "train.patch") return std::to_string(c.patch);
  if (key == "train.crops_per_image") return std::to_string(c.crops_per_image);
  if (key == "train.seed") return std::to_string(c.seed);
  if (key == "train.manifest") return c.manifest;
  if (key == "train.val_every") return std::to_string(c.val_every);
  if (key == "train.patience") return std::to_string(c.patience);
  if (key == "train.grad_clip") return num(c.grad_clip);
  if (key == "train.init_checkpoint") return c.init_checkpoint;
  if (key == "train.out_dir") return c.out_dir;
  throw ValidationError("unknown config key '" + key + "'");
}

TrainConfig parse_config(std::string_view text, const std::string& origin) {
  TrainConfig cfg = TrainConfig::desk();
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  bool any_setting = false;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ValidationError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "profile") {
        if (any_setting) throw ValidationError("profile must precede other keys");
        if (value == "desk") cfg = TrainConfig::desk();
        else if (value == "paper") cfg = TrainConfig::paper();
        else throw ValidationError("profile: expected desk or paper, got '" + value + "'");
        continue;
      }
      apply_setting(cfg, key, value);
      any_setting = true;
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  TrainConfig cfg = TrainConfig::desk();
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw ValidationError("config file not found: " + path.string());
    std::string text;
    try {
      text = read_file(path);
    } catch (const std::exception& e) {
      throw ValidationError(e.what());
    }
    cfg = parse_config(text, path.string());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ValidationError("--override expects key=value, got '" + o + "'");
    apply_setting(cfg, trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)));
  }
  return cfg;
}

std::string dump_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.key + " = " + config_value(cfg, k.key) + "\n";
  return out;
}

}  // namespace xrds
