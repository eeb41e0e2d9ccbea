#include "xrds/model.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <json.hpp>
#include <sstream>

#include "xrds/data_io.hpp"
#include "xrds/errors.hpp"

namespace xrds {

using json = nlohmann::json;

std::string to_string(AuxMode mode) {
  switch (mode) {
    case AuxMode::both:
      return "both";
    case AuxMode::albedo:
      return "albedo";
    case AuxMode::normal:
      return "normal";
    case AuxMode::none:
      return "none";
  }
  return "both";
}

AuxMode parse_aux_mode(const std::string& text) {
  if (text == "both") return AuxMode::both;
  if (text == "albedo") return AuxMode::albedo;
  if (text == "normal") return AuxMode::normal;
  if (text == "none") return AuxMode::none;
  throw ValidationError("unknown aux mode '" + text + "' (expected both, albedo, normal or none)");
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ValidationError(std::string("model.") + name + " must be positive, got " + std::to_string(v));
  };
  if (scale != 1 && scale != 2 && scale != 4 && scale != 8) {
    throw ValidationError("model.scale must be one of 1, 2, 4, 8, got " + std::to_string(scale));
  }
  positive(xdg_groups, "xdg_groups");
  positive(rdst_blocks, "rdst_blocks");
  positive(dense_layers, "dense_layers");
  positive(channels, "channels");
  positive(aux_channels, "aux_channels");
  positive(kv_channels, "kv_channels");
  positive(growth, "growth");
  positive(window, "window");
  positive(heads, "heads");
  if (channels % heads != 0) {
    throw ValidationError("model.channels (" + std::to_string(channels) + ") must be divisible by model.heads (" +
                          std::to_string(heads) + ")");
  }
  if ((channels + growth) % heads != 0 || growth % heads != 0) {
    throw ValidationError("model.growth (" + std::to_string(growth) + ") must be divisible by model.heads (" +
                          std::to_string(heads) + ") so every dense layer width splits into heads");
  }
  if (!(mlp_ratio > 0.0) || !std::isfinite(mlp_ratio)) throw ValidationError("model.mlp_ratio must be positive");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.xdg_groups = 2;
  c.rdst_blocks = 2;
  c.dense_layers = 2;
  c.channels = 32;
  return c;
}

std::string ModelConfig::to_json() const {
  json j{{"scale", scale},
         {"xdg_groups", xdg_groups},
         {"rdst_blocks", rdst_blocks},
         {"dense_layers", dense_layers},
         {"channels", channels},
         {"aux_channels", aux_channels},
         {"kv_channels", kv_channels},
         {"growth", growth},
         {"window", window},
         {"heads", heads},
         {"mlp_ratio", mlp_ratio},
         {"aux_mode", xrds::to_string(aux_mode)}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.scale = j.at("scale").get<int>();
    c.xdg_groups = j.at("xdg_groups").get<int>();
    c.rdst_blocks = j.at("rdst_blocks").get<int>();
    c.dense_layers = j.at("dense_layers").get<int>();
    c.channels = j.at("channels").get<int>();
    c.aux_channels = j.at("aux_channels").get<int>();
    c.kv_channels = j.at("kv_channels").get<int>();
    c.growth = j.at("growth").get<int>();
    c.window = j.at("window").get<int>();
    c.heads = j.at("heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<double>();
    c.aux_mode = parse_aux_mode(j.value("aux_mode", std::string("both")));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b) {
  std::vector<std::string> out;
  auto cmp = [&](const char* name, auto x, auto y) {
    if (x != y) {
      std::ostringstream s;
      s << name << ": " << x << " vs " << y;
      out.push_back(s.str());
    }
  };
  cmp("scale", a.scale, b.scale);
  cmp("xdg_groups", a.xdg_groups, b.xdg_groups);
  cmp("rdst_blocks", a.rdst_blocks, b.rdst_blocks);
  cmp("dense_layers", a.dense_layers, b.dense_layers);
  cmp("channels", a.channels, b.channels);
  cmp("aux_channels", a.aux_channels, b.aux_channels);
  cmp("kv_channels", a.kv_channels, b.kv_channels);
  cmp("growth", a.growth, b.growth);
  cmp("window", a.window, b.window);
  cmp("heads", a.heads, b.heads);
  cmp("mlp_ratio", a.mlp_ratio, b.mlp_ratio);
  cmp("aux_mode", xrds::to_string(a.aux_mode), xrds::to_string(b.aux_mode));
  return out;
}

template <typename T>
Tensor<T> mask_aux(const Tensor<T>& aux, AuxMode mode) {
  Tensor<T> out = aux;
  if (mode == AuxMode::both) return out;
  const std::size_t plane = aux.plane();
  const int first = (mode == AuxMode::normal) ? 0 : 3;  // normal-only hides albedo
  const int count = (mode == AuxMode::none) ? 6 : 3;
  const int begin = (mode == AuxMode::none) ? 0 : first;
  std::fill(out.data() + begin * plane, out.data() + (begin + count) * plane, T(0));
  return out;
}

template <typename T>
XrdsModel<T>::XrdsModel(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config.validate();
  Rng rng(init_seed);
  const WindowConfig wc{config.window, config.heads, config.mlp_ratio};
  aux_ = AuxBranch<T>(params_, "aux",
                      AuxBranchConfig{6, config.aux_channels, config.xdg_groups, config.scale, config.kv_channels}, rng);
  lr_conv_ = Conv2d<T>(params_, "lr_conv", 3, config.channels, 3, Init::kaiming_uniform, rng);
  const XdgConfig xc{config.channels, config.kv_channels, config.rdst_blocks, config.dense_layers, config.growth, wc};
  for (int i = 0; i < config.xdg_groups; ++i) groups_.emplace_back(params_, "xdg." + std::to_string(i), xc, rng);
  if (config.scale == 1) {
    head_proj_ = Conv2d<T>(params_, "head.conv", config.channels, 3, 3, Init::kaiming_uniform, rng);
  } else {
    head_proj_ = Conv2d<T>(params_, "head.proj", config.channels, 3 * config.scale * config.scale, 1,
                           Init::kaiming_uniform, rng);
    head_conv_ = Conv2d<T>(params_, "head.conv", 3, 3, 3, Init::kaiming_uniform, rng);
  }
}

template <typename T>
Var<T> XrdsModel<T>::forward(const Var<T>& lr, const Var<T>& aux) const {
  const Shape& ls = lr.shape();
  const Shape& as = aux.shape();
  const int s = config_.scale;
  if (ls.size() != 3 || ls[0] != 3) throw ValidationError("model: lr must be 3 x h x w, got " + shape_string(ls));
  if (as.size() != 3 || as[0] != 6) throw ValidationError("model: aux must be 6 x H x W, got " + shape_string(as));
  if (as[1] != s * ls[1] || as[2] != s * ls[2]) {
    throw ValidationError("model: aux must be 6 x " + std::to_string(s * ls[1]) + " x " + std::to_string(s * ls[2]) +
                          " for lr " + shape_string(ls) + " at scale " + std::to_string(s) + ", got " +
                          shape_string(as));
  }

  Var<T> aux_in = aux;
  if (config_.aux_mode != AuxMode::both) {
    const AuxMode mode = config_.aux_mode;
    aux_in = make_op<T>(mask_aux(aux.value(), mode), {aux}, [aux, mode](const Tensor<T>& g) {
      const Tensor<T> masked = mask_aux(g, mode);
      T* sink = aux.grad_sink();
      for (std::size_t i = 0; i < masked.size(); ++i) sink[i] += masked[i];
    });
  }

  const std::vector<Var<T>> guidance = aux_(aux_in);
  const Var<T> shallow = lr_conv_(lr);
  Var<T> features = shallow;
  for (std::size_t i = 0; i < groups_.size(); ++i) features = groups_[i](features, guidance[i]);
  const Var<T> dense = add(features, shallow);

  Var<T> out = (s == 1) ? head_proj_(dense) : head_conv_(pixel_shuffle(head_proj_(dense), s));
  for (T v : out.value().values()) {
    if (!std::isfinite(v)) throw NonFiniteError("model: non-finite activation in output");
  }
  return out;
}

template <typename T>
Tensor<T> XrdsModel<T>::infer(const Tensor<T>& lr, const Tensor<T>& aux) const {
  NoGradGuard guard;
  return forward(Var<T>::constant(lr), Var<T>::constant(aux)).value();
}

// ---- checkpoint container -------------------------------------------------

namespace {

constexpr char kMagic[8] = {'X', 'R', 'D', 'S', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    std::string_view v = data_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IoError("checkpoint integrity error: unexpected end of data");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string crc_hex(std::uint32_t crc) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return buf;
}

struct ParsedCheckpoint {
  CheckpointInfo info;
  std::vector<std::pair<std::string, Tensor<float>>> blobs;
};

ParsedCheckpoint parse_checkpoint(const std::filesystem::path& path, bool with_blobs) {
  const std::string data = read_file(path);
  if (data.size() < sizeof kMagic + 8 || std::memcmp(data.data(), kMagic, sizeof kMagic) != 0) {
    throw IoError("checkpoint integrity error: " + path.string() + " is not an xrds checkpoint");
  }
  const std::string_view body(data.data(), data.size() - 4);
  Reader tail(std::string_view(data).substr(data.size() - 4));
  const std::uint32_t stored_crc = tail.u32();
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
  if (crc != stored_crc) throw IoError("checkpoint integrity error: CRC mismatch in " + path.string());

  Reader r(body.substr(sizeof kMagic));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw ConfigMismatchError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
  }
  ParsedCheckpoint out;
  const std::string header(r.bytes(r.u32()));
  try {
    const json j = json::parse(header);
    out.info.config = ModelConfig::from_json(j.at("model").dump());
    const json metadata = j.value("metadata", json::object());
    for (const auto& [k, v] : metadata.items()) out.info.metadata[k] = v.get<std::string>();
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint integrity error: bad header: ") + e.what());
  }
  out.info.id = crc_hex(crc);
  if (!with_blobs) return out;

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.bytes(r.u32()));
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
    const std::size_t n = shape_numel(shape);
    const std::string_view raw = r.bytes(n * 4);
    std::vector<float> values(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[k * 4 + b])) << (8 * b);
      values[k] = std::bit_cast<float>(bits);
    }
    out.blobs.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw IoError("checkpoint integrity error: trailing bytes in " + path.string());
  return out;
}

}  // namespace

template <typename T>
void save_checkpoint(const XrdsModel<T>& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& metadata) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  json header{{"model", json::parse(model.config().to_json())}, {"metadata", metadata}};
  const std::string h = header.dump();
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  const auto& entries = model.parameters().entries();
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, var] : entries) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const Shape& shape = var.shape();
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : var.value().values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  put_u32(out, static_cast<std::uint32_t>(
                   crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size()))));
  write_file_atomic(path, out);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) { return parse_checkpoint(path, false).info; }

template <typename T>
XrdsModel<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
  ParsedCheckpoint parsed = parse_checkpoint(path, true);
  XrdsModel<T> model(parsed.info.config);
  auto& entries = model.parameters().entries();
  if (entries.size() != parsed.blobs.size()) {
    throw IoError("checkpoint integrity error: " + std::to_string(parsed.blobs.size()) + " tensors stored, model has " +
                  std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, var] = entries[i];
    const auto& [stored_name, blob] = parsed.blobs[i];
    if (stored_name != name || blob.shape() != var.shape()) {
      throw IoError("checkpoint integrity error: tensor '" + stored_name + "' " + shape_string(blob.shape()) +
                    " does not match model tensor '" + name + "' " + shape_string(var.shape()));
    }
    var.mutable_value() = blob.template cast<T>();
  }
  if (info) *info = parsed.info;
  return model;
}

template <typename T>
XrdsModel<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected, CheckpointInfo* info) {
  const CheckpointInfo header = read_checkpoint_info(path);
  ModelConfig stored = header.config;
  stored.aux_mode = expected.aux_mode;
  const auto diffs = config_differences(stored, expected);
  if (!diffs.empty()) {
    std::string msg = "checkpoint config mismatch (stored vs requested):";
    for (const auto& d : diffs) msg += " " + d + ";";
    throw ConfigMismatchError(msg);
  }
  return load_checkpoint<T>(path, info);
}

template <typename T>
std::size_t load_matching_weights(XrdsModel<T>& model, const std::filesystem::path& path) {
  ParsedCheckpoint parsed = parse_checkpoint(path, true);
  std::size_t copied = 0;
  for (auto& [name, var] : model.parameters().entries()) {
    for (const auto& [stored_name, blob] : parsed.blobs) {
      if (stored_name == name && blob.shape() == var.shape()) {
        var.mutable_value() = blob.template cast<T>();
        ++copied;
        break;
      }
    }
  }
  return copied;
}

template class XrdsModel<float>;
template class XrdsModel<double>;
template Tensor<float> mask_aux<float>(const Tensor<float>&, AuxMode);
template Tensor<double> mask_aux<double>(const Tensor<double>&, AuxMode);
template void save_checkpoint<float>(const XrdsModel<float>&, const std::filesystem::path&,
                                     const std::map<std::string, std::string>&);
template void save_checkpoint<double>(const XrdsModel<double>&, const std::filesystem::path&,
                                      const std::map<std::string, std::string>&);
template XrdsModel<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointInfo*);
template XrdsModel<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointInfo*);
template XrdsModel<float> load_checkpoint<float>(const std::filesystem::path&, const ModelConfig&, CheckpointInfo*);
template XrdsModel<double> load_checkpoint<double>(const std::filesystem::path&, const ModelConfig&, CheckpointInfo*);
template std::size_t load_matching_weights<float>(XrdsModel<float>&, const std::filesystem::path&);
template std::size_t load_matching_weights<double>(XrdsModel<double>&, const std::filesystem::path&);

}  // namespace xrds
