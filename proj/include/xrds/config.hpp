#pragma once

// Flat configuration documents for training runs:
//
//   # comment
//   profile = desk          (optional, must come first: desk | paper)
//   model.scale = 4
//   train.lr = 1e-4
//
// Keys are the dotted names listed by config_keys(); unknown keys are errors
// and missing keys keep the profile defaults.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "xrds/trainer.hpp"

namespace xrds {

struct ConfigKey {
  std::string key;
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

/// Sets one key. Throws ValidationError for unknown keys and unparsable values.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Parses a document on top of the desk profile (or the profile it names).
/// `origin` prefixes error messages.
TrainConfig parse_config(std::string_view text, const std::string& origin = "config");

/// Reads `path` (when non-empty) and applies `overrides` ("key=value") last.
/// Throws ValidationError when the file is missing or invalid.
TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

/// Current value of every key, in config_keys() order, as a parsable document.
std::string dump_config(const TrainConfig& cfg);

/// Value of one key as text.
std::string config_value(const TrainConfig& cfg, const std::string& key);

}  // namespace xrds
