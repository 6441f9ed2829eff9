#pragma once

// Structured configuration. Files are YAML mappings; nesting is flattened to
// dotted keys (`loss.gamma`), and command-line overrides use the same keys
// (`loss.gamma=3`). Every key must be known; see `config_keys()`.

#include "promptseg/training.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace promptseg {

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string checkpoint;
  int session_ttl_seconds = 3600;
  std::size_t max_image_bytes = 16u << 20;  // decoded PNG payload
  int max_image_side = 4096;
  int threads = 4;
};

struct EvalConfig {
  std::string data;
  std::string split;
  std::string checkpoint;
  std::string mode = "learned";
  std::string model_tag = "model";
  std::string dataset_tag = "synthetic";
};

struct PretrainSection {
  PretrainConfig config;
  std::string out = "backbone.ckpt";
};

struct AppConfig {
  TrainConfig train;
  EvalConfig eval;
  ServeConfig serve;
  PretrainSection pretrain;
};

struct ConfigKey {
  std::string name;
  std::string description;
};

/// Every accepted key with a one-line description.
std::vector<ConfigKey> config_keys();

/// Applies one `key=value` assignment; ConfigError for unknown keys or
/// unparsable values.
void apply_override(AppConfig& config, const std::string& assignment);
void set_value(AppConfig& config, const std::string& key, const std::string& value);
/// Current value of a key rendered as YAML scalar text.
std::string get_value(const AppConfig& config, const std::string& key);

/// Parses YAML text; ConfigError on syntax errors or unknown keys.
AppConfig parse_config(const std::string& yaml_text, const AppConfig& base = {});
/// Reads a YAML file; LoadError when it cannot be read.
AppConfig load_config(const std::filesystem::path& path, const AppConfig& base = {});
/// Full effective configuration as nested YAML.
std::string dump_config(const AppConfig& config);

}  // namespace promptseg
