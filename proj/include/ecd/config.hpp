// key = value configuration files.
//
//   # comment
//   world.seed = 42
//   encoder.patch_size = 4
//   train.lr = 0.001
//   pipeline.grids = 1,2,4
//
// Keys are grouped by prefix: world., encoder., model., train., pipeline.
// Unknown keys, duplicate keys and malformed values are errors that name
// the file and line.
#pragma once

#include "ecd/pipeline.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ecd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigValue {
  std::string text;
  int line = 0;
};

struct ConfigFile {
  std::string source = "<string>";
  std::map<std::string, ConfigValue> values;

  bool has(const std::string& key) const { return values.count(key) != 0; }
};

ConfigFile parse_config(std::string_view text, std::string source = "<string>");
ConfigFile read_config(const std::filesystem::path& path);

// Each overwrites only the fields present in the file.
void apply_config(const ConfigFile& cfg, WorldSpec& world);
void apply_config(const ConfigFile& cfg, EncoderConfig& encoder);
void apply_config(const ConfigFile& cfg, ModelConfig& model);
void apply_config(const ConfigFile& cfg, TrainConfig& train);
void apply_config(const ConfigFile& cfg, PipelineConfig& pipeline);

// Throws on any key no section recognises.
void check_known_keys(const ConfigFile& cfg);

}  // namespace ecd
