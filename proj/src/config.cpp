#include "ecd/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace ecd {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void fail(const ConfigFile& cfg, const std::string& key, const std::string& why) {
  const auto it = cfg.values.find(key);
  const int line = it == cfg.values.end() ? 0 : it->second.line;
  throw ConfigError(detail::concat(cfg.source, ":", line, ": ", key, ": ", why));
}

template <typename T>
T parse_number(const ConfigFile& cfg, const std::string& key) {
  const std::string& s = cfg.values.at(key).text;
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    fail(cfg, key, "expected a number, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const ConfigFile& cfg, const std::string& key) {
  const std::string& s = cfg.values.at(key).text;
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  fail(cfg, key, "expected true or false, got '" + s + "'");
}

template <typename Target>
using Table = std::vector<std::pair<std::string, std::function<void(const ConfigFile&, const std::string&, Target&)>>>;

template <typename T, typename Target>
auto number(T Target::*field) {
  return [field](const ConfigFile& c, const std::string& k, Target& t) {
    t.*field = parse_number<T>(c, k);
  };
}

template <typename Target>
auto boolean(bool Target::*field) {
  return [field](const ConfigFile& c, const std::string& k, Target& t) {
    t.*field = parse_bool(c, k);
  };
}

const Table<WorldSpec>& world_table() {
  static const Table<WorldSpec> t = {
      {"world.canvas_width", number(&WorldSpec::canvas_width)},
      {"world.canvas_height", number(&WorldSpec::canvas_height)},
      {"world.min_objects", number(&WorldSpec::min_objects)},
      {"world.max_objects", number(&WorldSpec::max_objects)},
      {"world.min_object_size", number(&WorldSpec::min_object_size)},
      {"world.max_object_size", number(&WorldSpec::max_object_size)},
      {"world.sequences", number(&WorldSpec::sequences)},
      {"world.frames_per_sequence", number(&WorldSpec::frames_per_sequence)},
      {"world.val_sequences", number(&WorldSpec::val_sequences)},
      {"world.pixels_per_unit", number(&WorldSpec::pixels_per_unit)},
      {"world.camera_step", number(&WorldSpec::camera_step)},
      {"world.camera_jitter", number(&WorldSpec::camera_jitter)},
      {"world.rotation_jitter", number(&WorldSpec::rotation_jitter)},
      {"world.scale_jitter", number(&WorldSpec::scale_jitter)},
      {"world.crop_size", number(&WorldSpec::crop_size)},
      {"world.inserts", number(&WorldSpec::inserts)},
      {"world.deletes", number(&WorldSpec::deletes)},
      {"world.recolors", number(&WorldSpec::recolors)},
      {"world.texture", number(&WorldSpec::texture)},
      {"world.background_cell", number(&WorldSpec::background_cell)},
      {"world.seed", number(&WorldSpec::seed)},
  };
  return t;
}

const Table<EncoderConfig>& encoder_table() {
  static const Table<EncoderConfig> t = {
      {"encoder.patch_size", number(&EncoderConfig::patch_size)},
      {"encoder.feature_dim", number(&EncoderConfig::feature_dim)},
      {"encoder.seed", number(&EncoderConfig::seed)},
  };
  return t;
}

const Table<ModelConfig>& model_table() {
  static const Table<ModelConfig> t = {
      {"model.heads", number(&ModelConfig::heads)},
      {"model.ffn_width", number(&ModelConfig::ffn_width)},
      {"model.dropout", number(&ModelConfig::dropout)},
      {"model.relu_after_second", boolean(&ModelConfig::relu_after_second)},
      {"model.normalize_downstream", boolean(&ModelConfig::normalize_downstream)},
      {"model.head_residual", boolean(&ModelConfig::head_residual)},
      {"model.passthrough_init", boolean(&ModelConfig::passthrough_init)},
  };
  return t;
}

const Table<TrainConfig>& train_table() {
  static const Table<TrainConfig> t = {
      {"train.lr", number(&TrainConfig::learning_rate)},
      {"train.batch_size", number(&TrainConfig::batch_size)},
      {"train.epochs", number(&TrainConfig::epochs)},
      {"train.warmup_epochs", number(&TrainConfig::warmup_epochs)},
      {"train.beta1", number(&TrainConfig::beta1)},
      {"train.beta2", number(&TrainConfig::beta2)},
      {"train.eps", number(&TrainConfig::adam_eps)},
      {"train.seed", number(&TrainConfig::seed)},
      {"train.threshold", number(&TrainConfig::threshold)},
      {"train.w_pos",
       [](const ConfigFile& c, const std::string& k, TrainConfig& t) {
         if (c.values.at(k).text == "auto") {
           t.w_pos.reset();
         } else {
           t.w_pos = parse_number<double>(c, k);
         }
       }},
  };
  return t;
}

Split parse_split(const ConfigFile& c, const std::string& k) {
  const std::string& s = c.values.at(k).text;
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kValidation;
  if (s == "all") return Split::kAll;
  fail(c, k, "expected train, val or all, got '" + s + "'");
}

const Table<PipelineConfig>& pipeline_table() {
  using P = PipelineConfig;
  auto path = [](std::filesystem::path P::*field) {
    return [field](const ConfigFile& c, const std::string& k, P& p) {
      p.*field = c.values.at(k).text;
    };
  };
  static const Table<P> t = {
      {"pipeline.stride",
       [](const ConfigFile& c, const std::string& k, P& p) { p.stride = parse_number<int>(c, k); }},
      {"pipeline.top_k", number(&P::top_k)},
      {"pipeline.grids",
       [](const ConfigFile& c, const std::string& k, P& p) {
         try {
           p.grids = parse_grids(c.values.at(k).text);
         } catch (const std::invalid_argument& e) {
           fail(c, k, e.what());
         }
       }},
      {"pipeline.threshold", number(&P::threshold)},
      {"pipeline.seed", number(&P::seed)},
      {"pipeline.mode",
       [](const ConfigFile& c, const std::string& k, P& p) {
         try {
           p.mode = parse_mode(c.values.at(k).text);
         } catch (const std::invalid_argument& e) {
           fail(c, k, e.what());
         }
       }},
      {"pipeline.split", [](const ConfigFile& c, const std::string& k, P& p) { p.split = parse_split(c, k); }},
      {"pipeline.world", path(&P::world)},
      {"pipeline.db", path(&P::db)},
      {"pipeline.checkpoint", path(&P::checkpoint)},
      {"pipeline.output", path(&P::output)},
      {"pipeline.write_probabilities", boolean(&P::write_probabilities)},
      {"pipeline.write_provenance", boolean(&P::write_provenance)},
  };
  return t;
}

template <typename Target>
void apply_table(const ConfigFile& cfg, const Table<Target>& table, Target& target) {
  for (const auto& [key, set] : table) {
    if (cfg.has(key)) set(cfg, key, target);
  }
}

template <typename Target>
bool in_table(const Table<Target>& table, const std::string& key) {
  for (const auto& entry : table) {
    if (entry.first == key) return true;
  }
  return false;
}

}  // namespace

ConfigFile parse_config(std::string_view text, std::string source) {
  ConfigFile cfg;
  cfg.source = std::move(source);
  std::istringstream in{std::string(text)};
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string content = trim(std::string_view(raw).substr(0, hash));
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(detail::concat(cfg.source, ":", line, ": expected key = value"));
    }
    const std::string key = trim(std::string_view(content).substr(0, eq));
    const std::string value = trim(std::string_view(content).substr(eq + 1));
    if (key.empty()) throw ConfigError(detail::concat(cfg.source, ":", line, ": empty key"));
    if (value.empty()) {
      throw ConfigError(detail::concat(cfg.source, ":", line, ": ", key, ": empty value"));
    }
    if (cfg.values.count(key)) {
      throw ConfigError(detail::concat(cfg.source, ":", line, ": duplicate key ", key,
                                       " (first on line ", cfg.values[key].line, ")"));
    }
    cfg.values[key] = {value, line};
  }
  return cfg;
}

ConfigFile read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

void apply_config(const ConfigFile& cfg, WorldSpec& world) { apply_table(cfg, world_table(), world); }
void apply_config(const ConfigFile& cfg, EncoderConfig& e) { apply_table(cfg, encoder_table(), e); }
void apply_config(const ConfigFile& cfg, ModelConfig& m) { apply_table(cfg, model_table(), m); }
void apply_config(const ConfigFile& cfg, TrainConfig& t) { apply_table(cfg, train_table(), t); }
void apply_config(const ConfigFile& cfg, PipelineConfig& p) { apply_table(cfg, pipeline_table(), p); }

void check_known_keys(const ConfigFile& cfg) {
  for (const auto& [key, value] : cfg.values) {
    if (in_table(world_table(), key) || in_table(encoder_table(), key) ||
        in_table(model_table(), key) || in_table(train_table(), key) ||
        in_table(pipeline_table(), key)) {
      continue;
    }
    throw ConfigError(detail::concat(cfg.source, ":", value.line, ": unknown key ", key));
  }
}

}  // namespace ecd
