#include "ecd/checkpoint.hpp"

#include "ecd/ecdf.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>

namespace ecd {

using nlohmann::json;

namespace {

json model_to_json(const ModelConfig& m) {
  return {{"feature_dim", m.feature_dim},
          {"heads", m.heads},
          {"ffn_width", m.ffn_width},
          {"dropout", m.dropout},
          {"up_factor", m.up_factor},
          {"relu_after_second", m.relu_after_second},
          {"normalize_downstream", m.normalize_downstream},
          {"head_residual", m.head_residual},
          {"passthrough_init", m.passthrough_init},
          {"grids", m.grids.resolutions},
          {"mode", to_string(m.mode)}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.feature_dim = j.at("feature_dim").get<Index>();
  m.heads = j.at("heads").get<Index>();
  m.ffn_width = j.at("ffn_width").get<Index>();
  m.dropout = j.at("dropout").get<double>();
  m.up_factor = j.at("up_factor").get<Index>();
  m.relu_after_second = j.at("relu_after_second").get<bool>();
  m.normalize_downstream = j.at("normalize_downstream").get<bool>();
  m.head_residual = j.value("head_residual", false);
  m.passthrough_init = j.value("passthrough_init", false);
  m.grids.resolutions = j.at("grids").get<std::vector<Index>>();
  m.mode = parse_mode(j.at("mode").get<std::string>());
  return m;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<EpochMetrics>& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,lr,train_loss,val_f1\n";
  for (const auto& e : history) {
    out << e.epoch << "," << fmt(e.lr) << "," << fmt(e.train_loss) << ","
        << fmt(e.val_f1) << "\n";
  }
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "params");
  fs::create_directories(dir / "optimizer");
  const auto blocks = param_blocks(ckpt.params);
  const bool has_opt = ckpt.optimizer.m.size() == blocks.size();
  json list = json::array();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string file = "params/" + b.name + ".ecdf";
    write_ecdf(dir / file, matrix_to_ecdf(b.map()));
    json entry = {{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}, {"file", file}};
    if (has_opt) {
      const std::string m = "optimizer/" + b.name + ".m.ecdf";
      const std::string v = "optimizer/" + b.name + ".v.ecdf";
      write_ecdf(dir / m, matrix_to_ecdf(ckpt.optimizer.m[i]));
      write_ecdf(dir / v, matrix_to_ecdf(ckpt.optimizer.v[i]));
      entry["m"] = m;
      entry["v"] = v;
    }
    list.push_back(entry);
  }
  json manifest = {{"format", "ecd-checkpoint"},
                   {"version", 1},
                   {"model", model_to_json(ckpt.model)},
                   {"blocks", list},
                   {"optimizer_step", has_opt ? ckpt.optimizer.step : 0}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
  write_metrics_csv(dir / "metrics.csv", ckpt.history);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing checkpoint manifest " + (dir / "manifest.json").string());
  const json manifest = json::parse(in);
  if (manifest.value("format", "") != "ecd-checkpoint") {
    throw std::runtime_error("not an ecd checkpoint: " + dir.string());
  }
  Checkpoint ckpt;
  ckpt.model = model_from_json(manifest.at("model"));
  ckpt.params = ModelParams<float>::zeros(ckpt.model);
  auto blocks = param_blocks(ckpt.params);
  const auto& list = manifest.at("blocks");
  if (list.size() != blocks.size()) {
    throw FormatError(detail::concat("checkpoint has ", list.size(), " blocks, model needs ",
                                     blocks.size()));
  }
  bool has_opt = true;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& e = list[i];
    auto& b = blocks[i];
    if (e.at("name").get<std::string>() != b.name) {
      throw FormatError("checkpoint block " + e.at("name").get<std::string>() +
                        " where " + b.name + " was expected");
    }
    const Mat<float> m = matrix_from_ecdf<float>(read_ecdf(dir / e.at("file").get<std::string>()));
    if (m.rows() != b.rows || m.cols() != b.cols) {
      throw FormatError(detail::concat("block ", b.name, " is ", m.rows(), "x", m.cols(),
                                       ", expected ", b.rows, "x", b.cols));
    }
    b.map() = m;
    if (e.contains("m") && e.contains("v")) {
      ckpt.optimizer.m.push_back(matrix_from_ecdf<float>(read_ecdf(dir / e.at("m").get<std::string>())));
      ckpt.optimizer.v.push_back(matrix_from_ecdf<float>(read_ecdf(dir / e.at("v").get<std::string>())));
    } else {
      has_opt = false;
    }
  }
  if (has_opt) {
    ckpt.optimizer.step = manifest.value("optimizer_step", std::uint64_t{0});
  } else {
    ckpt.optimizer = {};
  }

  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  if (csv && std::getline(csv, line)) {
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      EpochMetrics e;
      if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &e.epoch, &e.lr, &e.train_loss,
                      &e.val_f1) == 4) {
        ckpt.history.push_back(e);
      }
    }
  }
  return ckpt;
}

}  // namespace ecd
