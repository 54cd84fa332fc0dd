#include "ecd/pipeline.hpp"

#include "ecd/ecdf.hpp"
#include "ecd/image_io.hpp"
#include "ecd/parallel.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace ecd {

using nlohmann::json;

void PipelineConfig::validate() const {
  if (stride && *stride < 1) throw std::invalid_argument("stride must be >= 1");
  if (top_k < 1) throw std::invalid_argument("top-k must be >= 1");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument(detail::concat("threshold ", threshold, " outside (0, 1)"));
  }
  // Shape-free check: every resolution divides the product of all of them.
  Index product = 1;
  for (Index n : grids) product *= std::max<Index>(n, 1);
  GridSpec{grids}.validate(product, product);
}

std::vector<Index> parse_grids(const std::string& text) {
  std::vector<Index> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v < 1) {
      throw std::invalid_argument("malformed grid list '" + text + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty grid list");
  return out;
}

std::string format_grids(const std::vector<Index>& grids) {
  std::string s;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (i) s += ";";
    s += std::to_string(grids[i]);
  }
  return s;
}

std::string query_stem(int sequence, int index) {
  return "s" + std::to_string(sequence) + "_f" + std::to_string(index);
}

namespace {

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "val";
    case Split::kAll: return "all";
  }
  return "all";
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

json provenance_json(const std::vector<PseudoView<float>>& views,
                     const std::vector<const ReferenceEntry*>& refs) {
  json out = json::array();
  for (const auto& v : views) {
    json cells = json::array();
    for (const auto& m : v.provenance) {
      const ReferenceEntry& e = *refs[m.reference];
      cells.push_back({{"row", m.cell.row},
                       {"col", m.cell.col},
                       {"sequence", e.sequence},
                       {"index", e.index},
                       {"top", m.top},
                       {"left", m.left},
                       {"similarity", m.similarity}});
    }
    out.push_back({{"grid", v.resolution}, {"cells", cells}});
  }
  return out;
}

}  // namespace

std::uint64_t config_hash(const PipelineConfig& cfg, const ModelConfig& model) {
  std::ostringstream s;
  s << "mode=" << to_string(cfg.mode) << ";k=" << cfg.effective_k()
    << ";grids=" << format_grids(cfg.grids) << ";threshold=" << fmt(cfg.threshold)
    << ";seed=" << cfg.seed << ";split=" << split_name(cfg.split)
    << ";stride=" << (cfg.stride ? *cfg.stride : 0) << ";d=" << model.feature_dim
    << ";heads=" << model.heads << ";ffn=" << model.ffn_width
    << ";up=" << model.up_factor << ";relu2=" << model.relu_after_second
    << ";norm=" << model.normalize_downstream << ";hres=" << model.head_residual
    << ";probs=" << cfg.write_probabilities;
  return fnv1a(s.str());
}

DetectReport run_detect(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  const std::pair<const char*, fs::path> inputs[] = {
      {"world", cfg.world}, {"database", cfg.db}, {"checkpoint", cfg.checkpoint}};
  for (const auto& [what, path] : inputs) {
    if (path.empty()) throw std::invalid_argument(std::string("no ") + what + " path given");
  }
  if (cfg.output.empty()) throw std::invalid_argument("no output path given");
  for (const auto& [what, path] : inputs) {
    if (!fs::exists(path)) {
      throw std::runtime_error(std::string(what) + " not found: " + path.string());
    }
  }

  const World world = load_world(cfg.world);
  EncoderConfig enc_cfg;
  const ReferenceDatabase db = load_database(cfg.db, &enc_cfg);
  if (cfg.stride && *cfg.stride != db.stride()) {
    throw std::invalid_argument(detail::concat("stride ", *cfg.stride,
                                               " does not match database stride ",
                                               db.stride(), " in ", cfg.db.string()));
  }
  const Encoder encoder(enc_cfg);
  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
  ModelConfig model = ckpt.model;
  model.mode = cfg.mode;
  model.grids.resolutions = cfg.grids;
  if (model.feature_dim != enc_cfg.feature_dim) {
    throw DimensionError(detail::concat("checkpoint feature dim ", model.feature_dim,
                                        " vs encoder ", enc_cfg.feature_dim));
  }
  const std::size_t k = cfg.effective_k();
  if (k > db.size()) {
    throw std::out_of_range(detail::concat("top-k ", k, " exceeds database size ", db.size()));
  }

  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < world.manifest.queries.size(); ++i) {
    const bool val = world.manifest.queries[i].validation;
    if ((cfg.split == Split::kTrain && val) || (cfg.split == Split::kValidation && !val)) continue;
    selected.push_back(i);
  }
  if (selected.empty()) throw std::invalid_argument("no queries in the selected split");

  fs::create_directories(cfg.output / "masks");
  if (cfg.write_probabilities) fs::create_directories(cfg.output / "probabilities");
  const bool aligns = cfg.mode == PipelineMode::kAlignerOnly || cfg.mode == PipelineMode::kFull;
  if (cfg.write_provenance && aligns) fs::create_directories(cfg.output / "provenance");

  std::vector<ConfusionCounts> counts(selected.size());
  std::vector<RetrievalQuery> rq(selected.size());
  parallel_for(selected.size(), [&](std::size_t n) {
    const std::size_t i = selected[n];
    const QueryRecord& q = world.manifest.queries[i];
    const FeatureMap<float> feats = encoder.encode(world.query_images[i]);
    const Vec<float> desc = compute_descriptor(feats);
    rq[n] = {q.pose, q.sequence, desc};
    const auto hits = retrieve_topk(desc, db, k);
    std::vector<FeatureMap<float>> refs;
    std::vector<const ReferenceEntry*> entries;
    for (const auto& h : hits) {
      entries.push_back(&db.entry(h.entry));
      refs.push_back(db.entry(h.entry).features);
    }
    ForwardState<float> st;
    auto logits = forward_logits<float>(ckpt.params, model, feats, refs, false, {}, st);
    const ChangePrediction<float> pred = predict_from_logits(std::move(logits), cfg.threshold);
    const std::string stem = query_stem(q.sequence, q.index);
    write_pgm(cfg.output / "masks" / (stem + ".pgm"), pred.mask);
    if (cfg.write_probabilities) {
      save_feature_map(cfg.output / "probabilities" / (stem + ".ecdf"), pred.probabilities);
    }
    if (cfg.write_provenance && aligns) {
      std::ofstream out(cfg.output / "provenance" / (stem + ".json"));
      out << provenance_json(st.views, entries).dump(1) << "\n";
    }
    counts[n] = accumulate(pred.mask, world.query_masks[i]);
  });

  DetectReport report;
  for (const auto& c : counts) report.counts += c;
  report.f1 = f1(report.counts);
  report.precision = precision(report.counts);
  report.recall = recall(report.counts);
  report.retrieval = retrieval_report(rq, db, 1, MatchCriteria{});
  report.stride = db.stride();
  report.hash = config_hash(cfg, model);

  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(report.hash));
  std::ostringstream row;
  row << to_string(cfg.mode) << "," << report.stride << "," << k << ","
      << format_grids(cfg.grids) << "," << fmt(cfg.threshold) << "," << split_name(cfg.split)
      << "," << selected.size() << "," << fmt(report.f1) << "," << fmt(report.precision) << ","
      << fmt(report.recall) << "," << fmt(report.retrieval.strict) << ","
      << fmt(report.retrieval.coarse) << "," << hash;
  report.csv_row = row.str();

  const fs::path csv = cfg.output / "results.csv";
  const bool fresh = !fs::exists(csv);
  std::ofstream out(csv, std::ios::app);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  if (fresh) out << kResultsHeader << "\n";
  out << report.csv_row << "\n";
  return report;
}

WorldSpec toy_world_spec() {
  WorldSpec s;
  s.canvas_width = 144;
  s.canvas_height = 400;
  s.camera_jitter = 0.5;
  s.rotation_jitter = 5.0;
  s.inserts = 14;
  s.deletes = 14;
  s.recolors = 14;
  return s;
}

EncoderConfig toy_encoder_config() {
  EncoderConfig e;
  e.patch_size = 4;
  e.feature_dim = 24;
  e.seed = 7;
  return e;
}

ModelConfig model_config_for(const EncoderConfig& encoder) {
  ModelConfig m;
  m.feature_dim = encoder.feature_dim;
  m.ffn_width = encoder.feature_dim;
  m.up_factor = encoder.patch_size;
  m.heads = encoder.feature_dim % 6 == 0 ? 6 : 1;
  m.head_residual = true;
  return m;
}

TrainConfig toy_train_config() {
  TrainConfig t;
  t.learning_rate = 1e-3;
  t.epochs = 30;
  t.warmup_epochs = 3;
  return t;
}

}  // namespace ecd
