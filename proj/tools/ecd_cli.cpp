// ecd: command-line front end.
//
//   ecd gen       --out world/ [--seed N] [--aligned]
//   ecd build-db  --world world/ --out db/ --stride 5
//   ecd retrieve  --world world/ --db db/ --query s3_f7 --top-k 3
//   ecd align     --world world/ --db db/ --query s3_f7 [--checkpoint ckpt/]
//   ecd train     --world world/ --db db/ --out ckpt/ [--epochs 30]
//   ecd detect    --world world/ --db db/ --checkpoint ckpt/ --out run/
//   ecd eval      --world world/ --pred run/masks
//
// Every subcommand accepts --config <file> (key = value, see config.hpp);
// flags given on the command line win over the file. Failures print one
// line "error: <kind>: <message>" on stderr and exit nonzero.
#include "ecd/config.hpp"
#include "ecd/image_io.hpp"
#include "ecd/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace ecd;

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> stride;
  std::optional<std::size_t> top_k;
  std::string grids;
  std::optional<double> threshold;
  std::string mode;
  std::string split;
  std::string world;
  std::string db;
  std::string checkpoint;
  std::string out;
  std::string query;
  std::string pred;
  std::optional<int> epochs;
  std::optional<double> lr;
  bool aligned = false;
  bool probabilities = false;
};

ConfigFile load_config(const Args& a) {
  if (a.config.empty()) return {};
  ConfigFile cfg = read_config(a.config);
  check_known_keys(cfg);
  return cfg;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kValidation;
  if (s == "all") return Split::kAll;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, val or all)");
}

PipelineConfig pipeline_config(const Args& a, const ConfigFile& file) {
  PipelineConfig p;
  apply_config(file, p);
  if (a.seed) p.seed = *a.seed;
  if (a.stride) p.stride = *a.stride;
  if (a.top_k) p.top_k = *a.top_k;
  if (!a.grids.empty()) p.grids = parse_grids(a.grids);
  if (a.threshold) p.threshold = *a.threshold;
  if (!a.mode.empty()) p.mode = parse_mode(a.mode);
  if (!a.split.empty()) p.split = parse_split(a.split);
  if (!a.world.empty()) p.world = a.world;
  if (!a.db.empty()) p.db = a.db;
  if (!a.checkpoint.empty()) p.checkpoint = a.checkpoint;
  if (!a.out.empty()) p.output = a.out;
  if (a.probabilities) p.write_probabilities = true;
  return p;
}

void require(const fs::path& p, const char* what) {
  if (p.empty()) throw std::invalid_argument(std::string("missing --") + what);
}

std::size_t find_query(const World& w, const std::string& stem) {
  for (std::size_t i = 0; i < w.manifest.queries.size(); ++i) {
    const auto& q = w.manifest.queries[i];
    if (query_stem(q.sequence, q.index) == stem) return i;
  }
  throw std::invalid_argument("no query named " + stem + " in the world");
}

int cmd_gen(const Args& a) {
  const ConfigFile file = load_config(a);
  WorldSpec spec = toy_world_spec();
  if (a.aligned) {
    spec.camera_jitter = 0;
    spec.rotation_jitter = 0;
    spec.scale_jitter = 0;
  }
  apply_config(file, spec);
  if (a.seed) spec.seed = *a.seed;
  require(a.out, "out");
  const World world = generate_world(spec);
  write_world(a.out, world);
  std::printf("world %s: %zu references, %zu queries, hash %016llx\n", a.out.c_str(),
              world.manifest.references.size(), world.manifest.queries.size(),
              static_cast<unsigned long long>(world_hash(world)));
  return 0;
}

int cmd_build_db(const Args& a) {
  const ConfigFile file = load_config(a);
  PipelineConfig p = pipeline_config(a, file);
  EncoderConfig enc = toy_encoder_config();
  apply_config(file, enc);
  require(p.world, "world");
  require(a.out, "out");
  const int stride = p.stride.value_or(1);
  const World world = load_world(p.world);
  const Encoder encoder(enc);
  const ReferenceDatabase db = build_database(source_sequences(world, encoder), stride);
  save_database(a.out, db, enc);
  std::printf("database %s: stride %d, %zu entries\n", a.out.c_str(), stride, db.size());
  return 0;
}

int cmd_retrieve(const Args& a) {
  const ConfigFile file = load_config(a);
  const PipelineConfig p = pipeline_config(a, file);
  require(p.world, "world");
  require(p.db, "db");
  if (a.query.empty()) throw std::invalid_argument("missing --query");
  EncoderConfig enc;
  const ReferenceDatabase db = load_database(p.db, &enc);
  const World world = load_world(p.world);
  const std::size_t qi = find_query(world, a.query);
  const Encoder encoder(enc);
  const auto& q = world.manifest.queries[qi];
  const auto hits = retrieve_topk(compute_descriptor(encoder.encode(world.query_images[qi])),
                                  db, p.top_k);
  std::printf("rank,sequence,index,similarity,match\n");
  for (std::size_t r = 0; r < hits.size(); ++r) {
    const auto& e = db.entry(hits[r].entry);
    std::printf("%zu,%d,%d,%.6f,%s\n", r + 1, e.sequence, e.index, hits[r].similarity,
                to_string(classify_match(q.pose, q.sequence, e, MatchCriteria{})));
  }
  return 0;
}

int cmd_align(const Args& a) {
  const ConfigFile file = load_config(a);
  const PipelineConfig p = pipeline_config(a, file);
  require(p.world, "world");
  require(p.db, "db");
  if (a.query.empty()) throw std::invalid_argument("missing --query");
  EncoderConfig enc;
  const ReferenceDatabase db = load_database(p.db, &enc);
  const World world = load_world(p.world);
  const std::size_t qi = find_query(world, a.query);
  const Encoder encoder(enc);
  const FeatureMap<float> raw = encoder.encode(world.query_images[qi]);
  const auto hits = retrieve_topk(compute_descriptor(raw), db, p.top_k);

  // Match on projected features when a checkpoint is given, otherwise on the
  // normalized encoder features.
  std::optional<Checkpoint> ckpt;
  if (!p.checkpoint.empty()) ckpt = load_checkpoint(p.checkpoint);
  auto prepare = [&](const FeatureMap<float>& f) {
    return ckpt ? project(f, ckpt->params.projection) : l2_normalize_channels(f);
  };
  const FeatureMap<float> query = prepare(raw);
  std::vector<FeatureMap<float>> refs;
  for (const auto& h : hits) refs.push_back(prepare(db.entry(h.entry).features));
  GridSpec grids{p.grids};
  grids.validate(query.height(), query.width());
  const auto views = build_multiscale(query, refs, grids);

  nlohmann::json out;
  out["query"] = a.query;
  for (const auto& h : hits) {
    out["references"].push_back({{"sequence", db.entry(h.entry).sequence},
                                 {"index", db.entry(h.entry).index},
                                 {"similarity", h.similarity}});
  }
  for (const auto& v : views) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& m : v.provenance) {
      cells.push_back({{"row", m.cell.row}, {"col", m.cell.col}, {"reference", m.reference},
                       {"top", m.top}, {"left", m.left}, {"similarity", m.similarity}});
    }
    out["views"].push_back({{"grid", v.resolution}, {"cells", cells}});
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_train(const Args& a) {
  const ConfigFile file = load_config(a);
  const PipelineConfig p = pipeline_config(a, file);
  TrainConfig tc = toy_train_config();
  apply_config(file, tc);
  if (a.seed) tc.seed = *a.seed;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.lr) tc.learning_rate = *a.lr;
  require(p.world, "world");
  require(p.db, "db");
  require(a.out, "out");
  if (tc.warmup_epochs >= tc.epochs) tc.warmup_epochs = tc.epochs / 10;

  EncoderConfig enc;
  const ReferenceDatabase db = load_database(p.db, &enc);
  ModelConfig model = model_config_for(enc);
  apply_config(file, model);
  model.mode = p.mode;
  model.grids.resolutions = p.grids;
  const World world = load_world(p.world);
  const Encoder encoder(enc);
  const std::size_t k = p.effective_k();
  const auto train_set = build_samples(world, encoder, db, k, Split::kTrain);
  const auto val_set = build_samples(world, encoder, db, k, Split::kValidation);
  const TrainResult r = train(train_set, val_set, model, tc);
  save_checkpoint(a.out, {model, r.params, r.optimizer, r.history});
  std::printf("trained %d epochs (%llu steps): val F1 %.4f -> best %.4f at epoch %d\n",
              tc.epochs, static_cast<unsigned long long>(r.steps), r.history.front().val_f1,
              r.best_val_f1, r.best_epoch);
  return 0;
}

int cmd_detect(const Args& a) {
  const ConfigFile file = load_config(a);
  const PipelineConfig p = pipeline_config(a, file);
  const DetectReport r = run_detect(p);
  std::printf("%s\n%s\n", kResultsHeader, r.csv_row.c_str());
  return 0;
}

int cmd_eval(const Args& a) {
  const ConfigFile file = load_config(a);
  const PipelineConfig p = pipeline_config(a, file);
  require(p.world, "world");
  require(a.pred, "pred");
  const World world = load_world(p.world);
  ConfusionCounts total;
  std::size_t n = 0;
  for (std::size_t i = 0; i < world.manifest.queries.size(); ++i) {
    const auto& q = world.manifest.queries[i];
    if ((p.split == Split::kTrain && q.validation) ||
        (p.split == Split::kValidation && !q.validation)) {
      continue;
    }
    const fs::path mask = fs::path(a.pred) / (query_stem(q.sequence, q.index) + ".pgm");
    if (!fs::exists(mask)) throw std::runtime_error("missing prediction " + mask.string());
    total = accumulate(read_pgm(mask), world.query_masks[i], total);
    ++n;
  }
  std::printf("queries,f1,precision,recall\n%zu,%.6f,%.6f,%.6f\n", n, f1(total),
              precision(total), recall(total));
  return 0;
}

void fail_line(const char* kind, const std::string& message) {
  std::string flat = message;
  for (char& c : flat) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::fprintf(stderr, "error: %s: %s\n", kind, flat.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Environmental change detection against an unpaired reference database"};
  app.require_subcommand(1);
  Args a;

  auto common = [&a](CLI::App* sub) {
    sub->add_option("--config", a.config, "key = value config file");
    sub->add_option("--seed", a.seed, "random seed");
    sub->add_option("--world", a.world, "world directory");
    sub->add_option("--db", a.db, "reference database directory");
    sub->add_option("--split", a.split, "train, val or all");
  };
  auto pipeline = [&a](CLI::App* sub) {
    sub->add_option("--stride", a.stride, "database stride")->check(CLI::PositiveNumber);
    sub->add_option("--top-k", a.top_k, "references retrieved per query (default 3)");
    sub->add_option("--grids", a.grids, "aligner grid list, e.g. 1,2,4");
    sub->add_option("--threshold", a.threshold, "change probability threshold");
    sub->add_option("--mode", a.mode, "baseline, aligner-only, aggregator-only or full");
    sub->add_option("--checkpoint", a.checkpoint, "checkpoint directory");
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic world");
  common(gen);
  gen->add_option("--out", a.out, "output directory")->required();
  gen->add_flag("--aligned", a.aligned, "queries reuse the reference poses exactly");

  auto* build = app.add_subcommand("build-db", "build a stride-sampled reference database");
  common(build);
  pipeline(build);
  build->add_option("--out", a.out, "output directory")->required();

  auto* retrieve = app.add_subcommand("retrieve", "rank database entries for one query");
  common(retrieve);
  pipeline(retrieve);
  retrieve->add_option("--query", a.query, "query name, e.g. s3_f7")->required();

  auto* align = app.add_subcommand("align", "dump pseudo-aligned view provenance for one query");
  common(align);
  pipeline(align);
  align->add_option("--query", a.query, "query name, e.g. s3_f7")->required();

  auto* trn = app.add_subcommand("train", "train projection, aggregator and change head");
  common(trn);
  pipeline(trn);
  trn->add_option("--out", a.out, "checkpoint directory")->required();
  trn->add_option("--epochs", a.epochs, "training epochs");
  trn->add_option("--lr", a.lr, "peak learning rate");

  auto* detect = app.add_subcommand("detect", "predict change masks and write results.csv");
  common(detect);
  pipeline(detect);
  detect->add_option("--out", a.out, "output directory");
  detect->add_flag("--probabilities", a.probabilities, "also write probability maps");

  auto* eval = app.add_subcommand("eval", "score a directory of predicted masks");
  common(eval);
  eval->add_option("--pred", a.pred, "directory of <query>.pgm masks")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("usage", e.what());
    return 2;
  }

  try {
    if (*gen) return cmd_gen(a);
    if (*build) return cmd_build_db(a);
    if (*retrieve) return cmd_retrieve(a);
    if (*align) return cmd_align(a);
    if (*trn) return cmd_train(a);
    if (*detect) return cmd_detect(a);
    if (*eval) return cmd_eval(a);
  } catch (const ConfigError& e) {
    fail_line("config", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    fail_line("invalid", e.what());
    return 2;
  } catch (const std::out_of_range& e) {
    fail_line("range", e.what());
    return 2;
  } catch (const std::exception& e) {
    fail_line("runtime", e.what());
    return 1;
  }
  return 0;
}
