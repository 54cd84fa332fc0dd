// End-to-end detection over a generated world: encode -> project ->
// descriptor -> retrieve -> align -> aggregate -> detect -> evaluate.
#pragma once

#include "ecd/checkpoint.hpp"
#include "ecd/evaluator.hpp"
#include "ecd/refdb.hpp"
#include "ecd/synthworld.hpp"
#include "ecd/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace ecd {

struct PipelineConfig {
  std::optional<int> stride;  // when set, must equal the database stride
  std::size_t top_k = 3;
  std::vector<Index> grids{1, 2, 4};
  double threshold = 0.5;
  std::uint64_t seed = 0;
  PipelineMode mode = PipelineMode::kFull;
  Split split = Split::kValidation;
  std::filesystem::path world;
  std::filesystem::path db;
  std::filesystem::path checkpoint;
  std::filesystem::path output;
  bool write_probabilities = false;
  bool write_provenance = true;

  // K actually used: baseline reads only the top-1 reference.
  std::size_t effective_k() const {
    return mode == PipelineMode::kBaseline ? 1 : top_k;
  }
  void validate() const;
};

// "1,2,4" -> {1, 2, 4}.
std::vector<Index> parse_grids(const std::string& text);
std::string format_grids(const std::vector<Index>& grids);

// FNV-1a of the canonical config text (every field that affects output).
std::uint64_t config_hash(const PipelineConfig& cfg, const ModelConfig& model);

struct DetectReport {
  ConfusionCounts counts;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  RetrievalRates retrieval;
  int stride = 0;
  std::uint64_t hash = 0;
  std::string csv_row;
};

inline constexpr const char* kResultsHeader =
    "mode,stride,top_k,grids,threshold,split,queries,f1,precision,recall,"
    "strict_at_1,coarse_at_1,config_hash";

// Writes <output>/masks/<stem>.pgm per query (plus probabilities and
// provenance when enabled) and appends one row to <output>/results.csv.
DetectReport run_detect(const PipelineConfig& cfg);

// Small-scale defaults used by the CLI and the acceptance suite.
WorldSpec toy_world_spec();
EncoderConfig toy_encoder_config();
ModelConfig model_config_for(const EncoderConfig& encoder);
TrainConfig toy_train_config();

std::string query_stem(int sequence, int index);

}  // namespace ecd
