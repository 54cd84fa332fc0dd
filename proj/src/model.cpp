#include "ecd/model.hpp"

namespace ecd {

const char* to_string(PipelineMode mode) {
  switch (mode) {
    case PipelineMode::kBaseline: return "baseline";
    case PipelineMode::kAlignerOnly: return "aligner-only";
    case PipelineMode::kAggregatorOnly: return "aggregator-only";
    case PipelineMode::kFull: return "full";
  }
  return "full";
}

PipelineMode parse_mode(const std::string& text) {
  for (auto m : {PipelineMode::kBaseline, PipelineMode::kAlignerOnly,
                 PipelineMode::kAggregatorOnly, PipelineMode::kFull}) {
    if (text == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown mode '" + text +
                              "' (expected baseline, aligner-only, aggregator-only or full)");
}

}  // namespace ecd
