// Checkpoint directory layout:
//   manifest.json            model config, block names/shapes, optimizer step
//   params/<block>.ecdf      one array per trainable block
//   optimizer/<block>.m.ecdf, optimizer/<block>.v.ecdf
//   metrics.csv              epoch,lr,train_loss,val_f1
#pragma once

#include "ecd/trainer.hpp"

#include <filesystem>

namespace ecd {

struct Checkpoint {
  ModelConfig model;
  ModelParams<float> params;
  OptimizerState<float> optimizer;
  std::vector<EpochMetrics> history;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<EpochMetrics>& history);

}  // namespace ecd
