// Pixel-wise change metrics and top-1 retrieval grading.
#pragma once

#include "ecd/change_head.hpp"
#include "ecd/refdb.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace ecd {

// Change is the positive class.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts accumulate(const Mask& pred, const Mask& gt,
                           ConfusionCounts acc = {});

// 2TP / (2TP + FP + FN); 0 when the denominator is 0.
double f1(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);

enum class F1Averaging { kMicro, kPerImage };

// Micro: F1 of the summed counts. Per-image: mean of per-image F1.
double aggregate_f1(std::span<const ConfusionCounts> per_image,
                    F1Averaging mode = F1Averaging::kMicro);

struct RetrievalQuery {
  Pose pose;
  std::optional<int> sequence;
  Vec<float> descriptor;
};

struct RetrievalRates {
  double strict = 0.0;
  double coarse = 0.0;  // counts strict matches too
  std::size_t queries = 0;
};

RetrievalRates retrieval_report(std::span<const RetrievalQuery> queries,
                                const ReferenceDatabase& db, std::size_t k,
                                const MatchCriteria& criteria);

}  // namespace ecd
