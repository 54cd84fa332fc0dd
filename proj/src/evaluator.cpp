#include "ecd/evaluator.hpp"

namespace ecd {

ConfusionCounts accumulate(const Mask& pred, const Mask& gt,
                           ConfusionCounts acc) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
    throw DimensionError(detail::concat("prediction ", pred.rows(), "x",
                                        pred.cols(), " vs ground truth ",
                                        gt.rows(), "x", gt.cols()));
  }
  const auto p = pred.array() != 0;
  const auto g = gt.array() != 0;
  acc.tp += static_cast<std::uint64_t>((p && g).count());
  acc.fp += static_cast<std::uint64_t>((p && !g).count());
  acc.fn += static_cast<std::uint64_t>((!p && g).count());
  acc.tn += static_cast<std::uint64_t>((!p && !g).count());
  return acc;
}

double f1(const ConfusionCounts& c) {
  const double denom = 2.0 * static_cast<double>(c.tp) +
                       static_cast<double>(c.fp) + static_cast<double>(c.fn);
  return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / denom;
}

double precision(const ConfusionCounts& c) {
  const auto denom = c.tp + c.fp;
  return denom == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double recall(const ConfusionCounts& c) {
  const auto denom = c.tp + c.fn;
  return denom == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double aggregate_f1(std::span<const ConfusionCounts> per_image,
                    F1Averaging mode) {
  if (mode == F1Averaging::kMicro) {
    ConfusionCounts sum;
    for (const auto& c : per_image) sum += c;
    return f1(sum);
  }
  if (per_image.empty()) return 0.0;
  double total = 0.0;
  for (const auto& c : per_image) total += f1(c);
  return total / static_cast<double>(per_image.size());
}

RetrievalRates retrieval_report(std::span<const RetrievalQuery> queries,
                                const ReferenceDatabase& db, std::size_t k,
                                const MatchCriteria& criteria) {
  if (db.size() == 0) throw std::invalid_argument("empty database");
  criteria.validate();
  RetrievalRates rates;
  rates.queries = queries.size();
  if (queries.empty()) return rates;
  std::size_t strict = 0;
  std::size_t coarse = 0;
  for (const auto& q : queries) {
    const auto hits = retrieve_topk(q.descriptor, db, std::max<std::size_t>(k, 1));
    const MatchLevel level =
        classify_match(q.pose, q.sequence, db.entry(hits.front().entry), criteria);
    if (level == MatchLevel::kStrict) ++strict;
    if (level != MatchLevel::kMiss) ++coarse;
  }
  rates.strict = static_cast<double>(strict) / static_cast<double>(queries.size());
  rates.coarse = static_cast<double>(coarse) / static_cast<double>(queries.size());
  return rates;
}

}  // namespace ecd
