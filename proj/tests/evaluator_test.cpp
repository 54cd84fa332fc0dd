#include "ecd/evaluator.hpp"
#include "testing.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <numeric>

namespace ecd {
namespace {

Mask random_mask(Index h, Index w, double p, Rng& rng) {
  Mask m(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) m(y, x) = rng.uniform() < p ? 1 : 0;
  return m;
}

ConfusionCounts counts_oracle(const Mask& pred, const Mask& gt) {
  ConfusionCounts c;
  for (Index y = 0; y < pred.rows(); ++y) {
    for (Index x = 0; x < pred.cols(); ++x) {
      const bool p = pred(y, x) != 0, g = gt(y, x) != 0;
      if (p && g) ++c.tp;
      else if (p) ++c.fp;
      else if (g) ++c.fn;
      else ++c.tn;
    }
  }
  return c;
}

TEST(F1, ClosedForms) {
  EXPECT_NEAR(f1({2, 1, 1, 0}), 0.6667, 1e-4);
  EXPECT_DOUBLE_EQ(f1({2, 1, 1, 0}), 2.0 / 3.0);
  EXPECT_EQ(f1({0, 0, 0, 0}), 0.0);
  EXPECT_EQ(f1({0, 0, 0, 50}), 0.0);
  EXPECT_EQ(f1({0, 3, 4, 1}), 0.0);
  EXPECT_EQ(f1({5, 0, 0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(precision({3, 1, 0, 0}), 0.75);
  EXPECT_DOUBLE_EQ(recall({3, 0, 3, 0}), 0.5);
  EXPECT_EQ(precision({}), 0.0);
  EXPECT_EQ(recall({}), 0.0);
}

TEST(F1, HarmonicMeanOfPrecisionAndRecall) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const ConfusionCounts c{std::uint64_t(rng.uniform_int(1, 50)), std::uint64_t(rng.uniform_int(0, 50)),
                            std::uint64_t(rng.uniform_int(0, 50)), 0};
    const double p = precision(c), r = recall(c);
    EXPECT_NEAR(f1(c), 2 * p * r / (p + r), 1e-12);
  }
}

TEST(Accumulate, MatchesLoopOracle) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const Index h = rng.uniform_int(1, 20), w = rng.uniform_int(1, 20);
    const Mask pred = random_mask(h, w, rng.uniform(), rng);
    const Mask gt = random_mask(h, w, rng.uniform(), rng);
    const auto c = accumulate(pred, gt);
    ASSERT_EQ(c, counts_oracle(pred, gt));
    ASSERT_EQ(c.total(), static_cast<std::uint64_t>(h * w));
  }
}

TEST(Accumulate, NonzeroMeansChange) {
  Mask pred(1, 2), gt(1, 2);
  pred << 7, 0;
  gt << 1, 255;
  EXPECT_EQ(accumulate(pred, gt), (ConfusionCounts{1, 0, 1, 0}));
}

TEST(Accumulate, AddsOntoExisting) {
  Rng rng(3);
  const Mask a = random_mask(5, 5, 0.5, rng), b = random_mask(5, 5, 0.5, rng);
  ConfusionCounts acc = accumulate(a, b);
  acc = accumulate(b, a, acc);
  auto expect = counts_oracle(a, b);
  expect += counts_oracle(b, a);
  EXPECT_EQ(acc, expect);
}

TEST(Accumulate, ShapeMismatch) {
  EXPECT_THROW(accumulate(Mask(2, 2), Mask(2, 3)), DimensionError);
}

TEST(Accumulate, InvariantUnderJointPixelPermutation) {
  Rng rng(4);
  const Mask pred = random_mask(6, 7, 0.4, rng), gt = random_mask(6, 7, 0.3, rng);
  std::vector<Index> perm(42);
  std::iota(perm.begin(), perm.end(), Index{0});
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
  Mask pp(6, 7), gp(6, 7);
  for (Index i = 0; i < 42; ++i) {
    pp.data()[i] = pred.data()[perm[std::size_t(i)]];
    gp.data()[i] = gt.data()[perm[std::size_t(i)]];
  }
  EXPECT_EQ(accumulate(pp, gp), accumulate(pred, gt));
}

TEST(AggregateF1, MicroVersusPerImage) {
  const std::vector<ConfusionCounts> per{{2, 1, 1, 0}, {0, 0, 0, 9}};
  EXPECT_DOUBLE_EQ(aggregate_f1(per, F1Averaging::kMicro), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(aggregate_f1(per, F1Averaging::kPerImage), 1.0 / 3.0);
  EXPECT_EQ(aggregate_f1({}, F1Averaging::kPerImage), 0.0);
  EXPECT_EQ(aggregate_f1({}, F1Averaging::kMicro), 0.0);
}

TEST(AggregateF1, PerfectPredictionIsOne) {
  Rng rng(5);
  std::vector<ConfusionCounts> per;
  for (int i = 0; i < 5; ++i) {
    Mask m = random_mask(4, 4, 0.5, rng);
    m(0, 0) = 1;
    per.push_back(accumulate(m, m));
  }
  EXPECT_EQ(aggregate_f1(per), 1.0);
  EXPECT_EQ(aggregate_f1(per, F1Averaging::kPerImage), 1.0);
}

class RetrievalReportTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(6);
    SourceSequence s;
    for (int j = 0; j < 6; ++j) {
      SourceFrame f;
      f.pose = {double(j), 0, 0, 1};
      f.features = testing::random_map(8, 2, 2, rng);
      s.frames.push_back(std::move(f));
    }
    db = build_database({s}, 1);
    for (const auto& e : db.entries()) {
      queries.push_back({e.pose, 0, e.descriptor});
    }
  }
  ReferenceDatabase db;
  std::vector<RetrievalQuery> queries;
};

TEST_F(RetrievalReportTest, SelfQueriesAreStrict) {
  const auto r = retrieval_report(queries, db, 1, MatchCriteria{});
  EXPECT_EQ(r.queries, 6u);
  EXPECT_EQ(r.strict, 1.0);
  EXPECT_EQ(r.coarse, 1.0);
}

TEST_F(RetrievalReportTest, LargeThresholdsAcceptEverything) {
  for (auto& q : queries) q.pose.x += 100;
  MatchCriteria wide;
  wide.strict_distance = wide.coarse_distance = std::numeric_limits<double>::infinity();
  wide.strict_angle = wide.coarse_angle = 180;
  const auto r = retrieval_report(queries, db, 1, wide);
  EXPECT_EQ(r.strict, 1.0);
  EXPECT_EQ(r.coarse, 1.0);
  const auto tight = retrieval_report(queries, db, 1, MatchCriteria{});
  EXPECT_EQ(tight.strict, 0.0);
  EXPECT_EQ(tight.coarse, 0.0);
}

TEST_F(RetrievalReportTest, StrictNeverExceedsCoarse) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    for (auto& q : queries) {
      q.pose.x = rng.uniform(-5, 10);
      q.pose.rotation = rng.uniform(-60, 60);
    }
    const auto r = retrieval_report(queries, db, 1, MatchCriteria{});
    EXPECT_LE(r.strict, r.coarse);
    EXPECT_GE(r.strict, 0.0);
    EXPECT_LE(r.coarse, 1.0);
  }
}

TEST_F(RetrievalReportTest, EmptyInputs) {
  EXPECT_EQ(retrieval_report({}, db, 1, MatchCriteria{}).queries, 0u);
  EXPECT_THROW(retrieval_report(queries, ReferenceDatabase{}, 1, MatchCriteria{}),
               std::invalid_argument);
}

}  // namespace
}  // namespace ecd
