#include "ecd/aligner.hpp"
#include "testing.hpp"

#include <gtest/gtest.h>

#include <numeric>

namespace ecd {
namespace {

using testing::random_map;
using testing::random_unit_map;

TEST(PartitionGrid, FourByFourTiling) {
  Rng rng(1);
  const auto f = random_map(3, 16, 16, rng);
  const auto cells = partition_grid(f, 4);
  ASSERT_EQ(cells.size(), 16u);
  EXPECT_EQ(cells[0].cell, (GridCell{0, 0}));
  EXPECT_EQ(cells[5].cell, (GridCell{1, 1}));
  for (const auto& c : cells) {
    EXPECT_EQ(c.patch.height(), 4);
    EXPECT_EQ(c.patch.width(), 4);
    EXPECT_EQ(c.patch.tokens(),
              testing::window_oracle(f, c.cell.row * 4, c.cell.col * 4, 4, 4).tokens());
  }
}

TEST(PartitionGrid, SingleCellIsWholeMap) {
  Rng rng(2);
  const auto f = random_map(2, 6, 4, rng);
  const auto cells = partition_grid(f, 1);
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].patch.tokens(), f.tokens());
}

TEST(PartitionGrid, IndivisibleNamesValues) {
  try {
    partition_grid(FeatureMap<float>(1, 16, 16), 3);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("n=3"), std::string::npos);
    EXPECT_NE(msg.find("H=16"), std::string::npos);
  }
}

TEST(MatchPatch, BestReferenceWins) {
  FeatureMap<float> patch(1, 1, 1);
  patch(0, 0, 0) = 1;
  FeatureMap<float> r1(1, 1, 4), r2(1, 1, 4);
  r1.tokens() << 0.1f, 0.7f, 0.2f, 0.0f;
  r2.tokens() << 0.3f, 0.0f, 0.9f, 0.5f;
  const auto m = match_patch(patch, std::vector{r1, r2});
  EXPECT_EQ(m.reference, 1);
  EXPECT_EQ(m.top, 0);
  EXPECT_EQ(m.left, 2);
  EXPECT_NEAR(m.similarity, 0.9, 1e-7);
}

TEST(MatchPatch, VerbatimPatchIsFound) {
  Rng rng(3);
  std::vector<FeatureMap<float>> refs{random_unit_map(4, 9, 10, rng),
                                      random_unit_map(4, 9, 10, rng)};
  const auto patch = random_unit_map(4, 3, 3, rng);
  refs[0].set_block(3, 5, patch);
  const auto m = match_patch(patch, refs);
  EXPECT_EQ(m.reference, 0);
  EXPECT_EQ(m.top, 3);
  EXPECT_EQ(m.left, 5);
  EXPECT_NEAR(m.similarity, 9.0, 1e-5);
}

TEST(MatchPatch, MatchesExhaustiveOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<FeatureMap<float>> refs;
    for (int k = 0; k < 3; ++k) refs.push_back(random_map(4, 8, 8, rng));
    const auto patch = random_map(4, 3, 3, rng);
    const auto m = match_patch(patch, refs);
    const auto o = testing::match_oracle(patch, refs);
    ASSERT_EQ(m.reference, o.k);
    ASSERT_EQ(m.top, o.top);
    ASSERT_EQ(m.left, o.left);
    ASSERT_NEAR(m.similarity, o.similarity, 1e-5);
  }
}

TEST(MatchPatch, TiesKeepLowestReferenceThenRasterOrder) {
  FeatureMap<float> ref(2, 4, 4);
  ref.tokens().col(0).setOnes();
  FeatureMap<float> patch(2, 2, 2);
  patch.tokens().col(0).setOnes();
  const auto m = match_patch(patch, std::vector{ref, ref, ref});
  EXPECT_EQ(m.reference, 0);
  EXPECT_EQ(m.top, 0);
  EXPECT_EQ(m.left, 0);
}

TEST(MatchPatch, Errors) {
  EXPECT_THROW(match_patch(FeatureMap<float>(2, 2, 2), std::vector<FeatureMap<float>>{}),
               DimensionError);
  EXPECT_THROW(match_patch(FeatureMap<float>(2, 2, 2), std::vector{FeatureMap<float>(3, 4, 4)}),
               DimensionError);
}

TEST(PseudoView, SelfMatchReproducesQuery) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_unit_map(6, 8, 8, rng);
    std::vector<FeatureMap<float>> refs{random_unit_map(6, 8, 8, rng), q,
                                        random_unit_map(6, 8, 8, rng)};
    for (Index n : {1, 2, 4}) {
      const auto v = build_pseudo_view(q, refs, n);
      EXPECT_EQ(v.features.tokens(), q.tokens()) << "n=" << n;
      for (const auto& m : v.provenance) EXPECT_EQ(m.reference, 1);
    }
  }
}

TEST(PseudoView, SingleCellSingleRefIsTheRef) {
  Rng rng(6);
  const auto q = random_map(3, 4, 6, rng);
  const auto r = random_map(3, 4, 6, rng);
  const auto v = build_pseudo_view(q, std::vector{r}, 1);
  EXPECT_EQ(v.features.tokens(), r.tokens());
  ASSERT_EQ(v.provenance.size(), 1u);
  EXPECT_EQ(v.provenance[0].top, 0);
  EXPECT_EQ(v.provenance[0].left, 0);
}

TEST(PseudoView, BlocksMatchOracleSelections) {
  Rng rng(7);
  const auto q = random_unit_map(8, 16, 16, rng);
  std::vector<FeatureMap<float>> refs;
  for (int k = 0; k < 3; ++k) refs.push_back(random_unit_map(8, 16, 16, rng));
  const auto v = build_pseudo_view(q, refs, 2);
  ASSERT_EQ(v.provenance.size(), 4u);
  for (const auto& cell : partition_grid(q, 2)) {
    const auto o = testing::match_oracle(cell.patch, refs);
    const auto& m = v.provenance[static_cast<std::size_t>(cell.cell.row * 2 + cell.cell.col)];
    EXPECT_EQ(m.cell, cell.cell);
    EXPECT_EQ(m.reference, o.k);
    EXPECT_EQ(m.top, o.top);
    EXPECT_EQ(m.left, o.left);
    EXPECT_NEAR(m.similarity, o.similarity, 1e-5);
    EXPECT_EQ(v.features.block(cell.cell.row * 8, cell.cell.col * 8, 8, 8).tokens(),
              testing::window_oracle(refs[std::size_t(o.k)], o.top, o.left, 8, 8).tokens());
  }
}

TEST(Multiscale, OneViewPerResolution) {
  Rng rng(8);
  const auto q = random_unit_map(4, 8, 8, rng);
  const std::vector refs{random_unit_map(4, 8, 8, rng), random_unit_map(4, 8, 8, rng)};
  const auto views = build_multiscale(q, refs, GridSpec{});
  ASSERT_EQ(views.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(views[i].resolution, GridSpec{}.resolutions[i]);
    EXPECT_TRUE(views[i].features.same_shape(q));
    EXPECT_EQ(views[i].features.tokens(),
              build_pseudo_view(q, refs, views[i].resolution).features.tokens());
  }
  EXPECT_EQ(build_multiscale(q, refs, GridSpec{{1}}).size(), 1u);
}

TEST(Multiscale, DuplicatedReferencesChangeNothing) {
  Rng rng(9);
  const auto q = random_unit_map(4, 8, 8, rng);
  const auto r = random_unit_map(4, 8, 8, rng);
  const auto one = build_multiscale(q, std::vector{r}, GridSpec{});
  const auto many = build_multiscale(q, std::vector{r, r, r}, GridSpec{});
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(one[i].features.tokens(), many[i].features.tokens());
    for (const auto& m : many[i].provenance) EXPECT_EQ(m.reference, 0);
  }
}

TEST(GridSpecValidate, Rules) {
  EXPECT_NO_THROW(GridSpec{}.validate(16, 16));
  EXPECT_THROW((GridSpec{{}}).validate(16, 16), std::invalid_argument);
  EXPECT_THROW((GridSpec{{2, 1}}).validate(16, 16), std::invalid_argument);
  EXPECT_THROW((GridSpec{{1, 3}}).validate(16, 16), DimensionError);
  EXPECT_THROW(build_pseudo_view(FeatureMap<float>(2, 8, 8), std::vector{FeatureMap<float>(2, 8, 6)}, 1),
               DimensionError);
}

TEST(AlignerProperties, PermutationInvariance) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_unit_map(5, 8, 8, rng);
    std::vector<FeatureMap<float>> refs;
    for (int k = 0; k < 4; ++k) refs.push_back(random_unit_map(5, 8, 8, rng));
    std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<FeatureMap<float>> shuffled;
    for (auto p : perm) shuffled.push_back(refs[p]);
    for (Index n : {1, 2, 4}) {
      const auto a = build_pseudo_view(q, refs, n);
      const auto b = build_pseudo_view(q, shuffled, n);
      EXPECT_EQ(a.features.tokens(), b.features.tokens());
      for (std::size_t c = 0; c < a.provenance.size(); ++c) {
        EXPECT_EQ(Index(perm[std::size_t(b.provenance[c].reference)]), a.provenance[c].reference);
      }
    }
  }
}

TEST(AlignerProperties, WinningSimilarityGrowsWithSuperset) {
  Rng rng(11);
  const auto q = random_unit_map(4, 8, 8, rng);
  std::vector<FeatureMap<float>> refs;
  std::vector<double> last(16, -1e300);
  for (int k = 0; k < 5; ++k) {
    refs.push_back(random_unit_map(4, 8, 8, rng));
    const auto v = build_pseudo_view(q, refs, 4);
    for (std::size_t c = 0; c < 16; ++c) {
      EXPECT_GE(v.provenance[c].similarity, last[c]);
      last[c] = v.provenance[c].similarity;
    }
  }
}

TEST(PseudoViewBackward, ScatterIsAdjointOfGather) {
  Rng rng(12);
  const auto q = random_unit_map<double>(3, 8, 8, rng);
  const std::vector refs{random_unit_map<double>(3, 8, 8, rng),
                         random_unit_map<double>(3, 8, 8, rng)};
  const auto view = build_pseudo_view(q, refs, 2);
  const auto g = random_map<double>(3, 8, 8, rng);
  std::vector<FeatureMap<double>> grad_refs{FeatureMap<double>(3, 8, 8),
                                            FeatureMap<double>(3, 8, 8)};
  pseudo_view_backward(view, g, grad_refs);
  const double lhs = view.features.tokens().cwiseProduct(g.tokens()).sum();
  double rhs = 0;
  for (std::size_t k = 0; k < 2; ++k) rhs += refs[k].tokens().cwiseProduct(grad_refs[k].tokens()).sum();
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

}  // namespace
}  // namespace ecd
