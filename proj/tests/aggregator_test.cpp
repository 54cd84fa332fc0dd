#include "ecd/aggregator.hpp"
#include "ecd/gradcheck.hpp"
#include "testing.hpp"

#include <gtest/gtest.h>

namespace ecd {
namespace {

using testing::random_map;
using testing::random_matrix;

template <typename Scalar>
MhaParams<Scalar> random_mha(Index d, Index heads, Rng& rng) {
  auto p = MhaParams<Scalar>::random(d, heads, rng);
  for (auto* b : {&p.bq, &p.bk, &p.bv, &p.bo}) *b = random_matrix<Scalar>(d, 1, rng, 0.3);
  return p;
}

// Token-wise relu(x W1^T + b1) W2^T + b2.
Mat<double> ffn_oracle(const Mat<double>& x, const FfnParams<float>& f) {
  Mat<double> y(x.rows(), f.w2.rows());
  for (Index t = 0; t < x.rows(); ++t) {
    std::vector<double> h(static_cast<std::size_t>(f.hidden()));
    for (Index j = 0; j < f.hidden(); ++j) {
      double s = f.b1(j);
      for (Index i = 0; i < f.dim(); ++i) s += double(f.w1(j, i)) * x(t, i);
      h[std::size_t(j)] = std::max(0.0, s);
    }
    for (Index o = 0; o < f.w2.rows(); ++o) {
      double s = f.b2(o);
      for (Index j = 0; j < f.hidden(); ++j) s += double(f.w2(o, j)) * h[std::size_t(j)];
      y(t, o) = s;
    }
  }
  return y;
}

TEST(FlattenTokens, CountsAndRoundTrip) {
  Rng rng(1);
  EXPECT_EQ(flatten_tokens(std::vector{FeatureMap<float>(384, 2, 2)}).rows(), 4);
  const std::vector maps{FeatureMap<float>(8, 16, 16), FeatureMap<float>(8, 16, 16),
                         FeatureMap<float>(8, 16, 16)};
  EXPECT_EQ(flatten_tokens(maps).rows(), 768);
  const auto m = random_map(5, 3, 4, rng);
  EXPECT_EQ(unflatten_tokens(flatten_tokens(std::vector{m}), 3, 4).tokens(), m.tokens());
  const auto a = random_map(2, 2, 2, rng), b = random_map(2, 1, 3, rng);
  const auto t = flatten_tokens(std::vector{a, b});
  EXPECT_EQ(t.row(4), b.tokens().row(0));
  EXPECT_THROW(flatten_tokens(std::vector{a, FeatureMap<float>(3, 1, 1)}), DimensionError);
  EXPECT_THROW(flatten_tokens(std::vector<FeatureMap<float>>{}), DimensionError);
}

TEST(CrossAttend, SingleKeyIgnoresQuery) {
  Rng rng(2);
  AggregatorParams<float> p;
  p.mha = random_mha<float>(6, 2, rng);
  p.dropout = 0;
  const Mat<float> kv = random_matrix<float>(1, 6, rng);
  const Mat<float> q1 = random_matrix<float>(3, 6, rng);
  const Mat<float> q2 = random_matrix<float>(3, 6, rng);
  const Mat<float> a = cross_attend(q1, kv, p, false, {});
  const Mat<float> b = cross_attend(q2, kv, p, false, {});
  Vec<float> v = p.mha.wv * kv.row(0).transpose() + p.mha.bv;
  Vec<float> want = p.mha.wo * v + p.mha.bo;
  for (Index r = 0; r < 3; ++r) {
    EXPECT_LT((a.row(r).transpose() - want).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_LT((b.row(r) - a.row(r)).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(CrossAttend, TwoOrthogonalKeysHandValue) {
  AggregatorParams<double> p = AggregatorParams<double>::zeros(4, 1, 4, 0.0);
  for (auto* w : {&p.mha.wq, &p.mha.wk, &p.mha.wv, &p.mha.wo}) w->setIdentity();
  Mat<double> kv = Mat<double>::Zero(2, 4);
  kv(0, 0) = 1;
  kv(1, 1) = 1;
  const Mat<double> q = kv.topRows(1);
  const Mat<double> out = cross_attend(q, kv, p, false, {});
  // logits (1/2, 0) after the 1/sqrt(4) scale
  const double w1 = 1.0 / (1.0 + std::exp(-0.5));
  EXPECT_NEAR(w1, 0.6225, 1e-4);
  EXPECT_NEAR(out(0, 0), w1, 1e-12);
  EXPECT_NEAR(out(0, 1), 1 - w1, 1e-12);
  EXPECT_NEAR(out(0, 2), 0, 1e-12);
  const Mat<double> o = testing::attention_oracle(q, kv, p.mha);
  EXPECT_LT((o - out).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossAttend, MatchesDenseOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto mha = random_mha<float>(12, 6, rng);
    const Mat<float> q = random_matrix<float>(4, 12, rng);
    const Mat<float> kv = random_matrix<float>(12, 12, rng);
    const Mat<float> out = mha_forward(q, kv, mha);
    const Mat<double> o = testing::attention_oracle(q, kv, mha);
    EXPECT_LT((out.cast<double>() - o).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(CrossAttend, WeightsAreStochasticAndContextInHull) {
  Rng rng(4);
  const auto mha = random_mha<double>(12, 3, rng);
  MhaCache<double> c;
  mha_forward<double>(random_matrix<double>(5, 12, rng, 3), random_matrix<double>(9, 12, rng, 3),
                      mha, &c);
  ASSERT_EQ(c.weights.size(), 3u);
  for (const auto& w : c.weights)
    for (Index r = 0; r < w.rows(); ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-6);
  for (Index j = 0; j < 12; ++j) {
    const double lo = c.v.col(j).minCoeff(), hi = c.v.col(j).maxCoeff();
    for (Index t = 0; t < 5; ++t) {
      EXPECT_GE(c.context(t, j), lo - 1e-6);
      EXPECT_LE(c.context(t, j), hi + 1e-6);
    }
  }
}

TEST(CrossAttend, DimensionErrors) {
  const auto p = AggregatorParams<float>::zeros(6, 2, 6);
  EXPECT_THROW(cross_attend(Mat<float>(2, 5), Mat<float>(2, 6), p, false, {}), DimensionError);
  EXPECT_THROW(AggregatorParams<float>::zeros(7, 2, 6), DimensionError);
}

TEST(Dropout, MaskIsKeyedAndScaled) {
  const auto a = dropout_mask<double>(40, 50, 0.1, {1, 2, 3});
  const auto b = dropout_mask<double>(40, 50, 0.1, {1, 2, 3});
  const auto c = dropout_mask<double>(40, 50, 0.1, {1, 3, 3});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  const double kept = (a.array() > 0).cast<double>().mean();
  EXPECT_NEAR(kept, 0.9, 0.03);
  EXPECT_NEAR(a.maxCoeff(), 1.0 / 0.9, 1e-12);
  EXPECT_TRUE(dropout_mask<double>(3, 3, 0.0, {}).isOnes(0));
  EXPECT_THROW(dropout_mask<double>(1, 1, 1.0, {}), std::invalid_argument);
}

TEST(CrossAttend, TrainingModeOnlyAppliesDropout) {
  Rng rng(5);
  AggregatorParams<float> p = AggregatorParams<float>::random(6, 2, 6, 0.5, rng);
  const Mat<float> q = random_matrix<float>(4, 6, rng), kv = random_matrix<float>(5, 6, rng);
  const Mat<float> eval1 = cross_attend(q, kv, p, false, {1, 0, 0});
  const Mat<float> eval2 = cross_attend(q, kv, p, false, {2, 0, 0});
  EXPECT_EQ(eval1, eval2);
  const Mat<float> train1 = cross_attend(q, kv, p, true, {1, 0, 0});
  EXPECT_NE(train1, eval1);
  EXPECT_EQ(train1, cross_attend(q, kv, p, true, {1, 0, 0}));
}

TEST(AggregateScale, ZeroAndIdentityParameters) {
  Rng rng(6);
  const auto view = random_map(6, 3, 3, rng, 0.0, 1.0);
  const auto refs = flatten_tokens(std::vector{random_map(6, 3, 3, rng)});
  auto p = AggregatorParams<float>::zeros(6, 2, 6, 0.0);
  EXPECT_TRUE(aggregate_scale(view, refs, p, false, {}).tokens().isZero(0));
  p.ffn = FfnParams<float>::identity(6);
  const auto out = aggregate_scale(view, refs, p, false, {});
  EXPECT_EQ(out.height(), 3);
  EXPECT_EQ(out.width(), 3);
  EXPECT_LT((out.tokens() - view.tokens()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(AggregateScale, MatchesComposedOracle) {
  Rng rng(7);
  auto p = AggregatorParams<float>::random(12, 6, 12, 0.0, rng);
  p.mha = random_mha<float>(12, 6, rng);
  p.ffn.b1 = random_matrix<float>(12, 1, rng, 0.2);
  p.ffn.b2 = random_matrix<float>(12, 1, rng, 0.2);
  const auto view = random_map(12, 2, 3, rng);
  const auto refs = flatten_tokens(std::vector{random_map(12, 2, 3, rng), random_map(12, 2, 3, rng)});
  const auto out = aggregate_scale(view, refs, p, false, {});
  const Mat<double> residual =
      testing::attention_oracle(view.tokens(), refs, p.mha) + view.tokens().cast<double>();
  const Mat<double> o = ffn_oracle(residual, p.ffn);
  EXPECT_LT((out.tokens().cast<double>() - o).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(ReconstructScene, AveragesScales) {
  Rng rng(8);
  const auto p = AggregatorParams<float>::random(6, 2, 6, 0.0, rng);
  const std::vector refs{random_map(6, 4, 4, rng), random_map(6, 4, 4, rng)};
  const auto tokens = flatten_tokens(refs);
  std::vector<PseudoView<float>> views;
  for (Index n : {1, 2, 4}) views.push_back({n, random_map(6, 4, 4, rng), {}});

  const auto one = reconstruct_scene(std::vector{views[0]}, std::span<const FeatureMap<float>>(refs), p, false, {});
  EXPECT_EQ(one.tokens(), aggregate_scale(views[0].features, tokens, p, false, {}).tokens());

  const auto same = reconstruct_scene(std::vector{views[1], views[1], views[1]},
                                      std::span<const FeatureMap<float>>(refs), p, false, {});
  EXPECT_LT((same.tokens() - aggregate_scale(views[1].features, tokens, p, false, {}).tokens())
                .cwiseAbs()
                .maxCoeff(),
            1e-6);

  const auto all = reconstruct_scene(views, std::span<const FeatureMap<float>>(refs), p, false, {});
  Mat<float> mean = Mat<float>::Zero(16, 6);
  for (const auto& v : views) mean += aggregate_scale(v.features, tokens, p, false, {}).tokens();
  mean /= 3.0f;
  EXPECT_LT((all.tokens() - mean).cwiseAbs().maxCoeff(), 1e-6);

  EXPECT_THROW(reconstruct_scene(std::vector<PseudoView<float>>{},
                                 std::span<const FeatureMap<float>>(refs), p, false, {}),
               std::invalid_argument);
}

TEST(AggregateScale, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  auto p = AggregatorParams<double>::random(12, 2, 12, 0.1, rng);
  p.mha = random_mha<double>(12, 2, rng);
  p.ffn.b1 = random_matrix<double>(12, 1, rng, 0.2);
  p.ffn.b2 = random_matrix<double>(12, 1, rng, 0.2);
  auto view = random_map<double>(12, 2, 2, rng);
  Mat<double> refs = random_matrix<double>(8, 12, rng);
  const auto w = random_map<double>(12, 2, 2, rng);
  const DropoutKey key{5, 1, 0};
  auto loss = [&] {
    return aggregate_scale(view, refs, p, true, key).tokens().cwiseProduct(w.tokens()).sum();
  };
  AggregateCache<double> cache;
  aggregate_scale(view, refs, p, true, key, &cache);
  ASSERT_GT(cache.attend.mask.size(), 0);
  auto grads = AggregatorParams<double>::zeros(12, 2, 12, 0.1);
  const auto gin = aggregate_scale_backward(cache, p, w, grads);

  struct Block {
    const char* name;
    double* v;
    double* g;
    Index n;
  };
  const std::vector<Block> blocks = {
      {"wq", p.mha.wq.data(), grads.mha.wq.data(), p.mha.wq.size()},
      {"bq", p.mha.bq.data(), grads.mha.bq.data(), p.mha.bq.size()},
      {"wk", p.mha.wk.data(), grads.mha.wk.data(), p.mha.wk.size()},
      {"bk", p.mha.bk.data(), grads.mha.bk.data(), p.mha.bk.size()},
      {"wv", p.mha.wv.data(), grads.mha.wv.data(), p.mha.wv.size()},
      {"bv", p.mha.bv.data(), grads.mha.bv.data(), p.mha.bv.size()},
      {"wo", p.mha.wo.data(), grads.mha.wo.data(), p.mha.wo.size()},
      {"bo", p.mha.bo.data(), grads.mha.bo.data(), p.mha.bo.size()},
      {"w1", p.ffn.w1.data(), grads.ffn.w1.data(), p.ffn.w1.size()},
      {"b1", p.ffn.b1.data(), grads.ffn.b1.data(), p.ffn.b1.size()},
      {"w2", p.ffn.w2.data(), grads.ffn.w2.data(), p.ffn.w2.size()},
      {"b2", p.ffn.b2.data(), grads.ffn.b2.data(), p.ffn.b2.size()},
      {"view", view.data(), const_cast<double*>(gin.view.data()), view.size()},
      {"refs", refs.data(), const_cast<double*>(gin.ref_tokens.data()), refs.size()},
  };
  for (const auto& b : blocks) {
    const auto r = check_gradient(b.name, b.v, b.g, b.n, loss);
    EXPECT_TRUE(testing::gradient_ok(r)) << testing::describe(r);
    if (!testing::is_key_bias(r.name)) {
      EXPECT_GT(r.analytic_norm, 0.0) << b.name;
    }
  }
}

}  // namespace
}  // namespace ecd
