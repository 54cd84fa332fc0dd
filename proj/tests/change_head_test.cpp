#include "ecd/change_head.hpp"
#include "ecd/gradcheck.hpp"
#include "testing.hpp"

#include <gtest/gtest.h>

namespace ecd {
namespace {

using testing::random_map;
using testing::random_matrix;

template <typename Scalar>
ChangeHeadParams<Scalar> random_head(Index d, Index heads, Rng& rng, bool residual) {
  auto p = ChangeHeadParams<Scalar>::random(d, heads, rng);
  for (auto* m : {&p.query_to_scene, &p.scene_to_query})
    for (auto* b : {&m->bq, &m->bk, &m->bv, &m->bo}) *b = random_matrix<Scalar>(d, 1, rng, 0.3);
  p.fuse.bias = random_matrix<Scalar>(d, 1, rng, 0.3);
  p.classify.bias = random_matrix<Scalar>(1, 1, rng, 0.3);
  p.residual = residual;
  return p;
}

TEST(DetectChange, ZeroParamsGiveBiasEverywhere) {
  Rng rng(1);
  auto p = ChangeHeadParams<float>::zeros(8, 2);
  const auto scene = random_map(8, 3, 3, rng), query = random_map(8, 3, 3, rng);
  const auto pred = detect_change(scene, query, p, 2, 0.5);
  EXPECT_TRUE(pred.logits.tokens().isZero(0));
  EXPECT_EQ(pred.mask.rows(), 6);
  EXPECT_EQ(pred.mask.cols(), 6);
  EXPECT_EQ(pred.mask.cast<int>().sum(), 36);  // sigmoid(0) = 0.5 >= 0.5
  p.classify.bias(0) = -0.25f;
  const auto neg = detect_change(scene, query, p, 2, 0.5);
  EXPECT_LT((neg.logits.tokens().array() + 0.25f).abs().maxCoeff(), 1e-7);
  EXPECT_EQ(neg.mask.cast<int>().sum(), 0);
}

TEST(DetectChange, OutputSizeIsFeatureSizeTimesPatch) {
  const auto p = ChangeHeadParams<float>::zeros(384, 6);
  const FeatureMap<float> f(384, 16, 16);
  const auto pred = detect_change(f, f, p, 14);
  EXPECT_EQ(pred.logits.channels(), 1);
  EXPECT_EQ(pred.logits.height(), 224);
  EXPECT_EQ(pred.logits.width(), 224);
  EXPECT_EQ(pred.mask.rows(), 224);
}

class HeadOracle : public ::testing::TestWithParam<bool> {};

TEST_P(HeadOracle, MatchesComposedDenseOracles) {
  Rng rng(2);
  const Index d = 8, H = 4, W = 4, P = 2;
  const auto p = random_head<float>(d, 2, rng, GetParam());
  const auto scene = random_map(d, H, W, rng), query = random_map(d, H, W, rng);
  const auto pred = detect_change(scene, query, p, P, 0.5);

  Mat<double> a = testing::attention_oracle(query.tokens(), scene.tokens(), p.query_to_scene);
  Mat<double> b = testing::attention_oracle(scene.tokens(), query.tokens(), p.scene_to_query);
  if (GetParam()) {
    a += query.tokens().cast<double>();
    b += scene.tokens().cast<double>();
  }
  FeatureMap<float> cat(2 * d, H, W);
  for (Index t = 0; t < H * W; ++t)
    for (Index c = 0; c < d; ++c) {
      cat.tokens()(t, c) = static_cast<float>(a(t, c));
      cat.tokens()(t, d + c) = static_cast<float>(b(t, c));
    }
  auto hidden = testing::conv_oracle(cat, p.fuse, 1, 1);
  hidden.tokens() = hidden.tokens().cwiseMax(0.0f);
  const auto logits = testing::conv_oracle(hidden, p.classify, 0, 0);
  for (Index y = 0; y < H * P; ++y)
    for (Index x = 0; x < W * P; ++x) {
      const double z = testing::bilinear_oracle(logits, 0, y, x, P);
      ASSERT_NEAR(pred.logits(0, y, x), z, 1e-4);
      ASSERT_NEAR(pred.probabilities(0, y, x), 1.0 / (1.0 + std::exp(-z)), 1e-4);
      ASSERT_EQ(pred.mask(y, x), pred.probabilities(0, y, x) >= 0.5f ? 1 : 0);
    }
}

INSTANTIATE_TEST_SUITE_P(Residual, HeadOracle, ::testing::Bool());

TEST(DetectChange, ProbabilitiesBoundedAndDeterministic) {
  Rng rng(3);
  const auto p = random_head<float>(6, 3, rng, false);
  const auto scene = random_map(6, 4, 4, rng, -50, 50), query = random_map(6, 4, 4, rng, -50, 50);
  const auto a = detect_change(scene, query, p, 3, 0.3);
  const auto b = detect_change(scene, query, p, 3, 0.3);
  EXPECT_EQ(a.probabilities.tokens(), b.probabilities.tokens());
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_GE(a.probabilities.tokens().minCoeff(), 0.0f);
  EXPECT_LE(a.probabilities.tokens().maxCoeff(), 1.0f);
  EXPECT_TRUE(a.probabilities.all_finite());
}

TEST(DetectChange, Errors) {
  const auto p = ChangeHeadParams<float>::zeros(4, 2);
  const FeatureMap<float> f(4, 2, 2);
  EXPECT_THROW(detect_change(f, FeatureMap<float>(4, 2, 3), p, 2), DimensionError);
  EXPECT_THROW(detect_change(f, f, p, 2, 0.0), std::invalid_argument);
  EXPECT_THROW(detect_change(f, f, p, 2, 1.0), std::invalid_argument);
}

class HeadGradient : public ::testing::TestWithParam<bool> {};

TEST_P(HeadGradient, AllBlocksMatchFiniteDifferences) {
  Rng rng(4);
  const Index d = 4;
  auto p = random_head<double>(d, 2, rng, GetParam());
  auto scene = random_map<double>(d, 3, 3, rng), query = random_map<double>(d, 3, 3, rng);
  const auto w = random_map<double>(1, 6, 6, rng);
  auto loss = [&] { return change_logits(scene, query, p, 2).tokens().cwiseProduct(w.tokens()).sum(); };
  ChangeHeadCache<double> cache;
  change_logits(scene, query, p, 2, &cache);
  auto grads = ChangeHeadParams<double>::zeros(d, 2);
  const auto gin = change_logits_backward(cache, p, w, grads);

  std::vector<std::tuple<std::string, double*, const double*, Index>> blocks;
  auto add_mha = [&](const std::string& prefix, MhaParams<double>& m, MhaParams<double>& g) {
    blocks.emplace_back(prefix + ".wq", m.wq.data(), g.wq.data(), m.wq.size());
    blocks.emplace_back(prefix + ".bq", m.bq.data(), g.bq.data(), m.bq.size());
    blocks.emplace_back(prefix + ".wk", m.wk.data(), g.wk.data(), m.wk.size());
    blocks.emplace_back(prefix + ".bk", m.bk.data(), g.bk.data(), m.bk.size());
    blocks.emplace_back(prefix + ".wv", m.wv.data(), g.wv.data(), m.wv.size());
    blocks.emplace_back(prefix + ".bv", m.bv.data(), g.bv.data(), m.bv.size());
    blocks.emplace_back(prefix + ".wo", m.wo.data(), g.wo.data(), m.wo.size());
    blocks.emplace_back(prefix + ".bo", m.bo.data(), g.bo.data(), m.bo.size());
  };
  add_mha("q2s", p.query_to_scene, grads.query_to_scene);
  add_mha("s2q", p.scene_to_query, grads.scene_to_query);
  blocks.emplace_back("fuse.w", p.fuse.weight.data(), grads.fuse.weight.data(), p.fuse.weight.size());
  blocks.emplace_back("fuse.b", p.fuse.bias.data(), grads.fuse.bias.data(), p.fuse.bias.size());
  blocks.emplace_back("cls.w", p.classify.weight.data(), grads.classify.weight.data(),
                      p.classify.weight.size());
  blocks.emplace_back("cls.b", p.classify.bias.data(), grads.classify.bias.data(), 1);
  blocks.emplace_back("scene", scene.data(), gin.scene.data(), scene.size());
  blocks.emplace_back("query", query.data(), gin.query.data(), query.size());
  for (auto& [name, v, g, n] : blocks) {
    const auto r = check_gradient(name, v, g, n, loss);
    EXPECT_TRUE(testing::gradient_ok(r)) << testing::describe(r);
    if (!testing::is_key_bias(name)) {
      EXPECT_GT(r.analytic_norm, 0.0) << name;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Residual, HeadGradient, ::testing::Bool());

}  // namespace
}  // namespace ecd
