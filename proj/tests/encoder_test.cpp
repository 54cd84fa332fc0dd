#include "ecd/encoder.hpp"
#include "ecd/gradcheck.hpp"
#include "testing.hpp"

#include <gtest/gtest.h>

namespace ecd {
namespace {

Image random_image(Index h, Index w, Rng& rng) {
  Image img(h, w);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) img.at(c, y, x) = static_cast<float>(rng.uniform());
  return img;
}

TEST(Encoder, ShapeArithmetic) {
  Rng rng(1);
  const Encoder enc({14, 384, 3});
  const auto f = enc.encode(random_image(28, 28, rng));
  EXPECT_EQ(f.channels(), 384);
  EXPECT_EQ(f.height(), 2);
  EXPECT_EQ(f.width(), 2);
}

TEST(Encoder, Deterministic) {
  Rng rng(2);
  const Image img = random_image(28, 28, rng);
  const auto a = Encoder({14, 384, 3}).encode(img);
  const auto b = Encoder({14, 384, 3}).encode(img);
  EXPECT_EQ(a.tokens(), b.tokens());
  const auto c = Encoder({14, 384, 4}).encode(img);
  EXPECT_NE(a.tokens(), c.tokens());
}

TEST(Encoder, OnePixelTouchesOnePatch) {
  Rng rng(3);
  const Encoder enc({4, 16, 9});
  Image img = random_image(12, 16, rng);
  const auto before = enc.encode(img);
  img.at(1, 6, 9) += 0.5f;  // patch row 1, col 2
  const auto after = enc.encode(img);
  for (Index y = 0; y < 3; ++y)
    for (Index x = 0; x < 4; ++x) {
      const bool same = before.tokens().row(y * 4 + x) == after.tokens().row(y * 4 + x);
      EXPECT_EQ(same, !(y == 1 && x == 2)) << y << "," << x;
    }
}

TEST(Encoder, PatchProjectionOracle) {
  Rng rng(4);
  const Encoder enc({2, 5, 11});
  const Image img = random_image(4, 6, rng);
  const auto f = enc.encode(img);
  for (Index gy = 0; gy < 2; ++gy)
    for (Index gx = 0; gx < 3; ++gx)
      for (Index o = 0; o < 5; ++o) {
        double s = 0;
        Index k = 0;
        for (Index c = 0; c < 3; ++c)
          for (Index py = 0; py < 2; ++py)
            for (Index px = 0; px < 2; ++px)
              s += double(enc.weights()(o, k++)) * img.at(c, gy * 2 + py, gx * 2 + px);
        EXPECT_NEAR(f(o, gy, gx), s, 1e-5);
      }
}

TEST(Encoder, WeightScale) {
  const Encoder enc({14, 384, 0});
  const double n = static_cast<double>(enc.weights().size());
  const double mean = enc.weights().cast<double>().sum() / n;
  const double var = (enc.weights().cast<double>().array() - mean).square().sum() / n;
  EXPECT_NEAR(mean, 0.0, 2e-3);
  EXPECT_NEAR(std::sqrt(var), 1.0 / std::sqrt(3.0 * 14 * 14), 1e-3);
}

TEST(Encoder, RejectsIndivisibleImage) {
  Rng rng(5);
  EXPECT_THROW(Encoder({14, 8, 0}).encode(random_image(28, 30, rng)), DimensionError);
  EXPECT_THROW(Encoder({0, 8, 0}), std::invalid_argument);
}

TEST(Project, IdentityThenZeroGivesZero) {
  Rng rng(6);
  auto head = ProjectionHead<float>::zeros(6);
  for (Index c = 0; c < 6; ++c) head.conv1.at(c, c, 2, 2) = 1;
  const auto out = project(testing::random_map(6, 4, 4, rng), head);
  EXPECT_TRUE(out.tokens().isZero(0));
  EXPECT_TRUE(out.all_finite());
}

TEST(Project, RandomHeadYieldsUnitOrZeroPositions) {
  Rng rng(7);
  const auto head = ProjectionHead<float>::random(384, rng);
  const auto out = project(testing::random_map(384, 4, 4, rng), head);
  for (Index p = 0; p < out.positions(); ++p) {
    const double n = out.tokens().row(p).cast<double>().norm();
    EXPECT_TRUE(n == 0.0 || std::abs(n - 1.0) <= 1e-6) << n;
  }
}

TEST(Project, PreservesShape) {
  Rng rng(8);
  const auto head = ProjectionHead<float>::random(384, rng);
  const auto out = project(FeatureMap<float>(384, 16, 16), head);
  EXPECT_EQ(out.channels(), 384);
  EXPECT_EQ(out.height(), 16);
  EXPECT_EQ(out.width(), 16);
  EXPECT_THROW(project(FeatureMap<float>(5, 4, 4), head), DimensionError);
}

class ProjectGradient : public ::testing::TestWithParam<bool> {};

TEST_P(ProjectGradient, MatchesFiniteDifferences) {
  Rng rng(9);
  auto head = ProjectionHead<double>::random(4, rng);
  head.relu_after_second = GetParam();
  for (auto* conv : {&head.conv1, &head.conv2})
    conv->bias = testing::random_matrix<double>(4, 1, rng, 0.2);
  const auto x = testing::random_map<double>(4, 5, 4, rng);
  const auto w = testing::random_map<double>(4, 5, 4, rng);
  auto loss = [&] { return project(x, head).tokens().cwiseProduct(w.tokens()).sum(); };
  ProjectionCache<double> cache;
  project(x, head, &cache);
  auto grads = ProjectionHead<double>::zeros(4);
  project_backward<double>(cache, head, w, nullptr, grads);
  for (auto [p, g] : {std::pair{&head.conv1, &grads.conv1}, std::pair{&head.conv2, &grads.conv2}}) {
    EXPECT_LT(check_gradient("w", p->weight.data(), g->weight.data(), p->weight.size(), loss)
                  .relative_error,
              1e-4);
    EXPECT_LT(
        check_gradient("b", p->bias.data(), g->bias.data(), p->bias.size(), loss).relative_error,
        1e-4);
  }
}

INSTANTIATE_TEST_SUITE_P(ReluAfterSecond, ProjectGradient, ::testing::Bool());

}  // namespace
}  // namespace ecd
