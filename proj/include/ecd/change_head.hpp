// Change detection head: bidirectional cross-attention between the
// reconstructed reference scene and the query, channel concatenation,
// conv3x3 (2d -> d, ReLU), conv1x1 (d -> 1), bilinear upsampling of the
// logits, sigmoid, threshold.
#pragma once

#include "ecd/attention.hpp"
#include "ecd/tensor.hpp"

#include <cstdint>

namespace ecd {

// Binary mask, 1 = change.
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct ChangeHeadParams {
  MhaParams<Scalar> query_to_scene;  // query tokens attend into the scene
  MhaParams<Scalar> scene_to_query;  // scene tokens attend into the query
  Conv2dParams<Scalar> fuse;         // 3x3, 2d -> d
  Conv2dParams<Scalar> classify;     // 1x1, d -> 1
  // Adds each attention block's query input to its output.
  bool residual = false;

  Index dim() const { return fuse.out_channels(); }

  static ChangeHeadParams zeros(Index d, Index heads) {
    return {MhaParams<Scalar>::zeros(d, heads), MhaParams<Scalar>::zeros(d, heads),
            Conv2dParams<Scalar>(d, 2 * d, 3, 3), Conv2dParams<Scalar>(1, d, 1, 1)};
  }

  static ChangeHeadParams random(Index d, Index heads, Rng& rng) {
    ChangeHeadParams p;
    p.query_to_scene = MhaParams<Scalar>::random(d, heads, rng);
    p.scene_to_query = MhaParams<Scalar>::random(d, heads, rng);
    p.fuse = Conv2dParams<Scalar>(d, 2 * d, 3, 3);
    p.classify = Conv2dParams<Scalar>(1, d, 1, 1);
    const double s1 = std::sqrt(2.0 / static_cast<double>(2 * d * 9));
    for (Index i = 0; i < p.fuse.weight.size(); ++i) {
      p.fuse.weight.data()[i] = static_cast<Scalar>(rng.normal(0.0, s1));
    }
    const double s2 = std::sqrt(1.0 / static_cast<double>(d));
    for (Index i = 0; i < p.classify.weight.size(); ++i) {
      p.classify.weight.data()[i] = static_cast<Scalar>(rng.normal(0.0, s2));
    }
    return p;
  }

  template <typename Other>
  ChangeHeadParams<Other> cast() const {
    return {query_to_scene.template cast<Other>(),
            scene_to_query.template cast<Other>(), fuse.template cast<Other>(),
            classify.template cast<Other>(), residual};
  }
};

template <typename Scalar>
struct ChangePrediction {
  FeatureMap<Scalar> logits;         // 1 x (P*H) x (P*W)
  FeatureMap<Scalar> probabilities;  // sigmoid(logits)
  Mask mask;                         // probabilities >= threshold
};

template <typename Scalar>
struct ChangeHeadCache {
  MhaCache<Scalar> query_to_scene;
  MhaCache<Scalar> scene_to_query;
  FeatureMap<Scalar> fused_input;  // 2d channels
  FeatureMap<Scalar> hidden;       // after conv3x3 + ReLU
  Index height = 0;
  Index width = 0;
  Index up_factor = 1;
};

// Logits at pixel resolution (before the sigmoid).
template <typename Scalar>
FeatureMap<Scalar> change_logits(const FeatureMap<Scalar>& scene,
                                 const FeatureMap<Scalar>& query,
                                 const ChangeHeadParams<Scalar>& p,
                                 Index up_factor,
                                 ChangeHeadCache<Scalar>* cache = nullptr) {
  if (!scene.same_shape(query)) {
    throw DimensionError(detail::concat("scene ", scene.shape_string(),
                                        " vs query ", query.shape_string()));
  }
  if (up_factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  const Index d = query.channels();
  Mat<Scalar> a = mha_forward(query.tokens(), scene.tokens(), p.query_to_scene,
                              cache ? &cache->query_to_scene : nullptr);
  Mat<Scalar> b = mha_forward(scene.tokens(), query.tokens(), p.scene_to_query,
                              cache ? &cache->scene_to_query : nullptr);
  if (p.residual) {
    a += query.tokens();
    b += scene.tokens();
  }
  Mat<Scalar> cat(query.positions(), 2 * d);
  cat << a, b;
  FeatureMap<Scalar> fused(2 * d, query.height(), query.width(), std::move(cat));
  FeatureMap<Scalar> hidden = relu(conv2d(fused, p.fuse, Padding::same(3, 3)));
  FeatureMap<Scalar> logits = conv2d(hidden, p.classify, Padding{0, 0});
  if (cache) {
    cache->fused_input = std::move(fused);
    cache->hidden = std::move(hidden);
    cache->height = query.height();
    cache->width = query.width();
    cache->up_factor = up_factor;
  }
  return upsample_bilinear(logits, up_factor);
}

template <typename Scalar>
ChangePrediction<Scalar> predict_from_logits(FeatureMap<Scalar> logits,
                                             double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument(detail::concat("threshold ", threshold,
                                               " outside (0, 1)"));
  }
  ChangePrediction<Scalar> pred;
  pred.probabilities = logits;
  pred.probabilities.tokens() =
      logits.tokens().unaryExpr([](Scalar z) { return sigmoid(z); });
  pred.mask.resize(logits.height(), logits.width());
  for (Index y = 0; y < logits.height(); ++y) {
    for (Index x = 0; x < logits.width(); ++x) {
      pred.mask(y, x) =
          pred.probabilities(0, y, x) >= static_cast<Scalar>(threshold) ? 1 : 0;
    }
  }
  pred.logits = std::move(logits);
  return pred;
}

template <typename Scalar>
ChangePrediction<Scalar> detect_change(const FeatureMap<Scalar>& scene,
                                       const FeatureMap<Scalar>& query,
                                       const ChangeHeadParams<Scalar>& p,
                                       Index up_factor, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument(detail::concat("threshold ", threshold,
                                               " outside (0, 1)"));
  }
  return predict_from_logits(change_logits(scene, query, p, up_factor), threshold);
}

template <typename Scalar>
struct ChangeHeadInputGrads {
  FeatureMap<Scalar> scene;
  FeatureMap<Scalar> query;
};

// `grad_logits` is w.r.t. the upsampled logits.
template <typename Scalar>
ChangeHeadInputGrads<Scalar> change_logits_backward(
    const ChangeHeadCache<Scalar>& c, const ChangeHeadParams<Scalar>& p,
    const FeatureMap<Scalar>& grad_logits, ChangeHeadParams<Scalar>& grads) {
  const Index d = p.dim();
  FeatureMap<Scalar> g =
      upsample_bilinear_backward(grad_logits, c.height, c.width, c.up_factor);
  g = conv2d_backward(c.hidden, p.classify, Padding{0, 0}, g, grads.classify);
  g = relu_backward(c.hidden, std::move(g));
  g = conv2d_backward(c.fused_input, p.fuse, Padding::same(3, 3), g, grads.fuse);
  const Mat<Scalar> ga = g.tokens().leftCols(d);
  const Mat<Scalar> gb = g.tokens().rightCols(d);
  const MhaInputGrads<Scalar> a =
      mha_backward(c.query_to_scene, p.query_to_scene, ga, grads.query_to_scene);
  const MhaInputGrads<Scalar> b =
      mha_backward(c.scene_to_query, p.scene_to_query, gb, grads.scene_to_query);
  ChangeHeadInputGrads<Scalar> out;
  out.query = FeatureMap<Scalar>(d, c.height, c.width, a.query + b.kv);
  out.scene = FeatureMap<Scalar>(d, c.height, c.width, a.kv + b.query);
  if (p.residual) {
    out.query.tokens() += ga;
    out.scene.tokens() += gb;
  }
  return out;
}

}  // namespace ecd
