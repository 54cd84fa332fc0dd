// Frozen patch encoder and the trainable projection head shared by query
// and reference features.
#pragma once

#include "ecd/random.hpp"
#include "ecd/tensor.hpp"

#include <cstdint>

namespace ecd {

// RGB image, values in [0, 1], stored channel-major like a feature map.
class Image {
 public:
  Image() = default;
  Image(Index height, Index width) : pixels_(3, height, width) {}
  explicit Image(FeatureMap<float> pixels) : pixels_(std::move(pixels)) {
    if (pixels_.channels() != 3) {
      throw DimensionError("image must have 3 channels");
    }
  }

  Index height() const { return pixels_.height(); }
  Index width() const { return pixels_.width(); }
  float& at(Index c, Index y, Index x) { return pixels_(c, y, x); }
  float at(Index c, Index y, Index x) const { return pixels_(c, y, x); }
  const FeatureMap<float>& pixels() const { return pixels_; }

  bool operator==(const Image& other) const {
    return pixels_.same_shape(other.pixels_) &&
           pixels_.tokens() == other.pixels_.tokens();
  }

 private:
  FeatureMap<float> pixels_;
};

struct EncoderConfig {
  Index patch_size = 14;
  Index feature_dim = 384;
  std::uint64_t seed = 0;
};

// Stand-in for a frozen ViT backbone: every non-overlapping P x P x 3 patch
// is flattened (channel, row, col order) and multiplied by a fixed Gaussian
// matrix with standard deviation 1/sqrt(3 P^2).
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg) : cfg_(cfg) {
    if (cfg_.patch_size < 1 || cfg_.feature_dim < 1) {
      throw std::invalid_argument("encoder patch size and dim must be >= 1");
    }
    const Index in = 3 * cfg_.patch_size * cfg_.patch_size;
    const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
    Rng rng(cfg_.seed);
    weights_.resize(cfg_.feature_dim, in);
    for (Index r = 0; r < weights_.rows(); ++r) {
      for (Index c = 0; c < weights_.cols(); ++c) {
        weights_(r, c) = static_cast<float>(rng.normal(0.0, stddev));
      }
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  const Mat<float>& weights() const { return weights_; }

  FeatureMap<float> encode(const Image& img) const {
    const Index p = cfg_.patch_size;
    if (img.height() % p != 0 || img.width() % p != 0) {
      throw DimensionError(detail::concat("image ", img.height(), "x",
                                          img.width(),
                                          " not divisible by patch size ", p));
    }
    const Index h = img.height() / p;
    const Index w = img.width() / p;
    Mat<float> patches(h * w, 3 * p * p);
    for (Index gy = 0; gy < h; ++gy) {
      for (Index gx = 0; gx < w; ++gx) {
        Index k = 0;
        for (Index c = 0; c < 3; ++c) {
          for (Index py = 0; py < p; ++py) {
            for (Index px = 0; px < p; ++px) {
              patches(gy * w + gx, k++) = img.at(c, gy * p + py, gx * p + px);
            }
          }
        }
      }
    }
    return FeatureMap<float>(cfg_.feature_dim, h, w,
                             patches * weights_.transpose());
  }

 private:
  EncoderConfig cfg_;
  Mat<float> weights_;
};

// conv5x5 -> ReLU -> conv5x5 -> ReLU -> per-position l2 normalization.
template <typename Scalar>
struct ProjectionHead {
  Conv2dParams<Scalar> conv1;
  Conv2dParams<Scalar> conv2;
  bool relu_after_second = true;

  static constexpr Index kKernel = 5;

  static ProjectionHead zeros(Index d) {
    ProjectionHead h;
    h.conv1 = Conv2dParams<Scalar>(d, d, kKernel, kKernel);
    h.conv2 = Conv2dParams<Scalar>(d, d, kKernel, kKernel);
    return h;
  }

  // He-normal weights, zero biases.
  static ProjectionHead random(Index d, Rng& rng) {
    ProjectionHead h = zeros(d);
    const double stddev = std::sqrt(2.0 / static_cast<double>(d * kKernel * kKernel));
    for (auto* conv : {&h.conv1, &h.conv2}) {
      for (Index i = 0; i < conv->weight.size(); ++i) {
        conv->weight.data()[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
      }
    }
    return h;
  }

  Index dim() const { return conv1.out_channels(); }

  template <typename Other>
  ProjectionHead<Other> cast() const {
    ProjectionHead<Other> out;
    out.conv1 = conv1.template cast<Other>();
    out.conv2 = conv2.template cast<Other>();
    out.relu_after_second = relu_after_second;
    return out;
  }
};

template <typename Scalar>
struct ProjectionCache {
  FeatureMap<Scalar> input;
  FeatureMap<Scalar> hidden;      // after first conv + ReLU
  FeatureMap<Scalar> unnormalized;  // after second conv (+ ReLU)
  FeatureMap<Scalar> output;      // normalized
};

template <typename Scalar>
FeatureMap<Scalar> project(const FeatureMap<Scalar>& f,
                           const ProjectionHead<Scalar>& head,
                           ProjectionCache<Scalar>* cache = nullptr) {
  if (f.channels() != head.conv1.in_channels()) {
    throw DimensionError(detail::concat("projection head expects ",
                                        head.conv1.in_channels(),
                                        " channels, got ", f.channels()));
  }
  const Padding pad = Padding::same(head.conv1.kernel_h, head.conv1.kernel_w);
  FeatureMap<Scalar> hidden = relu(conv2d(f, head.conv1, pad));
  FeatureMap<Scalar> pre = conv2d(hidden, head.conv2, pad);
  if (head.relu_after_second) pre = relu(std::move(pre));
  FeatureMap<Scalar> out = l2_normalize_channels(pre);
  if (cache) {
    cache->input = f;
    cache->hidden = std::move(hidden);
    cache->unnormalized = std::move(pre);
    cache->output = out;
  }
  return out;
}

// Accumulates head gradients. `grad_output` is w.r.t. the normalized
// features; `grad_unnormalized` (may be empty) is w.r.t. the pre-norm map,
// used when downstream stages consume unnormalized features.
template <typename Scalar>
void project_backward(const ProjectionCache<Scalar>& cache,
                      const ProjectionHead<Scalar>& head,
                      const FeatureMap<Scalar>& grad_output,
                      const FeatureMap<Scalar>* grad_unnormalized,
                      ProjectionHead<Scalar>& grads) {
  const Padding pad = Padding::same(head.conv1.kernel_h, head.conv1.kernel_w);
  FeatureMap<Scalar> g = l2_normalize_channels_backward(
      cache.unnormalized, cache.output, grad_output);
  if (grad_unnormalized) g.tokens() += grad_unnormalized->tokens();
  if (head.relu_after_second) g = relu_backward(cache.unnormalized, std::move(g));
  g = conv2d_backward(cache.hidden, head.conv2, pad, g, grads.conv2);
  g = relu_backward(cache.hidden, std::move(g));
  conv2d_backward(cache.input, head.conv1, pad, g, grads.conv1, false);
}

}  // namespace ecd
