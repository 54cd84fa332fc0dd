// Dense feature-map storage and the numeric kernels shared by every stage
// of the change-detection pipeline.
//
// A FeatureMap keeps its values as an Eigen column-major matrix of shape
// (H*W) x d. Column c is channel c laid out row-major, so the raw buffer is
// channel-major / row-major within channel, and the same matrix doubles as
// the token matrix consumed by attention layers.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecd {

using Index = Eigen::Index;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMajorMat =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

template <typename Scalar>
class FeatureMap {
 public:
  using scalar_type = Scalar;

  FeatureMap() = default;

  FeatureMap(Index channels, Index height, Index width)
      : channels_(channels),
        height_(height),
        width_(width),
        tokens_(Mat<Scalar>::Zero(height * width, channels)) {
    check_shape();
  }

  FeatureMap(Index channels, Index height, Index width, Mat<Scalar> tokens)
      : channels_(channels),
        height_(height),
        width_(width),
        tokens_(std::move(tokens)) {
    check_shape();
    if (tokens_.rows() != height_ * width_ || tokens_.cols() != channels_) {
      throw DimensionError(detail::concat(
          "token matrix is ", tokens_.rows(), "x", tokens_.cols(),
          ", expected ", height_ * width_, "x", channels_));
    }
  }

  Index channels() const { return channels_; }
  Index height() const { return height_; }
  Index width() const { return width_; }
  Index positions() const { return height_ * width_; }
  Index size() const { return tokens_.size(); }
  bool empty() const { return tokens_.size() == 0; }

  // (H*W) x d, one row per spatial position in raster order.
  const Mat<Scalar>& tokens() const { return tokens_; }
  Mat<Scalar>& tokens() { return tokens_; }

  const Scalar* data() const { return tokens_.data(); }
  Scalar* data() { return tokens_.data(); }

  Scalar& operator()(Index c, Index y, Index x) {
    return tokens_(y * width_ + x, c);
  }
  Scalar operator()(Index c, Index y, Index x) const {
    return tokens_(y * width_ + x, c);
  }

  bool same_shape(const FeatureMap& other) const {
    return channels_ == other.channels_ && height_ == other.height_ &&
           width_ == other.width_;
  }

  std::string shape_string() const {
    return detail::concat(channels_, "x", height_, "x", width_);
  }

  template <typename Other>
  FeatureMap<Other> cast() const {
    return FeatureMap<Other>(channels_, height_, width_,
                             tokens_.template cast<Other>());
  }

  // Copy of the h x w window whose top-left corner is (top, left).
  FeatureMap block(Index top, Index left, Index h, Index w) const {
    if (top < 0 || left < 0 || top + h > height_ || left + w > width_) {
      throw DimensionError(detail::concat("block (", top, ",", left, ") ", h,
                                          "x", w, " outside ", height_, "x",
                                          width_));
    }
    FeatureMap out(channels_, h, w);
    for (Index y = 0; y < h; ++y) {
      out.tokens_.middleRows(y * w, w) =
          tokens_.middleRows((top + y) * width_ + left, w);
    }
    return out;
  }

  void set_block(Index top, Index left, const FeatureMap& patch) {
    if (patch.channels_ != channels_ || top < 0 || left < 0 ||
        top + patch.height_ > height_ || left + patch.width_ > width_) {
      throw DimensionError(detail::concat("cannot place ",
                                          patch.shape_string(), " at (", top,
                                          ",", left, ") in ", shape_string()));
    }
    for (Index y = 0; y < patch.height_; ++y) {
      tokens_.middleRows((top + y) * width_ + left, patch.width_) =
          patch.tokens_.middleRows(y * patch.width_, patch.width_);
    }
  }

  void add_block(Index top, Index left, const FeatureMap& patch) {
    for (Index y = 0; y < patch.height_; ++y) {
      tokens_.middleRows((top + y) * width_ + left, patch.width_) +=
          patch.tokens_.middleRows(y * patch.width_, patch.width_);
    }
  }

  bool all_finite() const { return tokens_.allFinite(); }

 private:
  void check_shape() const {
    if (channels_ < 1 || height_ < 1 || width_ < 1) {
      throw DimensionError(detail::concat("feature map dims must be positive, got ",
                                          channels_, "x", height_, "x", width_));
    }
  }

  Index channels_ = 0;
  Index height_ = 0;
  Index width_ = 0;
  Mat<Scalar> tokens_;
};

// Patch similarities for every valid placement of a window; accumulated in
// double regardless of the feature precision so argmax decisions are stable.
struct SimilarityMap {
  Eigen::MatrixXd values;

  Index height() const { return values.rows(); }
  Index width() const { return values.cols(); }
};

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kNormEps = 1e-12;

template <typename Scalar>
FeatureMap<Scalar> l2_normalize_channels(const FeatureMap<Scalar>& f,
                                         double eps = kNormEps) {
  if (!(eps > 0)) throw std::invalid_argument("eps must be positive");
  FeatureMap<Scalar> out(f.channels(), f.height(), f.width());
  for (Index p = 0; p < f.positions(); ++p) {
    const Scalar norm = f.tokens().row(p).norm();
    if (norm >= static_cast<Scalar>(eps)) {
      out.tokens().row(p) = f.tokens().row(p) / norm;
    }
  }
  return out;
}

// Vector-Jacobian product of l2_normalize_channels. Positions that were
// zeroed by the eps guard pass no gradient.
template <typename Scalar>
FeatureMap<Scalar> l2_normalize_channels_backward(
    const FeatureMap<Scalar>& input, const FeatureMap<Scalar>& output,
    const FeatureMap<Scalar>& grad_output, double eps = kNormEps) {
  FeatureMap<Scalar> grad(input.channels(), input.height(), input.width());
  for (Index p = 0; p < input.positions(); ++p) {
    const Scalar norm = input.tokens().row(p).norm();
    if (norm < static_cast<Scalar>(eps)) continue;
    const auto y = output.tokens().row(p);
    const auto g = grad_output.tokens().row(p);
    grad.tokens().row(p) = (g - y * y.dot(g)) / norm;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Correlation

namespace detail {
template <typename Scalar>
void check_fits(const FeatureMap<Scalar>& reference,
                const FeatureMap<Scalar>& patch) {
  if (reference.channels() != patch.channels()) {
    throw DimensionError(concat("channel mismatch: reference has ",
                                reference.channels(), ", patch has ",
                                patch.channels()));
  }
  if (patch.height() > reference.height() || patch.width() > reference.width()) {
    throw DimensionError(concat("patch ", patch.height(), "x", patch.width(),
                                " exceeds reference ", reference.height(), "x",
                                reference.width()));
  }
}
}  // namespace detail

// Dot products between every reference position and every position of a
// second map: gram(i, j) = <reference[i], other[j]>, in double.
template <typename Scalar>
Eigen::MatrixXd position_gram(const FeatureMap<Scalar>& reference,
                              const FeatureMap<Scalar>& other) {
  return reference.tokens().template cast<double>() *
         other.tokens().template cast<double>().transpose();
}

// Sliding-window similarity read off a precomputed gram matrix. The window
// is the h x w block of `other` at (patch_top, patch_left); the result is
// indexed by the window's placement in the reference.
inline SimilarityMap correlate_from_gram(const Eigen::MatrixXd& gram,
                                         Index ref_height, Index ref_width,
                                         Index other_width, Index patch_top,
                                         Index patch_left, Index h, Index w) {
  SimilarityMap sim;
  sim.values = Eigen::MatrixXd::Zero(ref_height - h + 1, ref_width - w + 1);
  for (Index py = 0; py < h; ++py) {
    for (Index px = 0; px < w; ++px) {
      const Index col = (patch_top + py) * other_width + (patch_left + px);
      for (Index i = 0; i < sim.height(); ++i) {
        const Index row0 = (i + py) * ref_width + px;
        sim.values.row(i) +=
            gram.col(col).segment(row0, sim.width()).transpose();
      }
    }
  }
  return sim;
}

template <typename Scalar>
SimilarityMap correlate_valid(const FeatureMap<Scalar>& reference,
                              const FeatureMap<Scalar>& patch) {
  detail::check_fits(reference, patch);
  const Eigen::MatrixXd gram = position_gram(reference, patch);
  return correlate_from_gram(gram, reference.height(), reference.width(),
                             patch.width(), 0, 0, patch.height(),
                             patch.width());
}

// ---------------------------------------------------------------------------
// Softmax

template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const auto mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

template <typename Derived>
Mat<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  Mat<typename Derived::Scalar> out = m;
  softmax_rows_inplace(out);
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct Padding {
  Index top = 0;
  Index left = 0;

  static Padding same(Index kernel_h, Index kernel_w) {
    if (kernel_h % 2 == 0 || kernel_w % 2 == 0) {
      throw DimensionError(detail::concat("same padding needs odd kernels, got ",
                                          kernel_h, "x", kernel_w));
    }
    return {(kernel_h - 1) / 2, (kernel_w - 1) / 2};
  }
};

// Weights are out x (in * kh * kw); column index is (ci * kh + ky) * kw + kx.
template <typename Scalar>
struct Conv2dParams {
  Mat<Scalar> weight;
  Vec<Scalar> bias;
  Index kernel_h = 1;
  Index kernel_w = 1;

  Conv2dParams() = default;
  Conv2dParams(Index out, Index in, Index kh, Index kw)
      : weight(Mat<Scalar>::Zero(out, in * kh * kw)),
        bias(Vec<Scalar>::Zero(out)),
        kernel_h(kh),
        kernel_w(kw) {}

  Index out_channels() const { return weight.rows(); }
  Index in_channels() const { return weight.cols() / (kernel_h * kernel_w); }

  Scalar& at(Index o, Index i, Index ky, Index kx) {
    return weight(o, (i * kernel_h + ky) * kernel_w + kx);
  }
  Scalar at(Index o, Index i, Index ky, Index kx) const {
    return weight(o, (i * kernel_h + ky) * kernel_w + kx);
  }

  template <typename Other>
  Conv2dParams<Other> cast() const {
    Conv2dParams<Other> out;
    out.weight = weight.template cast<Other>();
    out.bias = bias.template cast<Other>();
    out.kernel_h = kernel_h;
    out.kernel_w = kernel_w;
    return out;
  }
};

namespace detail {
// Unrolled input windows: row = output position, column matches the weight
// layout. Out-of-range taps read zero.
template <typename Scalar>
Mat<Scalar> im2col(const FeatureMap<Scalar>& f, Index kh, Index kw,
                   Padding pad, Index out_h, Index out_w) {
  const Index cin = f.channels();
  Mat<Scalar> cols = Mat<Scalar>::Zero(out_h * out_w, cin * kh * kw);
  for (Index ci = 0; ci < cin; ++ci) {
    const Scalar* src = f.tokens().col(ci).data();
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const Index col = (ci * kh + ky) * kw + kx;
        Scalar* dst = cols.col(col).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy + ky - pad.top;
          if (iy < 0 || iy >= f.height()) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox + kx - pad.left;
            if (ix < 0 || ix >= f.width()) continue;
            dst[oy * out_w + ox] = src[iy * f.width() + ix];
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im_add(const Mat<Scalar>& cols, Index kh, Index kw, Padding pad,
                Index out_h, Index out_w, FeatureMap<Scalar>& grad) {
  for (Index ci = 0; ci < grad.channels(); ++ci) {
    Scalar* dst = grad.tokens().col(ci).data();
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const Scalar* src = cols.col((ci * kh + ky) * kw + kx).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy + ky - pad.top;
          if (iy < 0 || iy >= grad.height()) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox + kx - pad.left;
            if (ix < 0 || ix >= grad.width()) continue;
            dst[iy * grad.width() + ix] += src[oy * out_w + ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void check_conv(const FeatureMap<Scalar>& f, const Conv2dParams<Scalar>& k,
                Padding pad) {
  if (k.in_channels() != f.channels()) {
    throw DimensionError(concat("conv expects ", k.in_channels(),
                                " input channels, got ", f.channels()));
  }
  if (k.bias.size() != k.out_channels()) {
    throw DimensionError(concat("conv bias has ", k.bias.size(),
                                " entries for ", k.out_channels(), " outputs"));
  }
  if (pad.top < 0 || pad.left < 0) {
    throw DimensionError("negative padding");
  }
  if (f.height() + 2 * pad.top < k.kernel_h ||
      f.width() + 2 * pad.left < k.kernel_w) {
    throw DimensionError("kernel larger than padded input");
  }
}
}  // namespace detail

template <typename Scalar>
FeatureMap<Scalar> conv2d(const FeatureMap<Scalar>& f,
                          const Conv2dParams<Scalar>& kernel, Padding pad) {
  detail::check_conv(f, kernel, pad);
  const Index out_h = f.height() + 2 * pad.top - kernel.kernel_h + 1;
  const Index out_w = f.width() + 2 * pad.left - kernel.kernel_w + 1;
  const Mat<Scalar> cols =
      detail::im2col(f, kernel.kernel_h, kernel.kernel_w, pad, out_h, out_w);
  Mat<Scalar> out = cols * kernel.weight.transpose();
  out.rowwise() += kernel.bias.transpose();
  return FeatureMap<Scalar>(kernel.out_channels(), out_h, out_w, std::move(out));
}

// Accumulates weight/bias gradients into `grads` and returns the gradient
// with respect to the input map (an all-zero map when `input_grad` is false).
template <typename Scalar>
FeatureMap<Scalar> conv2d_backward(const FeatureMap<Scalar>& input,
                                   const Conv2dParams<Scalar>& kernel,
                                   Padding pad,
                                   const FeatureMap<Scalar>& grad_output,
                                   Conv2dParams<Scalar>& grads,
                                   bool input_grad = true) {
  const Index out_h = grad_output.height();
  const Index out_w = grad_output.width();
  const Mat<Scalar> cols = detail::im2col(input, kernel.kernel_h,
                                          kernel.kernel_w, pad, out_h, out_w);
  grads.weight.noalias() += grad_output.tokens().transpose() * cols;
  grads.bias += grad_output.tokens().colwise().sum().transpose();
  if (!input_grad) {
    return FeatureMap<Scalar>(input.channels(), input.height(), input.width());
  }
  const Mat<Scalar> grad_cols = grad_output.tokens() * kernel.weight;
  FeatureMap<Scalar> grad_input(input.channels(), input.height(),
                                input.width());
  detail::col2im_add(grad_cols, kernel.kernel_h, kernel.kernel_w, pad, out_h,
                     out_w, grad_input);
  return grad_input;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling, half-pixel centers, no corner alignment. Sample
// coordinates below zero clamp to the first row/column.

// Rows of the returned (in*factor) x in matrix hold interpolation weights.
template <typename Scalar>
Mat<Scalar> bilinear_weights(Index in, Index factor) {
  const Index out = in * factor;
  Mat<Scalar> a = Mat<Scalar>::Zero(out, in);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    const double t = src - static_cast<double>(i0);
    a(o, i0) += static_cast<Scalar>(1.0 - t);
    a(o, i1) += static_cast<Scalar>(t);
  }
  return a;
}

template <typename Scalar>
FeatureMap<Scalar> upsample_bilinear(const FeatureMap<Scalar>& f, Index factor) {
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  if (factor == 1) return f;
  const Mat<Scalar> ah = bilinear_weights<Scalar>(f.height(), factor);
  const Mat<Scalar> aw = bilinear_weights<Scalar>(f.width(), factor);
  const Index oh = f.height() * factor;
  const Index ow = f.width() * factor;
  FeatureMap<Scalar> out(f.channels(), oh, ow);
  for (Index c = 0; c < f.channels(); ++c) {
    Eigen::Map<const RowMajorMat<Scalar>> in(f.tokens().col(c).data(),
                                             f.height(), f.width());
    Eigen::Map<RowMajorMat<Scalar>> dst(out.tokens().col(c).data(), oh, ow);
    dst.noalias() = ah * in * aw.transpose();
  }
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> upsample_bilinear_backward(
    const FeatureMap<Scalar>& grad_output, Index in_h, Index in_w,
    Index factor) {
  if (factor == 1) return grad_output;
  const Mat<Scalar> ah = bilinear_weights<Scalar>(in_h, factor);
  const Mat<Scalar> aw = bilinear_weights<Scalar>(in_w, factor);
  FeatureMap<Scalar> grad(grad_output.channels(), in_h, in_w);
  for (Index c = 0; c < grad.channels(); ++c) {
    Eigen::Map<const RowMajorMat<Scalar>> g(grad_output.tokens().col(c).data(),
                                            grad_output.height(),
                                            grad_output.width());
    Eigen::Map<RowMajorMat<Scalar>> dst(grad.tokens().col(c).data(), in_h, in_w);
    dst.noalias() = ah.transpose() * g * aw;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename Scalar>
FeatureMap<Scalar> relu(FeatureMap<Scalar> f) {
  f.tokens() = f.tokens().cwiseMax(Scalar(0));
  return f;
}

// Gradient of relu given its output (zero where the output is zero).
template <typename Scalar>
FeatureMap<Scalar> relu_backward(const FeatureMap<Scalar>& output,
                                 FeatureMap<Scalar> grad) {
  grad.tokens() =
      (output.tokens().array() > Scalar(0)).select(grad.tokens(), Scalar(0));
  return grad;
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  return z >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-z))
                : std::exp(z) / (Scalar(1) + std::exp(z));
}

}  // namespace ecd
