// Multi-head scaled dot-product attention, token-wise feed-forward network
// and counter-keyed dropout, each with an explicit backward pass.
//
// Tokens are rows: an (T x d) matrix holds T tokens of width d. Affine maps
// follow y = x W^T + b with W stored (out x in).
#pragma once

#include "ecd/random.hpp"
#include "ecd/tensor.hpp"

#include <cstdint>
#include <vector>

namespace ecd {

template <typename Scalar>
struct MhaParams {
  Mat<Scalar> wq, wk, wv, wo;
  Vec<Scalar> bq, bk, bv, bo;
  Index heads = 1;

  Index dim() const { return wq.rows(); }
  Index head_dim() const { return dim() / heads; }

  static MhaParams zeros(Index d, Index heads) {
    if (heads < 1 || d % heads != 0) {
      throw DimensionError(detail::concat("dim ", d,
                                          " not divisible by head count ", heads));
    }
    MhaParams p;
    p.heads = heads;
    for (auto* w : {&p.wq, &p.wk, &p.wv, &p.wo}) *w = Mat<Scalar>::Zero(d, d);
    for (auto* b : {&p.bq, &p.bk, &p.bv, &p.bo}) *b = Vec<Scalar>::Zero(d);
    return p;
  }

  // Xavier-uniform weights, zero biases.
  static MhaParams random(Index d, Index heads, Rng& rng) {
    MhaParams p = zeros(d, heads);
    const double bound = std::sqrt(6.0 / static_cast<double>(2 * d));
    for (auto* w : {&p.wq, &p.wk, &p.wv, &p.wo}) {
      for (Index i = 0; i < w->size(); ++i) {
        w->data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
      }
    }
    return p;
  }

  template <typename Other>
  MhaParams<Other> cast() const {
    MhaParams<Other> o;
    o.heads = heads;
    o.wq = wq.template cast<Other>();
    o.wk = wk.template cast<Other>();
    o.wv = wv.template cast<Other>();
    o.wo = wo.template cast<Other>();
    o.bq = bq.template cast<Other>();
    o.bk = bk.template cast<Other>();
    o.bv = bv.template cast<Other>();
    o.bo = bo.template cast<Other>();
    return o;
  }
};

template <typename Scalar>
struct MhaCache {
  Mat<Scalar> query_tokens;
  Mat<Scalar> kv_tokens;
  Mat<Scalar> q, k, v;
  std::vector<Mat<Scalar>> weights;  // per head, Tq x Tkv, rows sum to 1
  Mat<Scalar> context;               // concatenated head outputs, pre output projection
};

template <typename Scalar>
Mat<Scalar> mha_forward(const Mat<Scalar>& query_tokens,
                        const Mat<Scalar>& kv_tokens,
                        const MhaParams<Scalar>& p,
                        MhaCache<Scalar>* cache = nullptr) {
  const Index d = p.dim();
  if (query_tokens.cols() != d || kv_tokens.cols() != d) {
    throw DimensionError(detail::concat("attention dim ", d, " vs tokens ",
                                        query_tokens.cols(), "/",
                                        kv_tokens.cols()));
  }
  if (kv_tokens.rows() == 0) throw DimensionError("no key/value tokens");
  const Index dh = p.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Mat<Scalar> q = query_tokens * p.wq.transpose();
  q.rowwise() += p.bq.transpose();
  Mat<Scalar> k = kv_tokens * p.wk.transpose();
  k.rowwise() += p.bk.transpose();
  Mat<Scalar> v = kv_tokens * p.wv.transpose();
  v.rowwise() += p.bv.transpose();

  Mat<Scalar> context(query_tokens.rows(), d);
  std::vector<Mat<Scalar>> weights;
  weights.reserve(static_cast<std::size_t>(p.heads));
  for (Index h = 0; h < p.heads; ++h) {
    Mat<Scalar> a = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    softmax_rows_inplace(a);
    context.middleCols(h * dh, dh).noalias() = a * v.middleCols(h * dh, dh);
    weights.push_back(std::move(a));
  }
  Mat<Scalar> out = context * p.wo.transpose();
  out.rowwise() += p.bo.transpose();
  if (cache) {
    cache->query_tokens = query_tokens;
    cache->kv_tokens = kv_tokens;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->weights = std::move(weights);
    cache->context = std::move(context);
  }
  return out;
}

template <typename Scalar>
struct MhaInputGrads {
  Mat<Scalar> query;
  Mat<Scalar> kv;
};

// Accumulates parameter gradients into `grads`.
template <typename Scalar>
MhaInputGrads<Scalar> mha_backward(const MhaCache<Scalar>& c,
                                   const MhaParams<Scalar>& p,
                                   const Mat<Scalar>& grad_out,
                                   MhaParams<Scalar>& grads) {
  const Index dh = p.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  grads.wo.noalias() += grad_out.transpose() * c.context;
  grads.bo += grad_out.colwise().sum().transpose();
  const Mat<Scalar> grad_context = grad_out * p.wo;

  Mat<Scalar> gq(c.q.rows(), c.q.cols());
  Mat<Scalar> gk(c.k.rows(), c.k.cols());
  Mat<Scalar> gv(c.v.rows(), c.v.cols());
  for (Index h = 0; h < p.heads; ++h) {
    const Mat<Scalar>& a = c.weights[static_cast<std::size_t>(h)];
    const auto go = grad_context.middleCols(h * dh, dh);
    gv.middleCols(h * dh, dh).noalias() = a.transpose() * go;
    const Mat<Scalar> ga = go * c.v.middleCols(h * dh, dh).transpose();
    // softmax Jacobian, row by row: a * (ga - <ga, a>)
    const Vec<Scalar> inner = (ga.array() * a.array()).rowwise().sum();
    Mat<Scalar> gs = a.array() * (ga.colwise() - inner).array();
    gs *= scale;
    gq.middleCols(h * dh, dh).noalias() = gs * c.k.middleCols(h * dh, dh);
    gk.middleCols(h * dh, dh).noalias() = gs.transpose() * c.q.middleCols(h * dh, dh);
  }

  grads.wq.noalias() += gq.transpose() * c.query_tokens;
  grads.bq += gq.colwise().sum().transpose();
  grads.wk.noalias() += gk.transpose() * c.kv_tokens;
  grads.bk += gk.colwise().sum().transpose();
  grads.wv.noalias() += gv.transpose() * c.kv_tokens;
  grads.bv += gv.colwise().sum().transpose();

  MhaInputGrads<Scalar> in;
  in.query = gq * p.wq;
  in.kv = gk * p.wk + gv * p.wv;
  return in;
}

// ---------------------------------------------------------------------------
// Dropout keyed by (seed, step, stream, element): the same key always drops
// the same elements, so training runs replay bit-for-bit.

struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t stream = 0;
};

// Multiplicative mask: 0 for dropped elements, 1/(1-rate) for kept ones.
template <typename Scalar>
Mat<Scalar> dropout_mask(Index rows, Index cols, double rate, DropoutKey key) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout rate must be in [0, 1)");
  }
  Mat<Scalar> mask(rows, cols);
  const Scalar keep = static_cast<Scalar>(1.0 / (1.0 - rate));
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const double u = counter_uniform(key.seed, key.step, key.stream,
                                       static_cast<std::uint64_t>(r * cols + c));
      mask(r, c) = u < rate ? Scalar(0) : keep;
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Two-layer token-wise feed-forward network with ReLU between the layers.

template <typename Scalar>
struct FfnParams {
  Mat<Scalar> w1;  // hidden x d
  Vec<Scalar> b1;
  Mat<Scalar> w2;  // d x hidden
  Vec<Scalar> b2;

  Index dim() const { return w1.cols(); }
  Index hidden() const { return w1.rows(); }

  static FfnParams zeros(Index d, Index hidden) {
    return {Mat<Scalar>::Zero(hidden, d), Vec<Scalar>::Zero(hidden),
            Mat<Scalar>::Zero(d, hidden), Vec<Scalar>::Zero(d)};
  }

  static FfnParams identity(Index d) {
    FfnParams f = zeros(d, d);
    f.w1.setIdentity();
    f.w2.setIdentity();
    return f;
  }

  static FfnParams random(Index d, Index hidden, Rng& rng) {
    FfnParams f = zeros(d, hidden);
    const double s1 = std::sqrt(2.0 / static_cast<double>(d));
    const double s2 = std::sqrt(1.0 / static_cast<double>(hidden));
    for (Index i = 0; i < f.w1.size(); ++i) f.w1.data()[i] = static_cast<Scalar>(rng.normal(0.0, s1));
    for (Index i = 0; i < f.w2.size(); ++i) f.w2.data()[i] = static_cast<Scalar>(rng.normal(0.0, s2));
    return f;
  }

  template <typename Other>
  FfnParams<Other> cast() const {
    return {w1.template cast<Other>(), b1.template cast<Other>(),
            w2.template cast<Other>(), b2.template cast<Other>()};
  }
};

template <typename Scalar>
struct FfnCache {
  Mat<Scalar> input;
  Mat<Scalar> hidden;  // post-ReLU
};

template <typename Scalar>
Mat<Scalar> ffn_forward(const Mat<Scalar>& x, const FfnParams<Scalar>& f,
                        FfnCache<Scalar>* cache = nullptr) {
  if (x.cols() != f.dim()) {
    throw DimensionError(detail::concat("FFN expects width ", f.dim(),
                                        ", got ", x.cols()));
  }
  Mat<Scalar> h = x * f.w1.transpose();
  h.rowwise() += f.b1.transpose();
  h = h.cwiseMax(Scalar(0));
  Mat<Scalar> y = h * f.w2.transpose();
  y.rowwise() += f.b2.transpose();
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(h);
  }
  return y;
}

template <typename Scalar>
Mat<Scalar> ffn_backward(const FfnCache<Scalar>& c, const FfnParams<Scalar>& f,
                         const Mat<Scalar>& grad_out, FfnParams<Scalar>& grads) {
  grads.w2.noalias() += grad_out.transpose() * c.hidden;
  grads.b2 += grad_out.colwise().sum().transpose();
  Mat<Scalar> gh = grad_out * f.w2;
  gh = (c.hidden.array() > Scalar(0)).select(gh, Scalar(0));
  grads.w1.noalias() += gh.transpose() * c.input;
  grads.b1 += gh.colwise().sum().transpose();
  return gh * f.w1;
}

}  // namespace ecd
