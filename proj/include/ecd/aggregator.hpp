// Semantic aggregator: each pseudo-aligned view attends into the
// concatenated reference tokens; the dropped-out attention output is added
// back to the view and passed through a token-wise FFN. Per-scale results
// are averaged into the reconstructed scene.
#pragma once

#include "ecd/aligner.hpp"
#include "ecd/attention.hpp"

namespace ecd {

// T x d token matrix; rows are positions in raster order, maps concatenated.
template <typename Scalar>
using TokenSet = Mat<Scalar>;

template <typename Scalar>
TokenSet<Scalar> flatten_tokens(std::span<const FeatureMap<Scalar>> maps) {
  if (maps.empty()) throw DimensionError("no maps to flatten");
  Index rows = 0;
  for (const auto& m : maps) {
    if (m.channels() != maps.front().channels()) {
      throw DimensionError(detail::concat("channel mismatch while flattening: ",
                                          m.channels(), " vs ",
                                          maps.front().channels()));
    }
    rows += m.positions();
  }
  TokenSet<Scalar> out(rows, maps.front().channels());
  Index at = 0;
  for (const auto& m : maps) {
    out.middleRows(at, m.positions()) = m.tokens();
    at += m.positions();
  }
  return out;
}

template <typename Scalar>
TokenSet<Scalar> flatten_tokens(const std::vector<FeatureMap<Scalar>>& maps) {
  return flatten_tokens(std::span<const FeatureMap<Scalar>>(maps));
}

template <typename Scalar>
FeatureMap<Scalar> unflatten_tokens(const TokenSet<Scalar>& tokens,
                                    Index height, Index width) {
  return FeatureMap<Scalar>(tokens.cols(), height, width, tokens);
}

template <typename Scalar>
struct AggregatorParams {
  MhaParams<Scalar> mha;
  FfnParams<Scalar> ffn;
  double dropout = 0.1;

  static AggregatorParams zeros(Index d, Index heads, Index ffn_width,
                                double dropout = 0.1) {
    return {MhaParams<Scalar>::zeros(d, heads),
            FfnParams<Scalar>::zeros(d, ffn_width), dropout};
  }

  static AggregatorParams random(Index d, Index heads, Index ffn_width,
                                 double dropout, Rng& rng) {
    AggregatorParams p;
    p.mha = MhaParams<Scalar>::random(d, heads, rng);
    p.ffn = FfnParams<Scalar>::random(d, ffn_width, rng);
    p.dropout = dropout;
    return p;
  }

  template <typename Other>
  AggregatorParams<Other> cast() const {
    return {mha.template cast<Other>(), ffn.template cast<Other>(), dropout};
  }
};

template <typename Scalar>
struct CrossAttendCache {
  MhaCache<Scalar> mha;
  Mat<Scalar> mask;  // empty when dropout was not applied
};

// Multi-head cross-attention with dropout on its output in training mode.
template <typename Scalar>
TokenSet<Scalar> cross_attend(const TokenSet<Scalar>& query_tokens,
                              const TokenSet<Scalar>& kv_tokens,
                              const AggregatorParams<Scalar>& params,
                              bool training, DropoutKey key,
                              CrossAttendCache<Scalar>* cache = nullptr) {
  TokenSet<Scalar> out = mha_forward(query_tokens, kv_tokens, params.mha,
                                     cache ? &cache->mha : nullptr);
  if (training && params.dropout > 0.0) {
    Mat<Scalar> mask =
        dropout_mask<Scalar>(out.rows(), out.cols(), params.dropout, key);
    out.array() *= mask.array();
    if (cache) cache->mask = std::move(mask);
  } else if (cache) {
    cache->mask.resize(0, 0);
  }
  return out;
}

template <typename Scalar>
struct AggregateCache {
  CrossAttendCache<Scalar> attend;
  FfnCache<Scalar> ffn;
  Index height = 0;
  Index width = 0;
};

// FFN(dropout(MHA(view, refs, refs)) + view), reshaped to the view's grid.
template <typename Scalar>
FeatureMap<Scalar> aggregate_scale(const FeatureMap<Scalar>& view,
                                   const TokenSet<Scalar>& ref_tokens,
                                   const AggregatorParams<Scalar>& params,
                                   bool training, DropoutKey key,
                                   AggregateCache<Scalar>* cache = nullptr) {
  TokenSet<Scalar> residual =
      cross_attend(view.tokens(), ref_tokens, params, training, key,
                   cache ? &cache->attend : nullptr);
  residual += view.tokens();
  TokenSet<Scalar> out =
      ffn_forward(residual, params.ffn, cache ? &cache->ffn : nullptr);
  if (cache) {
    cache->height = view.height();
    cache->width = view.width();
  }
  return unflatten_tokens(out, view.height(), view.width());
}

template <typename Scalar>
struct AggregateGrads {
  FeatureMap<Scalar> view;
  TokenSet<Scalar> ref_tokens;
};

template <typename Scalar>
AggregateGrads<Scalar> aggregate_scale_backward(
    const AggregateCache<Scalar>& cache, const AggregatorParams<Scalar>& params,
    const FeatureMap<Scalar>& grad_out, AggregatorParams<Scalar>& grads) {
  const Mat<Scalar> g_residual =
      ffn_backward(cache.ffn, params.ffn, grad_out.tokens(), grads.ffn);
  Mat<Scalar> g_attn = g_residual;
  if (cache.attend.mask.size() > 0) g_attn.array() *= cache.attend.mask.array();
  MhaInputGrads<Scalar> g =
      mha_backward(cache.attend.mha, params.mha, g_attn, grads.mha);
  AggregateGrads<Scalar> out;
  out.view = FeatureMap<Scalar>(grad_out.channels(), cache.height, cache.width,
                                g.query + g_residual);
  out.ref_tokens = std::move(g.kv);
  return out;
}

// Mean over scales of aggregate_scale; scale i uses dropout stream
// key.stream + i.
template <typename Scalar>
FeatureMap<Scalar> reconstruct_scene(
    const std::vector<PseudoView<Scalar>>& views,
    std::span<const FeatureMap<Scalar>> refs,
    const AggregatorParams<Scalar>& params, bool training, DropoutKey key,
    std::vector<AggregateCache<Scalar>>* caches = nullptr) {
  if (views.empty()) throw std::invalid_argument("no pseudo-aligned views");
  const TokenSet<Scalar> ref_tokens = flatten_tokens(refs);
  if (caches) caches->assign(views.size(), AggregateCache<Scalar>{});
  FeatureMap<Scalar> sum;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (!views[i].features.same_shape(views.front().features)) {
      throw DimensionError("pseudo-aligned views differ in shape");
    }
    DropoutKey k = key;
    k.stream += i;
    FeatureMap<Scalar> f =
        aggregate_scale(views[i].features, ref_tokens, params, training, k,
                        caches ? &(*caches)[i] : nullptr);
    if (i == 0) {
      sum = std::move(f);
    } else {
      sum.tokens() += f.tokens();
    }
  }
  sum.tokens() /= static_cast<Scalar>(views.size());
  return sum;
}

}  // namespace ecd
