// Trainable parameter bundle and the differentiable forward/backward pass
// from frozen encoder features to upsampled change logits.
#pragma once

#include "ecd/aggregator.hpp"
#include "ecd/aligner.hpp"
#include "ecd/change_head.hpp"
#include "ecd/encoder.hpp"

#include <optional>
#include <string>
#include <type_traits>
#include <vector>

namespace ecd {

// Ablation wiring:
//   baseline        top-1 reference feeds the change head directly
//   aligner-only    mean of pseudo-aligned views feeds the change head
//   aggregator-only top-1 reference is the attention query over all refs
//   full            pseudo-aligned views are aggregated and averaged
enum class PipelineMode { kBaseline, kAlignerOnly, kAggregatorOnly, kFull };

const char* to_string(PipelineMode mode);
PipelineMode parse_mode(const std::string& text);

struct ModelConfig {
  Index feature_dim = 384;
  Index heads = 6;
  Index ffn_width = 384;
  double dropout = 0.1;
  Index up_factor = 14;  // encoder patch size
  bool relu_after_second = true;
  // Aggregator and change head consume the normalized projection output;
  // when false they consume the pre-normalization map instead (the aligner
  // always matches on normalized features).
  bool normalize_downstream = true;
  bool head_residual = false;  // see ChangeHeadParams::residual
  // Aggregator starts as a pass-through of the view: zero attention output
  // projection and an FFN of relu(x) - relu(-x). Needs ffn_width >= 2d.
  bool passthrough_init = false;
  GridSpec grids;
  PipelineMode mode = PipelineMode::kFull;
};

template <typename Scalar>
struct ModelParams {
  ProjectionHead<Scalar> projection;
  AggregatorParams<Scalar> aggregator;
  ChangeHeadParams<Scalar> head;

  static ModelParams zeros(const ModelConfig& cfg) {
    ModelParams p;
    p.projection = ProjectionHead<Scalar>::zeros(cfg.feature_dim);
    p.projection.relu_after_second = cfg.relu_after_second;
    p.aggregator = AggregatorParams<Scalar>::zeros(cfg.feature_dim, cfg.heads,
                                                   cfg.ffn_width, cfg.dropout);
    p.head = ChangeHeadParams<Scalar>::zeros(cfg.feature_dim, cfg.heads);
    p.head.residual = cfg.head_residual;
    return p;
  }

  static ModelParams random(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ModelParams p;
    p.projection = ProjectionHead<Scalar>::random(cfg.feature_dim, rng);
    p.projection.relu_after_second = cfg.relu_after_second;
    p.aggregator = AggregatorParams<Scalar>::random(
        cfg.feature_dim, cfg.heads, cfg.ffn_width, cfg.dropout, rng);
    p.head = ChangeHeadParams<Scalar>::random(cfg.feature_dim, cfg.heads, rng);
    p.head.residual = cfg.head_residual;
    if (cfg.passthrough_init) {
      const Index d = cfg.feature_dim;
      if (cfg.ffn_width < 2 * d) {
        throw std::invalid_argument(detail::concat("pass-through init needs ffn_width >= ",
                                                   2 * d, ", got ", cfg.ffn_width));
      }
      auto& f = p.aggregator.ffn;
      f.w1.topRows(2 * d).setZero();
      f.w1.topRows(d).setIdentity();
      f.w1.middleRows(d, d) = -Mat<Scalar>::Identity(d, d);
      f.w2.setZero();
      f.w2.leftCols(d).setIdentity();
      f.w2.middleCols(d, d) = -Mat<Scalar>::Identity(d, d);
      p.aggregator.mha.wo.setZero();
    }
    return p;
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    return {projection.template cast<Other>(), aggregator.template cast<Other>(),
            head.template cast<Other>()};
  }
};

// Named view of one dense parameter block.
template <typename Scalar>
struct ParamBlock {
  std::string name;
  Scalar* data;
  Index rows;
  Index cols;

  using Matrix = std::conditional_t<std::is_const_v<Scalar>,
                                    const Mat<std::remove_const_t<Scalar>>, Mat<Scalar>>;

  Index size() const { return rows * cols; }
  Eigen::Map<Matrix> map() const { return {data, rows, cols}; }
};

namespace detail {
template <typename Scalar, typename Derived>
void add_block(std::vector<ParamBlock<Scalar>>& out, std::string name,
               Eigen::PlainObjectBase<Derived>& m) {
  out.push_back({std::move(name), m.data(), m.rows(), m.cols()});
}

template <typename Scalar>
void add_conv(std::vector<ParamBlock<Scalar>>& out, const std::string& prefix,
              Conv2dParams<Scalar>& c) {
  add_block(out, prefix + ".weight", c.weight);
  add_block(out, prefix + ".bias", c.bias);
}

template <typename Scalar>
void add_mha(std::vector<ParamBlock<Scalar>>& out, const std::string& prefix,
             MhaParams<Scalar>& m) {
  add_block(out, prefix + ".wq", m.wq);
  add_block(out, prefix + ".bq", m.bq);
  add_block(out, prefix + ".wk", m.wk);
  add_block(out, prefix + ".bk", m.bk);
  add_block(out, prefix + ".wv", m.wv);
  add_block(out, prefix + ".bv", m.bv);
  add_block(out, prefix + ".wo", m.wo);
  add_block(out, prefix + ".bo", m.bo);
}
}  // namespace detail

// Every trainable block in a fixed order; names are stable across runs and
// used as checkpoint keys.
template <typename Scalar>
std::vector<ParamBlock<Scalar>> param_blocks(ModelParams<Scalar>& p) {
  std::vector<ParamBlock<Scalar>> out;
  detail::add_conv(out, "projection.conv1", p.projection.conv1);
  detail::add_conv(out, "projection.conv2", p.projection.conv2);
  detail::add_mha(out, "aggregator.mha", p.aggregator.mha);
  detail::add_block(out, "aggregator.ffn.w1", p.aggregator.ffn.w1);
  detail::add_block(out, "aggregator.ffn.b1", p.aggregator.ffn.b1);
  detail::add_block(out, "aggregator.ffn.w2", p.aggregator.ffn.w2);
  detail::add_block(out, "aggregator.ffn.b2", p.aggregator.ffn.b2);
  detail::add_mha(out, "head.query_to_scene", p.head.query_to_scene);
  detail::add_mha(out, "head.scene_to_query", p.head.scene_to_query);
  detail::add_conv(out, "head.fuse", p.head.fuse);
  detail::add_conv(out, "head.classify", p.head.classify);
  return out;
}

template <typename Scalar>
std::vector<ParamBlock<const Scalar>> param_blocks(const ModelParams<Scalar>& p) {
  auto blocks = param_blocks(const_cast<ModelParams<Scalar>&>(p));
  std::vector<ParamBlock<const Scalar>> out;
  out.reserve(blocks.size());
  for (auto& b : blocks) out.push_back({b.name, b.data, b.rows, b.cols});
  return out;
}

template <typename Scalar>
Index parameter_count(const ModelParams<Scalar>& p) {
  Index n = 0;
  for (const auto& b : param_blocks(p)) n += b.size();
  return n;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
struct ForwardState {
  ProjectionCache<Scalar> query_projection;
  std::vector<ProjectionCache<Scalar>> ref_projection;
  FeatureMap<Scalar> query_down;
  std::vector<FeatureMap<Scalar>> refs_down;
  std::vector<PseudoView<Scalar>> views;
  std::vector<AggregateCache<Scalar>> aggregate;
  ChangeHeadCache<Scalar> head;
  FeatureMap<Scalar> scene;
};

namespace detail {
template <typename Scalar>
const FeatureMap<Scalar>& downstream(const ProjectionCache<Scalar>& c,
                                     bool normalized) {
  return normalized ? c.output : c.unnormalized;
}
}  // namespace detail

// Selections used by the aligner, one list of cell matches per resolution.
using Selections = std::vector<std::vector<PatchMatch>>;

// Runs projection -> (align) -> (aggregate) -> change head on frozen encoder
// features. `refs_raw` is the retrieved subset, best first. When `fixed` is
// given, the aligner reuses those selections instead of searching.
template <typename Scalar>
FeatureMap<Scalar> forward_logits(const ModelParams<Scalar>& params,
                                  const ModelConfig& cfg,
                                  const FeatureMap<Scalar>& query_raw,
                                  std::span<const FeatureMap<Scalar>> refs_raw,
                                  bool training, DropoutKey key,
                                  ForwardState<Scalar>& st,
                                  const Selections* fixed = nullptr) {
  if (refs_raw.empty()) throw std::invalid_argument("no references");
  const bool norm = cfg.normalize_downstream;
  const bool uses_all_refs = cfg.mode != PipelineMode::kBaseline;
  const std::size_t k_used = uses_all_refs ? refs_raw.size() : 1;

  project(query_raw, params.projection, &st.query_projection);
  st.ref_projection.assign(k_used, ProjectionCache<Scalar>{});
  for (std::size_t k = 0; k < k_used; ++k) {
    project(refs_raw[k], params.projection, &st.ref_projection[k]);
  }
  st.query_down = detail::downstream(st.query_projection, norm);
  st.refs_down.clear();
  for (const auto& c : st.ref_projection) st.refs_down.push_back(detail::downstream(c, norm));
  const std::span<const FeatureMap<Scalar>> refs_down(st.refs_down);

  st.views.clear();
  st.aggregate.clear();
  if (cfg.mode == PipelineMode::kAlignerOnly || cfg.mode == PipelineMode::kFull) {
    cfg.grids.validate(query_raw.height(), query_raw.width());
    Selections sel;
    if (fixed) {
      sel = *fixed;
    } else {
      std::vector<FeatureMap<Scalar>> refs_norm;
      for (const auto& c : st.ref_projection) refs_norm.push_back(c.output);
      PatchSearch<Scalar> search(st.query_projection.output,
                                 std::span<const FeatureMap<Scalar>>(refs_norm));
      for (Index n : cfg.grids.resolutions) sel.push_back(search.match_cells(n));
    }
    for (std::size_t i = 0; i < cfg.grids.resolutions.size(); ++i) {
      st.views.push_back(assemble_pseudo_view(refs_down, cfg.grids.resolutions[i], sel[i]));
    }
  }

  switch (cfg.mode) {
    case PipelineMode::kBaseline:
      st.scene = st.refs_down.front();
      break;
    case PipelineMode::kAlignerOnly: {
      st.scene = st.views.front().features;
      for (std::size_t i = 1; i < st.views.size(); ++i) {
        st.scene.tokens() += st.views[i].features.tokens();
      }
      st.scene.tokens() /= static_cast<Scalar>(st.views.size());
      break;
    }
    case PipelineMode::kAggregatorOnly: {
      st.aggregate.assign(1, AggregateCache<Scalar>{});
      st.scene = aggregate_scale(st.refs_down.front(), flatten_tokens(refs_down),
                                 params.aggregator, training, key, &st.aggregate[0]);
      break;
    }
    case PipelineMode::kFull:
      st.scene = reconstruct_scene(st.views, refs_down, params.aggregator,
                                   training, key, &st.aggregate);
      break;
  }
  return change_logits(st.scene, st.query_down, params.head, cfg.up_factor, &st.head);
}

template <typename Scalar>
void backward_logits(const ForwardState<Scalar>& st,
                     const ModelParams<Scalar>& params, const ModelConfig& cfg,
                     const FeatureMap<Scalar>& grad_logits,
                     ModelParams<Scalar>& grads) {
  ChangeHeadInputGrads<Scalar> g =
      change_logits_backward(st.head, params.head, grad_logits, grads.head);

  FeatureMap<Scalar> g_query = std::move(g.query);
  std::vector<FeatureMap<Scalar>> g_refs;
  for (const auto& r : st.refs_down) {
    g_refs.emplace_back(r.channels(), r.height(), r.width());
  }
  const Index positions = g_query.positions();

  auto scatter_ref_tokens = [&](const Mat<Scalar>& tokens) {
    for (std::size_t k = 0; k < g_refs.size(); ++k) {
      g_refs[k].tokens() += tokens.middleRows(static_cast<Index>(k) * positions, positions);
    }
  };

  switch (cfg.mode) {
    case PipelineMode::kBaseline:
      g_refs.front().tokens() += g.scene.tokens();
      break;
    case PipelineMode::kAlignerOnly: {
      FeatureMap<Scalar> gv = g.scene;
      gv.tokens() /= static_cast<Scalar>(st.views.size());
      for (const auto& v : st.views) pseudo_view_backward(v, gv, g_refs);
      break;
    }
    case PipelineMode::kAggregatorOnly: {
      AggregateGrads<Scalar> ag = aggregate_scale_backward(
          st.aggregate[0], params.aggregator, g.scene, grads.aggregator);
      g_refs.front().tokens() += ag.view.tokens();
      scatter_ref_tokens(ag.ref_tokens);
      break;
    }
    case PipelineMode::kFull: {
      FeatureMap<Scalar> gs = g.scene;
      gs.tokens() /= static_cast<Scalar>(st.views.size());
      for (std::size_t i = 0; i < st.views.size(); ++i) {
        AggregateGrads<Scalar> ag = aggregate_scale_backward(
            st.aggregate[i], params.aggregator, gs, grads.aggregator);
        pseudo_view_backward(st.views[i], ag.view, g_refs);
        scatter_ref_tokens(ag.ref_tokens);
      }
      break;
    }
  }

  const FeatureMap<Scalar> zero(g_query.channels(), g_query.height(), g_query.width());
  auto run_projection = [&](const ProjectionCache<Scalar>& cache,
                            const FeatureMap<Scalar>& grad) {
    if (cfg.normalize_downstream) {
      project_backward<Scalar>(cache, params.projection, grad, nullptr, grads.projection);
    } else {
      project_backward(cache, params.projection, zero, &grad, grads.projection);
    }
  };
  run_projection(st.query_projection, g_query);
  for (std::size_t k = 0; k < g_refs.size(); ++k) {
    run_projection(st.ref_projection[k], g_refs[k]);
  }
}

// Collects the aligner selections from a forward state.
template <typename Scalar>
Selections selections_of(const ForwardState<Scalar>& st) {
  Selections out;
  for (const auto& v : st.views) out.push_back(v.provenance);
  return out;
}

}  // namespace ecd
