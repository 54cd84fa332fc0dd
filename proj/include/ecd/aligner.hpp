// Spatial aligner: grid partition of the query map, exhaustive stride-1
// sliding-window search over the reference subset, and assembly of
// pseudo-aligned views at several grid resolutions.
//
// Similarity of a placement is the sum of per-position dot products over the
// window. With per-position unit features that is a sum of cosines, bounded
// by h*w.
#pragma once

#include "ecd/tensor.hpp"

#include <span>
#include <vector>

namespace ecd {

struct GridSpec {
  std::vector<Index> resolutions{1, 2, 4};

  // Non-empty, strictly increasing, every n divides height and width.
  void validate(Index height, Index width) const {
    if (resolutions.empty()) throw std::invalid_argument("grid list is empty");
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
      const Index n = resolutions[i];
      if (n < 1) throw std::invalid_argument("grid resolution must be >= 1");
      if (i > 0 && n <= resolutions[i - 1]) {
        throw std::invalid_argument("grid resolutions must be strictly increasing");
      }
      if (height % n != 0 || width % n != 0) {
        throw DimensionError(detail::concat("grid ", n, " does not divide ",
                                            height, "x", width));
      }
    }
  }
};

struct GridCell {
  Index row = 0;
  Index col = 0;
  bool operator==(const GridCell&) const = default;
};

struct PatchMatch {
  GridCell cell;
  Index reference = 0;  // 0-based position in the reference list
  Index top = 0;
  Index left = 0;
  double similarity = 0.0;
};

template <typename Scalar>
struct GridPatch {
  GridCell cell;
  FeatureMap<Scalar> patch;
};

template <typename Scalar>
struct PseudoView {
  Index resolution = 1;
  FeatureMap<Scalar> features;
  std::vector<PatchMatch> provenance;  // raster order over cells
};

namespace detail {
inline void check_divides(Index n, Index height, Index width) {
  if (n < 1 || height % n != 0 || width % n != 0) {
    throw DimensionError(concat("grid n=", n, " does not divide H=", height,
                                ", W=", width));
  }
}

template <typename Scalar>
void check_refs(const FeatureMap<Scalar>& query,
                std::span<const FeatureMap<Scalar>> refs) {
  if (refs.empty()) throw DimensionError("reference list is empty");
  for (const auto& r : refs) {
    if (!r.same_shape(query)) {
      throw DimensionError(concat("reference ", r.shape_string(),
                                  " does not match query ",
                                  query.shape_string()));
    }
  }
}

// Replaces `best` when `candidate` is strictly better; callers scan k then
// raster order, so ties keep the lowest k and earliest offset.
inline void argmax_update(const SimilarityMap& sim, Index k, PatchMatch& best,
                          bool& have) {
  for (Index i = 0; i < sim.height(); ++i) {
    for (Index j = 0; j < sim.width(); ++j) {
      const double v = sim.values(i, j);
      if (!have || v > best.similarity) {
        best.reference = k;
        best.top = i;
        best.left = j;
        best.similarity = v;
        have = true;
      }
    }
  }
}
}  // namespace detail

template <typename Scalar>
std::vector<GridPatch<Scalar>> partition_grid(const FeatureMap<Scalar>& f,
                                              Index n) {
  detail::check_divides(n, f.height(), f.width());
  const Index h = f.height() / n;
  const Index w = f.width() / n;
  std::vector<GridPatch<Scalar>> out;
  out.reserve(static_cast<std::size_t>(n * n));
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < n; ++c) {
      out.push_back({GridCell{r, c}, f.block(r * h, c * w, h, w)});
    }
  }
  return out;
}

template <typename Scalar>
PatchMatch match_patch(const FeatureMap<Scalar>& patch,
                       std::span<const FeatureMap<Scalar>> refs) {
  if (refs.empty()) throw DimensionError("reference list is empty");
  PatchMatch best;
  bool have = false;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    detail::argmax_update(correlate_valid(refs[k], patch),
                          static_cast<Index>(k), best, have);
  }
  return best;
}

template <typename Scalar>
PatchMatch match_patch(const FeatureMap<Scalar>& patch,
                       const std::vector<FeatureMap<Scalar>>& refs) {
  return match_patch(patch, std::span<const FeatureMap<Scalar>>(refs));
}

// Reusable search state: one query/reference gram matrix per reference,
// shared by every cell at every resolution.
template <typename Scalar>
class PatchSearch {
 public:
  PatchSearch(const FeatureMap<Scalar>& query,
              std::span<const FeatureMap<Scalar>> refs)
      : height_(query.height()), width_(query.width()) {
    detail::check_refs(query, refs);
    grams_.reserve(refs.size());
    for (const auto& r : refs) grams_.push_back(position_gram(r, query));
  }

  std::vector<PatchMatch> match_cells(Index n) const {
    detail::check_divides(n, height_, width_);
    const Index h = height_ / n;
    const Index w = width_ / n;
    std::vector<PatchMatch> out;
    out.reserve(static_cast<std::size_t>(n * n));
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c) {
        PatchMatch best;
        bool have = false;
        for (std::size_t k = 0; k < grams_.size(); ++k) {
          detail::argmax_update(
              correlate_from_gram(grams_[k], height_, width_, width_, r * h,
                                  c * w, h, w),
              static_cast<Index>(k), best, have);
        }
        best.cell = {r, c};
        out.push_back(best);
      }
    }
    return out;
  }

 private:
  Index height_;
  Index width_;
  std::vector<Eigen::MatrixXd> grams_;
};

// Copies the selected reference windows into a query-shaped map.
template <typename Scalar>
PseudoView<Scalar> assemble_pseudo_view(std::span<const FeatureMap<Scalar>> refs,
                                        Index n,
                                        std::vector<PatchMatch> provenance) {
  const FeatureMap<Scalar>& first = refs.front();
  const Index h = first.height() / n;
  const Index w = first.width() / n;
  PseudoView<Scalar> view;
  view.resolution = n;
  view.features = FeatureMap<Scalar>(first.channels(), first.height(), first.width());
  for (const auto& m : provenance) {
    view.features.set_block(m.cell.row * h, m.cell.col * w,
                            refs[static_cast<std::size_t>(m.reference)].block(
                                m.top, m.left, h, w));
  }
  view.provenance = std::move(provenance);
  return view;
}

template <typename Scalar>
PseudoView<Scalar> build_pseudo_view(const FeatureMap<Scalar>& f_q,
                                     std::span<const FeatureMap<Scalar>> refs,
                                     Index n) {
  detail::check_divides(n, f_q.height(), f_q.width());
  PatchSearch<Scalar> search(f_q, refs);
  return assemble_pseudo_view(refs, n, search.match_cells(n));
}

template <typename Scalar>
PseudoView<Scalar> build_pseudo_view(const FeatureMap<Scalar>& f_q,
                                     const std::vector<FeatureMap<Scalar>>& refs,
                                     Index n) {
  return build_pseudo_view(f_q, std::span<const FeatureMap<Scalar>>(refs), n);
}

template <typename Scalar>
std::vector<PseudoView<Scalar>> build_multiscale(
    const FeatureMap<Scalar>& f_q, std::span<const FeatureMap<Scalar>> refs,
    const GridSpec& grids) {
  grids.validate(f_q.height(), f_q.width());
  PatchSearch<Scalar> search(f_q, refs);
  std::vector<PseudoView<Scalar>> views;
  views.reserve(grids.resolutions.size());
  for (Index n : grids.resolutions) {
    views.push_back(assemble_pseudo_view(refs, n, search.match_cells(n)));
  }
  return views;
}

template <typename Scalar>
std::vector<PseudoView<Scalar>> build_multiscale(
    const FeatureMap<Scalar>& f_q, const std::vector<FeatureMap<Scalar>>& refs,
    const GridSpec& grids) {
  return build_multiscale(f_q, std::span<const FeatureMap<Scalar>>(refs), grids);
}

// Routes a pseudo-view gradient back to the reference windows it was copied
// from. Selections are constants, so this is a pure scatter.
template <typename Scalar>
void pseudo_view_backward(const PseudoView<Scalar>& view,
                          const FeatureMap<Scalar>& grad_view,
                          std::vector<FeatureMap<Scalar>>& grad_refs) {
  const Index h = grad_view.height() / view.resolution;
  const Index w = grad_view.width() / view.resolution;
  for (const auto& m : view.provenance) {
    grad_refs[static_cast<std::size_t>(m.reference)].add_block(
        m.top, m.left, grad_view.block(m.cell.row * h, m.cell.col * w, h, w));
  }
}

}  // namespace ecd
