// Central finite-difference checks for analytic gradients, in double.
//
//   auto loss = [&] { return scalar_loss(params); };
//   auto r = check_gradient("conv1.weight", w.data(), grad.data(), w.size(), loss);
//   EXPECT_LT(r.relative_error, 1e-4);
#pragma once

#include "ecd/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace ecd {

inline constexpr double kFiniteDifferenceStep = 1e-4;

struct GradCheckResult {
  std::string name;
  double relative_error = 0.0;  // ||a - n|| / max(||a||, ||n||)
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  Index checked = 0;
};

// Perturbs `values[i]` for every i in `indices` and compares the central
// difference of `loss` with `analytic[i]`. Values are restored afterwards.
inline GradCheckResult check_gradient(std::string name, double* values,
                                      const double* analytic,
                                      const std::vector<Index>& indices,
                                      const std::function<double()>& loss,
                                      double step = kFiniteDifferenceStep) {
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (Index i : indices) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = loss();
    values[i] = saved - step;
    const double down = loss();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
    a2 += analytic[i] * analytic[i];
    n2 += numeric * numeric;
  }
  GradCheckResult r;
  r.name = std::move(name);
  r.analytic_norm = std::sqrt(a2);
  r.numeric_norm = std::sqrt(n2);
  const double scale = std::max(r.analytic_norm, r.numeric_norm);
  r.relative_error = scale > 0.0 ? std::sqrt(diff2) / scale : 0.0;
  r.checked = static_cast<Index>(indices.size());
  return r;
}

inline GradCheckResult check_gradient(std::string name, double* values,
                                      const double* analytic, Index count,
                                      const std::function<double()>& loss,
                                      double step = kFiniteDifferenceStep) {
  std::vector<Index> all(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) all[static_cast<std::size_t>(i)] = i;
  return check_gradient(std::move(name), values, analytic, all, loss, step);
}

// Every block of `params` against the matching block of `grads`. Blocks with
// more than `max_entries` values are checked on an evenly spaced subset.
inline std::vector<GradCheckResult> check_model_gradients(
    ModelParams<double>& params, ModelParams<double>& grads,
    const std::function<double()>& loss, Index max_entries = 400,
    double step = kFiniteDifferenceStep) {
  auto pb = param_blocks(params);
  const auto gb = param_blocks(grads);
  std::vector<GradCheckResult> out;
  for (std::size_t b = 0; b < pb.size(); ++b) {
    const Index n = pb[b].size();
    std::vector<Index> idx;
    const Index stride = std::max<Index>(1, (n + max_entries - 1) / max_entries);
    for (Index i = 0; i < n; i += stride) idx.push_back(i);
    out.push_back(check_gradient(pb[b].name, pb[b].data, gb[b].data, idx, loss, step));
  }
  return out;
}

}  // namespace ecd
