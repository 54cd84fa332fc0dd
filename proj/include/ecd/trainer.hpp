// Weighted BCE, Adam with linear warmup + cosine decay, and the end-to-end
// training loop over frozen encoder features.
#pragma once

#include "ecd/evaluator.hpp"
#include "ecd/model.hpp"
#include "ecd/refdb.hpp"
#include "ecd/synthworld.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

namespace ecd {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 4;
  int epochs = 100;
  int warmup_epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Unset: negative/positive pixel ratio of the training targets, clamped
  // to [1, 100].
  std::optional<double> w_pos;
  std::uint64_t seed = 0;
  double threshold = 0.5;  // for validation F1

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) {
      throw std::invalid_argument(detail::concat("warmup (", warmup_epochs,
                                                 ") must be in [0, epochs=", epochs, ")"));
    }
    if (w_pos && !(*w_pos > 0)) throw std::invalid_argument("w_pos must be > 0");
  }
};

inline constexpr double kProbClamp = 1e-7;

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  FeatureMap<Scalar> grad;  // d loss / d logits
};

// loss = -mean(w y log p + (1 - y) log(1 - p)) with p clamped to
// [1e-7, 1 - 1e-7]; the gradient is taken with respect to the logits that
// produced `probabilities`: (-w y (1 - p) + (1 - y) p) / N.
template <typename Scalar>
LossResult<Scalar> weighted_bce_loss(const FeatureMap<Scalar>& probabilities,
                                     const Mask& target, double w_pos) {
  if (probabilities.channels() != 1 || probabilities.height() != target.rows() ||
      probabilities.width() != target.cols()) {
    throw DimensionError(detail::concat("probabilities ", probabilities.shape_string(),
                                        " vs target ", target.rows(), "x", target.cols()));
  }
  const Index h = target.rows();
  const Index w = target.cols();
  const double n = static_cast<double>(h * w);
  LossResult<Scalar> out{0.0, FeatureMap<Scalar>(1, h, w)};
  double total = 0.0;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double raw = static_cast<double>(probabilities(0, y, x));
      const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
      const bool pos = target(y, x) != 0;
      total += pos ? -w_pos * std::log(p) : -std::log(1.0 - p);
      const double g = pos ? -w_pos * (1.0 - raw) : raw;
      out.grad(0, y, x) = static_cast<Scalar>(g / n);
    }
  }
  out.loss = total / n;
  return out;
}

inline double lr_at_epoch(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw std::out_of_range(detail::concat("epoch ", epoch, " outside [0, ", cfg.epochs, ")"));
  }
  if (epoch < cfg.warmup_epochs) {
    return cfg.learning_rate * (epoch + 1) / cfg.warmup_epochs;
  }
  const double t = static_cast<double>(epoch - cfg.warmup_epochs) /
                   static_cast<double>(cfg.epochs - cfg.warmup_epochs);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename Scalar>
struct OptimizerState {
  std::vector<Mat<Scalar>> m;
  std::vector<Mat<Scalar>> v;
  std::uint64_t step = 0;

  static OptimizerState for_params(const ModelParams<Scalar>& p) {
    OptimizerState s;
    for (const auto& b : param_blocks(p)) {
      s.m.push_back(Mat<Scalar>::Zero(b.rows, b.cols));
      s.v.push_back(Mat<Scalar>::Zero(b.rows, b.cols));
    }
    return s;
  }
};

template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads,
               OptimizerState<Scalar>& state, double lr, const TrainConfig& cfg) {
  auto pb = param_blocks(params);
  const auto gb = param_blocks(grads);
  if (state.m.empty()) state = OptimizerState<Scalar>::for_params(params);
  if (pb.size() != gb.size() || pb.size() != state.m.size()) {
    throw DimensionError("optimizer state does not match parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < pb.size(); ++i) {
    if (pb[i].rows != gb[i].rows || pb[i].cols != gb[i].cols ||
        state.m[i].rows() != pb[i].rows || state.m[i].cols() != pb[i].cols) {
      throw DimensionError("shape mismatch in block " + pb[i].name);
    }
    Scalar* theta = pb[i].data;
    const Scalar* g = gb[i].data;
    Scalar* m = state.m[i].data();
    Scalar* v = state.v[i].data();
    for (Index j = 0; j < pb[i].size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<Scalar>(mj);
      v[j] = static_cast<Scalar>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.adam_eps);
      theta[j] = static_cast<Scalar>(static_cast<double>(theta[j]) - update);
    }
  }
}

// ---------------------------------------------------------------------------

// One training/evaluation example: frozen encoder features of the query and
// of its retrieved references (best first), plus the ground-truth mask.
struct Sample {
  int sequence = 0;
  int index = 1;
  FeatureMap<float> query;
  std::vector<FeatureMap<float>> refs;
  Mask target;
};

enum class Split { kTrain, kValidation, kAll };

// Encodes the world's queries of the given split and retrieves their top-K
// references from `db`.
std::vector<Sample> build_samples(const World& world, const Encoder& encoder,
                                  const ReferenceDatabase& db, std::size_t k,
                                  Split split);

struct EpochMetrics {
  int epoch = 0;  // 1-based; 0 is the untrained model
  double lr = 0.0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
};

struct TrainResult {
  ModelParams<float> params;  // best validation epoch
  OptimizerState<float> optimizer;  // state after the final epoch
  std::vector<EpochMetrics> history;  // entry 0 is the untrained model
  int best_epoch = 0;
  double best_val_f1 = 0.0;
  double w_pos = 1.0;
  std::uint64_t steps = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::uint64_t step, double loss)
      : std::runtime_error(detail::concat("non-finite loss ", loss, " at step ", step)),
        step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

double positive_weight(std::span<const Sample> samples);

// Micro F1 of thresholded predictions (eval mode, no dropout).
ConfusionCounts evaluate_counts(const ModelParams<float>& params, const ModelConfig& cfg,
                                std::span<const Sample> samples, double threshold);

TrainResult train(std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const ModelConfig& model, const TrainConfig& cfg);

}  // namespace ecd
