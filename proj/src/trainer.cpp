#include "ecd/trainer.hpp"

#include "ecd/parallel.hpp"

#include <algorithm>
#include <numeric>

namespace ecd {

namespace {

void add_into(ModelParams<float>& acc, const ModelParams<float>& g) {
  auto a = param_blocks(acc);
  const auto b = param_blocks(g);
  for (std::size_t i = 0; i < a.size(); ++i) a[i].map() += b[i].map();
}

}  // namespace

std::vector<Sample> build_samples(const World& world, const Encoder& encoder,
                                  const ReferenceDatabase& db, std::size_t k,
                                  Split split) {
  const auto& queries = world.manifest.queries;
  std::vector<Sample> out;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    if (split == Split::kTrain && q.validation) continue;
    if (split == Split::kValidation && !q.validation) continue;
    Sample s;
    s.sequence = q.sequence;
    s.index = q.index;
    s.query = encoder.encode(world.query_images[i]);
    s.target = world.query_masks[i];
    for (const auto& hit : retrieve_topk(compute_descriptor(s.query), db, k)) {
      s.refs.push_back(db.entry(hit.entry).features);
    }
    out.push_back(std::move(s));
  }
  return out;
}

double positive_weight(std::span<const Sample> samples) {
  double pos = 0.0;
  double total = 0.0;
  for (const auto& s : samples) {
    pos += static_cast<double>((s.target.array() != 0).count());
    total += static_cast<double>(s.target.size());
  }
  if (pos == 0.0) return 100.0;
  return std::clamp((total - pos) / pos, 1.0, 100.0);
}

ConfusionCounts evaluate_counts(const ModelParams<float>& params, const ModelConfig& cfg,
                                std::span<const Sample> samples, double threshold) {
  std::vector<ConfusionCounts> per(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    ForwardState<float> st;
    auto logits = forward_logits<float>(params, cfg, samples[i].query,
                                        samples[i].refs, false, {}, st);
    per[i] = accumulate(predict_from_logits(std::move(logits), threshold).mask,
                        samples[i].target);
  });
  ConfusionCounts total;
  for (const auto& c : per) total += c;
  return total;
}

TrainResult train(std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const ModelConfig& model, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("empty training set");
  if (val_set.empty()) throw std::invalid_argument("empty validation set");

  TrainResult result;
  result.w_pos = cfg.w_pos ? *cfg.w_pos : positive_weight(train_set);
  ModelParams<float> params = ModelParams<float>::random(model, cfg.seed);
  OptimizerState<float> opt = OptimizerState<float>::for_params(params);

  const double untrained = f1(evaluate_counts(params, model, val_set, cfg.threshold));
  result.history.push_back({0, 0.0, 0.0, untrained});
  result.params = params;
  result.best_val_f1 = untrained;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uint64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    Rng shuffle(splitmix64(cfg.seed) ^ static_cast<std::uint64_t>(epoch + 1));
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t n = end - start;
      std::vector<ModelParams<float>> grads(n);
      std::vector<double> losses(n);
      parallel_for(n, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        const Sample& s = train_set[idx];
        ForwardState<float> st;
        const DropoutKey key{cfg.seed, step, static_cast<std::uint64_t>(idx) * 16};
        auto logits = forward_logits<float>(params, model, s.query, s.refs, true, key, st);
        logits.tokens() = logits.tokens().unaryExpr([](float z) { return sigmoid(z); });
        LossResult<float> loss = weighted_bce_loss(logits, s.target, result.w_pos);
        losses[b] = loss.loss;
        grads[b] = ModelParams<float>::zeros(model);
        backward_logits(st, params, model, loss.grad, grads[b]);
      });

      double batch_loss = 0.0;
      for (double l : losses) batch_loss += l;
      if (!std::isfinite(batch_loss)) throw DivergenceError(step, batch_loss);
      ModelParams<float> total = std::move(grads[0]);
      for (std::size_t b = 1; b < n; ++b) add_into(total, grads[b]);
      for (auto& blk : param_blocks(total)) blk.map() /= static_cast<float>(n);
      adam_step(params, total, opt, lr, cfg);
      ++step;
      epoch_loss += batch_loss;
    }

    const double val = f1(evaluate_counts(params, model, val_set, cfg.threshold));
    result.history.push_back({epoch + 1, lr,
                              epoch_loss / static_cast<double>(train_set.size()), val});
    if (val > result.best_val_f1) {
      result.best_val_f1 = val;
      result.best_epoch = epoch + 1;
      result.params = params;
    }
  }
  result.optimizer = std::move(opt);
  result.steps = step;
  return result;
}

}  // namespace ecd
