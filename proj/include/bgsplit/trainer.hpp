#ifndef BGSPLIT_TRAINER_HPP
#define BGSPLIT_TRAINER_HPP

// Deterministic mini-batch momentum SGD over a DatasetManifest.

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "bgsplit/dataset.hpp"
#include "bgsplit/gradients.hpp"
#include "bgsplit/model.hpp"
#include "bgsplit/rng.hpp"

namespace bgsplit {

struct EpochRecord {
  double main_loss = 0.0;
  double aux_loss = 0.0;
  double total_loss = 0.0;
  std::size_t examples_seen = 0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

struct OptimizerState {
  ModelParams velocity;
};

inline OptimizerState make_optimizer_state(const ModelParams& params) { return {zeros_like(params)}; }

// v <- momentum * v + g + weight_decay * p;  p <- p - lr * v
// The clamped background slot is restored afterwards and its velocity zeroed.
inline void apply_update(ModelParams& params, const ModelParams& grad, OptimizerState& state, const TrainConfig& config,
                         double learning_rate) {
  std::vector<std::span<const double>> grads;
  grad.for_each_tensor([&](std::span<const double> t) { grads.push_back(t); });
  for (const auto& g : grads) {
    for (double v : g) {
      if (!std::isfinite(v)) detail::fail(ErrorKind::numerical_divergence, "trainer", "non-finite gradient encountered");
    }
  }
  std::vector<std::span<double>> velocity;
  state.velocity.for_each_tensor([&](std::span<double> t) { velocity.push_back(t); });
  std::size_t k = 0;
  params.for_each_tensor([&](std::span<double> p) {
    const auto g = grads[k];
    const auto v = velocity[k];
    ++k;
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = config.momentum * v[i] + g[i] + config.weight_decay * p[i];
      p[i] -= learning_rate * v[i];
    }
  });
  if (params.clamp_background) {
    params.apply_clamp();
    for (double& w : state.velocity.main_head.weight.row(0)) w = 0.0;
    state.velocity.main_head.bias[0] = 0.0;
  }
  params.for_each_tensor([](std::span<double> t) {
    for (double v : t) {
      if (!std::isfinite(v)) detail::fail(ErrorKind::numerical_divergence, "trainer", "parameter became non-finite");
    }
  });
}

// One optimizer step on `batch`; returns the batch loss before the update.
inline LossValue sgd_step(ModelParams& params, std::span<const Sample> batch, const TrainConfig& config, OptimizerState& state,
                          GradientScope scope = GradientScope::full) {
  LossAndGradients lg = loss_gradients(params, batch, config, scope);
  apply_update(params, lg.grad, state, config, config.learning_rate);
  return lg.loss;
}

// Every batch slot draws a class uniformly from the classes present, then an
// example uniformly within that class (with replacement).
class ClassBalancedSampler {
 public:
  ClassBalancedSampler(std::span<const int> labels, std::uint64_t seed) : rng_(seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    if (by_class.empty()) detail::fail(ErrorKind::configuration, "trainer", "class-balanced sampling over an empty class list");
    for (auto& [label, members] : by_class) members_.push_back(std::move(members));
  }

  std::vector<std::size_t> next_batch(std::size_t size) {
    std::vector<std::size_t> batch(size);
    for (auto& slot : batch) {
      const auto& members = members_[rng_.below(members_.size())];
      slot = members[rng_.below(members.size())];
    }
    return batch;
  }

 private:
  Rng rng_;
  std::vector<std::vector<std::size_t>> members_;
};

inline std::vector<std::vector<std::size_t>> class_balanced_batches(std::span<const int> labels, std::size_t batch_size,
                                                                    std::size_t num_batches, std::uint64_t seed) {
  ClassBalancedSampler sampler(labels, seed);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(num_batches);
  for (std::size_t b = 0; b < num_batches; ++b) out.push_back(sampler.next_batch(batch_size));
  return out;
}

// Training examples of a manifest, in manifest order.
inline std::vector<Sample> training_samples(const DatasetManifest& manifest) {
  std::vector<Sample> out;
  for (const auto& e : manifest.examples) {
    if (e.split != Split::train) continue;
    out.push_back({e.features, e.main_label, e.aux_label.value_or(0)});
  }
  return out;
}

inline void check_training_setup(std::span<const Sample> samples, std::size_t num_foreground, std::size_t num_aux,
                                 const TrainConfig& config) {
  config.validate();
  if (samples.empty()) detail::fail(ErrorKind::configuration, "trainer", "no training examples");
  for (const Sample& s : samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) > num_foreground) {
      detail::fail(ErrorKind::configuration, "trainer", "main label " + std::to_string(s.label) + " outside 0.." + std::to_string(num_foreground));
    }
    if (config.use_aux && (s.aux_label < 1 || static_cast<std::size_t>(s.aux_label) > num_aux)) {
      detail::fail(ErrorKind::configuration, "trainer", "auxiliary loss enabled but a training example has no pseudo-label in 1.." +
                                                            std::to_string(num_aux));
    }
  }
}

// Runs epochs x ceil(n / batch_size) steps from `params`. Uniform sampling
// visits each example once per epoch in a seeded shuffle; the last short
// batch is kept.
inline TrainLog run_training(ModelParams& params, std::span<const Sample> samples, const TrainConfig& config,
                             GradientScope scope = GradientScope::full) {
  check_training_setup(samples, params.num_foreground(), params.num_aux(), config);
  if (config.use_thresholding != params.clamp_background) {
    detail::fail(ErrorKind::configuration, "trainer", "model clamp flag disagrees with use_thresholding");
  }

  const std::size_t n = samples.size();
  const std::size_t steps = (n + config.batch_size - 1) / config.batch_size;
  OptimizerState state = make_optimizer_state(params);
  Rng order_rng = Rng::derive(config.seed, 21);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = samples[i].label;
  std::optional<ClassBalancedSampler> balanced;
  if (config.sampling == Sampling::class_balanced) balanced.emplace(labels, Rng::derive(config.seed, 22).next());

  std::vector<std::size_t> order(n);
  std::vector<Sample> batch;
  TrainLog log;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double lr = config.learning_rate;
    if (config.lr_step_epochs > 0) lr *= std::pow(config.lr_gamma, static_cast<double>(epoch / config.lr_step_epochs));

    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!balanced) order_rng.shuffle(std::span<std::size_t>(order));

    EpochRecord rec;
    for (std::size_t step = 0; step < steps; ++step) {
      batch.clear();
      if (balanced) {
        for (std::size_t i : balanced->next_batch(config.batch_size)) batch.push_back(samples[i]);
      } else {
        const std::size_t lo = step * config.batch_size;
        const std::size_t hi = std::min(n, lo + config.batch_size);
        for (std::size_t i = lo; i < hi; ++i) batch.push_back(samples[order[i]]);
      }
      LossAndGradients lg = loss_gradients(params, batch, config, scope);
      apply_update(params, lg.grad, state, config, lr);
      const double b = static_cast<double>(batch.size());
      rec.main_loss += lg.loss.main * b;
      rec.aux_loss += lg.loss.aux * b;
      rec.total_loss += lg.loss.total * b;
      rec.examples_seen += batch.size();
    }
    const double seen = static_cast<double>(rec.examples_seen);
    rec.main_loss /= seen;
    rec.aux_loss /= seen;
    rec.total_loss /= seen;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(rec);
  }
  return log;
}

// Fresh parameters sized from the manifest, trained on its train split.
inline TrainResult train(const DatasetManifest& manifest, const TrainConfig& config) {
  config.validate();
  const std::vector<Sample> samples = training_samples(manifest);
  if (samples.empty()) detail::fail(ErrorKind::configuration, "trainer", "manifest has no training examples");
  if (manifest.num_foreground == 0) detail::fail(ErrorKind::configuration, "trainer", "manifest has no foreground categories");
  std::size_t num_aux = 0;
  if (config.use_aux) {
    if (!manifest.num_aux || *manifest.num_aux == 0) {
      detail::fail(ErrorKind::configuration, "trainer", "auxiliary loss enabled but the manifest carries no pseudo-labels");
    }
    num_aux = *manifest.num_aux;
  }
  check_training_setup(samples, manifest.num_foreground, num_aux, config);

  TrainResult result;
  result.params = init_params(samples.front().features.size(), config.trunk_shape, manifest.num_foreground, num_aux, config.seed,
                              config.use_thresholding, config.b0);
  result.log = run_training(result.params, samples, config);
  return result;
}

// Keeps the trunk (and aux head) bit-for-bit, reinitialises the main head for
// the manifest's foreground set and trains it with the main loss only.
inline ModelParams freeze_trunk_and_retrain_head(const ModelParams& params, const DatasetManifest& manifest, const TrainConfig& config) {
  config.validate();
  if (manifest.num_foreground == 0) detail::fail(ErrorKind::configuration, "trainer", "manifest has no foreground categories");
  TrainConfig head_config = config;
  head_config.use_aux = false;
  head_config.trunk_shape.clear();

  // Embed once; the head then trains as a linear model on the frozen features.
  std::vector<std::vector<double>> embedded;
  std::vector<Sample> samples;
  for (const auto& e : manifest.examples) {
    if (e.split != Split::train) continue;
    embedded.push_back(forward_trunk(params, e.features));
  }
  std::size_t k = 0;
  for (const auto& e : manifest.examples) {
    if (e.split != Split::train) continue;
    samples.push_back({embedded[k++], e.main_label, 0});
  }
  if (samples.empty()) detail::fail(ErrorKind::configuration, "trainer", "manifest has no training examples");

  ModelParams head = init_params(params.feature_dim(), {}, manifest.num_foreground, 0, config.seed, config.use_thresholding, config.b0);
  run_training(head, samples, head_config);

  ModelParams out = params;
  out.main_head = std::move(head.main_head);
  out.clamp_background = config.use_thresholding;
  out.b0 = config.b0;
  return out;
}

}  // namespace bgsplit

#endif  // BGSPLIT_TRAINER_HPP
