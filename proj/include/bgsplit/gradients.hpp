#ifndef BGSPLIT_GRADIENTS_HPP
#define BGSPLIT_GRADIENTS_HPP

// Backpropagation of the mean per-example objective
//   loss(y, F(x)) + lambda_g * loss(t, G(x))
// through both heads and the shared trunk.

#include <span>
#include <vector>

#include "bgsplit/model.hpp"

namespace bgsplit {

// One training example as seen by the optimizer. aux_label is 1-based;
// 0 means "no pseudo-label".
struct Sample {
  std::span<const double> features;
  int label = 0;
  int aux_label = 0;
};

struct LossAndGradients {
  LossValue loss;
  ModelParams grad;  // same shape as the parameters
};

enum class GradientScope { full, heads_only };

namespace detail {

inline void accumulate_outer(DenseLayer& grad, std::span<const double> delta, std::span<const double> input, double scale) {
  for (std::size_t r = 0; r < delta.size(); ++r) {
    const double d = scale * delta[r];
    auto row = grad.weight.row(r);
    for (std::size_t c = 0; c < input.size(); ++c) row[c] += d * input[c];
    grad.bias[r] += d;
  }
}

// out += scale * W^T delta, skipping row `skip_row` when set.
inline void accumulate_transpose(const DenseLayer& layer, std::span<const double> delta, std::span<double> out, double scale,
                                 std::size_t first_row = 0) {
  for (std::size_t r = first_row; r < delta.size(); ++r) {
    const double d = scale * delta[r];
    const auto row = layer.weight.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += d * row[c];
  }
}

}  // namespace detail

// Analytic gradients of the batch-mean total loss. Examples are reduced in
// batch order so results are bitwise reproducible.
inline LossAndGradients loss_gradients(const ModelParams& params, std::span<const Sample> batch, const TrainConfig& config,
                                       GradientScope scope = GradientScope::full) {
  if (batch.empty()) detail::fail(ErrorKind::configuration, "losses", "empty batch");
  const bool aux_on = config.use_aux;
  if (aux_on && params.aux_head.empty()) {
    detail::fail(ErrorKind::configuration, "losses", "auxiliary loss enabled but the model has no auxiliary head");
  }
  const double lambda = aux_on ? config.lambda_g : 0.0;
  const std::size_t n_fg = params.num_foreground();
  const std::size_t n_layers = params.trunk.size();

  LossAndGradients out{{}, zeros_like(params)};
  double main_sum = 0.0;
  double aux_sum = 0.0;

  // activations[0] = input, activations[l + 1] = relu(layer l)
  std::vector<std::vector<double>> activations(n_layers + 1);
  std::vector<double> dz(n_fg + 1), da, dh, dprev;

  for (const Sample& s : batch) {
    detail::check_input(params, s.features);
    if (s.label < 0 || static_cast<std::size_t>(s.label) > n_fg) {
      detail::fail(ErrorKind::invalid_label, "losses", "main label " + std::to_string(s.label) + " out of range");
    }
    activations[0].assign(s.features.begin(), s.features.end());
    for (std::size_t l = 0; l < n_layers; ++l) {
      activations[l + 1].assign(params.trunk[l].out_dim(), 0.0);
      detail::affine(params.trunk[l], activations[l], activations[l + 1]);
      for (double& v : activations[l + 1]) v = v > 0.0 ? v : 0.0;
    }
    const std::vector<double>& h = activations[n_layers];
    detail::require_finite_activation(h, "trunk activation");

    const std::vector<double> z = main_logits(params, h);
    const ProbabilityVector p = config.use_thresholding
                                    ? bg_thresholded_softmax(std::span<const double>(z).subspan(1), config.b0)
                                    : softmax(z);
    main_sum += cross_entropy(p, s.label);
    for (std::size_t n = 0; n <= n_fg; ++n) dz[n] = p.slot(n) - (static_cast<std::size_t>(s.label) == n ? 1.0 : 0.0);
    if (config.use_thresholding) dz[0] = 0.0;
    detail::accumulate_outer(out.grad.main_head, dz, h, 1.0);

    dh.assign(h.size(), 0.0);
    detail::accumulate_transpose(params.main_head, dz, dh, 1.0, config.use_thresholding ? 1 : 0);

    if (aux_on) {
      if (s.aux_label < 1 || static_cast<std::size_t>(s.aux_label) > params.num_aux()) {
        detail::fail(ErrorKind::configuration, "losses", "auxiliary loss enabled but an example lacks a valid pseudo-label");
      }
      std::vector<double> a(params.num_aux());
      detail::affine(params.aux_head, h, a);
      detail::require_finite_activation(a, "aux logit");
      const std::vector<double> q = softmax_plain(a);
      const std::size_t t = static_cast<std::size_t>(s.aux_label - 1);
      aux_sum += cross_entropy(q, t);
      da = q;
      da[t] -= 1.0;
      if (lambda != 0.0) {
        detail::accumulate_outer(out.grad.aux_head, da, h, lambda);
        detail::accumulate_transpose(params.aux_head, da, dh, lambda);
      }
    }

    if (scope == GradientScope::heads_only) continue;
    for (std::size_t l = n_layers; l-- > 0;) {
      for (std::size_t i = 0; i < dh.size(); ++i) {
        if (!(activations[l + 1][i] > 0.0)) dh[i] = 0.0;
      }
      detail::accumulate_outer(out.grad.trunk[l], dh, activations[l], 1.0);
      if (l == 0) break;
      dprev.assign(activations[l].size(), 0.0);
      detail::accumulate_transpose(params.trunk[l], dh, dprev, 1.0);
      dh.swap(dprev);
    }
  }

  const double inv = 1.0 / static_cast<double>(batch.size());
  out.grad.for_each_tensor([inv](std::span<double> t) {
    for (double& v : t) v *= inv;
  });
  out.loss = multi_task_loss(main_sum * inv, aux_sum * inv, lambda);
  return out;
}

// Mean total loss only; used by finite-difference checks and evaluation logs.
inline LossValue batch_loss(const ModelParams& params, std::span<const Sample> batch, const TrainConfig& config) {
  if (batch.empty()) detail::fail(ErrorKind::configuration, "losses", "empty batch");
  const double lambda = config.use_aux ? config.lambda_g : 0.0;
  double main_sum = 0.0;
  double aux_sum = 0.0;
  for (const Sample& s : batch) {
    const Prediction pred = predict(params, s.features, config);
    main_sum += cross_entropy(pred.main, s.label);
    if (config.use_aux) aux_sum += cross_entropy(pred.aux, static_cast<std::size_t>(s.aux_label - 1));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  return multi_task_loss(main_sum * inv, aux_sum * inv, lambda);
}

}  // namespace bgsplit

#endif  // BGSPLIT_GRADIENTS_HPP
