#ifndef BGSPLIT_MODEL_HPP
#define BGSPLIT_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bgsplit/error.hpp"
#include "bgsplit/losses.hpp"
#include "bgsplit/rng.hpp"

namespace bgsplit {

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

// Affine map y = W x + b.
struct DenseLayer {
  Matrix weight;
  std::vector<double> bias;

  std::size_t in_dim() const { return weight.cols; }
  std::size_t out_dim() const { return weight.rows; }
  bool empty() const { return weight.rows == 0; }

  bool operator==(const DenseLayer&) const = default;
};

// Shared trunk (affine + ReLU layers) feeding a main head with N+1 outputs
// (slot 0 = background) and an optional K-way auxiliary head.
struct ModelParams {
  std::size_t input_dim = 0;
  std::vector<DenseLayer> trunk;
  DenseLayer main_head;
  DenseLayer aux_head;
  bool clamp_background = false;
  double b0 = kDefaultB0;

  std::size_t feature_dim() const { return trunk.empty() ? input_dim : trunk.back().out_dim(); }
  std::size_t num_foreground() const { return main_head.out_dim() - 1; }
  std::size_t num_aux() const { return aux_head.out_dim(); }

  // Background slot pinned to (0-vector, b0).
  void apply_clamp() {
    if (!clamp_background) return;
    for (double& w : main_head.weight.row(0)) w = 0.0;
    main_head.bias[0] = b0;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& layer : trunk) {
      fn(std::span<double>(layer.weight.data));
      fn(std::span<double>(layer.bias));
    }
    fn(std::span<double>(main_head.weight.data));
    fn(std::span<double>(main_head.bias));
    fn(std::span<double>(aux_head.weight.data));
    fn(std::span<double>(aux_head.bias));
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (const auto& layer : trunk) {
      fn(std::span<const double>(layer.weight.data));
      fn(std::span<const double>(layer.bias));
    }
    fn(std::span<const double>(main_head.weight.data));
    fn(std::span<const double>(main_head.bias));
    fn(std::span<const double>(aux_head.weight.data));
    fn(std::span<const double>(aux_head.bias));
  }

  bool operator==(const ModelParams&) const = default;
};

enum class Sampling { uniform, class_balanced };

inline const char* to_string(Sampling s) { return s == Sampling::uniform ? "uniform" : "class_balanced"; }

inline Sampling parse_sampling(const std::string& s) {
  if (s == "uniform") return Sampling::uniform;
  if (s == "class_balanced") return Sampling::class_balanced;
  detail::fail(ErrorKind::configuration, "model", "unknown sampling strategy '" + s + "'");
}

struct TrainConfig {
  double lambda_g = kDefaultLambdaG;
  double b0 = kDefaultB0;
  std::size_t batch_size = 1024;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t epochs = 10;
  // Multiply the learning rate by lr_gamma every lr_step_epochs epochs (0 = constant).
  std::size_t lr_step_epochs = 0;
  double lr_gamma = 0.1;
  Sampling sampling = Sampling::uniform;
  bool use_thresholding = true;
  bool use_aux = true;
  std::uint64_t seed = 0;
  std::vector<std::size_t> trunk_shape;

  void validate() const {
    auto bad = [](const std::string& what) { detail::fail(ErrorKind::configuration, "model", what); };
    if (!(lambda_g >= 0.0) || !std::isfinite(lambda_g)) bad("lambda_g must be finite and >= 0");
    if (!std::isfinite(b0)) bad("b0 must be finite");
    if (batch_size == 0) bad("batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) bad("learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) bad("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) bad("weight_decay must be >= 0");
    if (epochs == 0) bad("epochs must be positive");
    if (!(lr_gamma > 0.0)) bad("lr_gamma must be > 0");
    for (std::size_t w : trunk_shape) {
      if (w == 0) bad("trunk layer widths must be positive");
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

// Fan-in scaled uniform init: weights in +-sqrt(6 / fan_in), biases 0. Each
// block draws from its own stream so the trunk and main head do not depend
// on whether an auxiliary head exists.
inline ModelParams init_params(std::size_t input_dim, std::span<const std::size_t> trunk_shape, std::size_t num_foreground,
                               std::size_t num_aux, std::uint64_t seed, bool clamp_background = false,
                               double b0 = kDefaultB0) {
  if (input_dim == 0) detail::fail(ErrorKind::configuration, "model", "input dimension must be positive");
  if (num_foreground == 0) detail::fail(ErrorKind::configuration, "model", "need at least one foreground class");

  auto make_layer = [](std::size_t out, std::size_t in, Rng rng) {
    if (out == 0) detail::fail(ErrorKind::configuration, "model", "layer width must be positive");
    DenseLayer layer{Matrix(out, in), std::vector<double>(out, 0.0)};
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    for (double& w : layer.weight.data) w = rng.uniform(-limit, limit);
    return layer;
  };

  ModelParams params;
  params.input_dim = input_dim;
  params.clamp_background = clamp_background;
  params.b0 = b0;
  std::size_t width = input_dim;
  for (std::size_t l = 0; l < trunk_shape.size(); ++l) {
    params.trunk.push_back(make_layer(trunk_shape[l], width, Rng::derive(seed, 100 + l)));
    width = trunk_shape[l];
  }
  params.main_head = make_layer(num_foreground + 1, width, Rng::derive(seed, 1));
  if (num_aux > 0) params.aux_head = make_layer(num_aux, width, Rng::derive(seed, 2));
  params.apply_clamp();
  return params;
}

inline ModelParams zeros_like(const ModelParams& params) {
  ModelParams out = params;
  out.for_each_tensor([](std::span<double> t) { std::fill(t.begin(), t.end(), 0.0); });
  return out;
}

namespace detail {

inline void affine(const DenseLayer& layer, std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < layer.out_dim(); ++r) {
    const auto w = layer.weight.row(r);
    double acc = layer.bias[r];
    for (std::size_t c = 0; c < w.size(); ++c) acc += w[c] * x[c];
    out[r] = acc;
  }
}

inline void check_input(const ModelParams& params, std::span<const double> x) {
  if (x.size() != params.input_dim) {
    fail(ErrorKind::invalid_input, "model",
         "input has dimension " + std::to_string(x.size()) + ", model expects " + std::to_string(params.input_dim));
  }
  require_finite(x, "input");
}

// Inputs are finite, so a non-finite activation means the parameters diverged.
inline void require_finite_activation(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::numerical_divergence, "model", std::string(what) + " became non-finite");
  }
}

}  // namespace detail

inline std::vector<double> forward_trunk(const ModelParams& params, std::span<const double> x) {
  detail::check_input(params, x);
  std::vector<double> current(x.begin(), x.end());
  std::vector<double> next;
  for (const auto& layer : params.trunk) {
    next.assign(layer.out_dim(), 0.0);
    detail::affine(layer, current, next);
    for (double& v : next) v = v > 0.0 ? v : 0.0;
    current.swap(next);
  }
  detail::require_finite_activation(current, "trunk activation");
  return current;
}

inline std::vector<double> main_logits(const ModelParams& params, std::span<const double> embedding) {
  std::vector<double> z(params.main_head.out_dim());
  detail::affine(params.main_head, embedding, z);
  detail::require_finite_activation(z, "main logit");
  return z;
}

struct Prediction {
  ProbabilityVector main;
  std::vector<double> aux;
  std::vector<double> logits;  // main head, slot 0 = background
};

// Main head scored with the fixed-b0 softmax when thresholding, otherwise the
// full (N+1)-way softmax over learned logits. Aux head is a plain K-way softmax.
inline Prediction predict(const ModelParams& params, std::span<const double> x, const TrainConfig& config) {
  const std::vector<double> h = forward_trunk(params, x);
  Prediction out;
  out.logits = main_logits(params, h);
  if (config.use_thresholding) {
    out.main = bg_thresholded_softmax(std::span<const double>(out.logits).subspan(1), config.b0);
  } else {
    out.main = softmax(out.logits);
  }
  if (!params.aux_head.empty()) {
    std::vector<double> a(params.aux_head.out_dim());
    detail::affine(params.aux_head, h, a);
    detail::require_finite_activation(a, "aux logit");
    out.aux = softmax_plain(a);
  }
  return out;
}

}  // namespace bgsplit

#endif  // BGSPLIT_MODEL_HPP
