#ifndef BGSPLIT_LOSSES_HPP
#define BGSPLIT_LOSSES_HPP

// Softmax variants and cross-entropy terms of the multi-task objective.
//
// The main head produces N+1 logits with slot 0 reserved for the background
// class. Under background thresholding the slot-0 logit is not learned: it is
// the constant b0, so an input is background exactly when every foreground
// logit stays below b0.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "bgsplit/error.hpp"

namespace bgsplit {

inline constexpr double kDefaultLambdaG = 0.1;
inline constexpr double kDefaultB0 = 0.1;
inline constexpr double kLogEpsilon = 1e-30;

// p(y = n | x) for the N foreground classes plus the residual background mass.
struct ProbabilityVector {
  std::vector<double> foreground;
  double background = 0.0;

  std::size_t num_foreground() const { return foreground.size(); }

  // Slot 0 is background, slots 1..N are foreground.
  double slot(std::size_t n) const { return n == 0 ? background : foreground[n - 1]; }
};

struct LossValue {
  double main = 0.0;
  double aux = 0.0;
  double total = 0.0;
  double lambda_g = 0.0;
};

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::invalid_input, "losses", std::string(what) + " contains a non-finite value");
  }
}

}  // namespace detail

// Plain K-way softmax, max-subtracted. Used for the auxiliary head.
inline std::vector<double> softmax_plain(std::span<const double> logits) {
  detail::require_finite(logits, "logits");
  if (logits.empty()) detail::fail(ErrorKind::invalid_input, "losses", "softmax of an empty logit vector");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

// Standard (N+1)-way softmax with a learned background logit in slot 0.
inline ProbabilityVector softmax(std::span<const double> logits) {
  if (logits.size() < 2) detail::fail(ErrorKind::invalid_input, "losses", "softmax needs a background slot and at least one foreground logit");
  const std::vector<double> p = softmax_plain(logits);
  ProbabilityVector out;
  out.background = p[0];
  out.foreground.assign(p.begin() + 1, p.end());
  return out;
}

// Foreground probabilities with the background logit fixed to b0:
//   p_n = e^{z_n} / (e^{b0} + sum_i e^{z_i}),  background = e^{b0} / (same).
inline ProbabilityVector bg_thresholded_softmax(std::span<const double> foreground_logits, double b0) {
  if (foreground_logits.empty()) detail::fail(ErrorKind::invalid_input, "losses", "need at least one foreground logit");
  detail::require_finite(foreground_logits, "foreground logits");
  if (!std::isfinite(b0)) detail::fail(ErrorKind::invalid_input, "losses", "b0 is not finite");

  const double peak = std::max(b0, *std::max_element(foreground_logits.begin(), foreground_logits.end()));
  ProbabilityVector out;
  out.foreground.resize(foreground_logits.size());
  const double bg = std::exp(b0 - peak);
  double denom = bg;
  for (std::size_t i = 0; i < foreground_logits.size(); ++i) {
    out.foreground[i] = std::exp(foreground_logits[i] - peak);
    denom += out.foreground[i];
  }
  for (double& v : out.foreground) v /= denom;
  out.background = bg / denom;
  return out;
}

// -log p_y, with y = 0 selecting the background probability.
inline double cross_entropy(const ProbabilityVector& p, int y) {
  if (y < 0 || static_cast<std::size_t>(y) > p.num_foreground()) {
    detail::fail(ErrorKind::invalid_label, "losses", "label " + std::to_string(y) + " outside 0.." + std::to_string(p.num_foreground()));
  }
  return -std::log(std::max(p.slot(static_cast<std::size_t>(y)), kLogEpsilon));
}

// K-way cross-entropy over plain probabilities, class index 0-based.
inline double cross_entropy(std::span<const double> probs, std::size_t k) {
  if (k >= probs.size()) detail::fail(ErrorKind::invalid_label, "losses", "auxiliary class index out of range");
  return -std::log(std::max(probs[k], kLogEpsilon));
}

inline LossValue multi_task_loss(double main, double aux, double lambda_g) {
  if (!(main >= 0.0) || !(aux >= 0.0) || !(lambda_g >= 0.0)) {
    detail::fail(ErrorKind::invalid_input, "losses", "loss terms and lambda_g must be non-negative");
  }
  return LossValue{main, aux, main + lambda_g * aux, lambda_g};
}

}  // namespace bgsplit

#endif  // BGSPLIT_LOSSES_HPP
