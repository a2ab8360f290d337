#ifndef BGSPLIT_METRICS_HPP
#define BGSPLIT_METRICS_HPP

// Two evaluation protocols over the foreground classes:
//  * mean F1 of hard (N+1)-way predictions,
//  * mean average precision of per-class confidence rankings.

#include <algorithm>
#include <memory>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "bgsplit/dataset.hpp"
#include "bgsplit/error.hpp"
#include "bgsplit/model.hpp"

namespace bgsplit {

struct PredictionSet {
  std::vector<std::string> ids;
  std::vector<int> truth;
  std::vector<int> hard_labels;
  Matrix confidences;  // rows = test examples, cols = foreground classes
};

// Argmax over the N+1 logits (slot 0 = b0 when thresholding); ties go to the
// lower slot, so an input is background unless some foreground logit beats b0.
inline int hard_label_from_logits(std::span<const double> logits, const TrainConfig& config) {
  std::size_t best = 0;
  double best_v = config.use_thresholding ? config.b0 : logits[0];
  for (std::size_t n = 1; n < logits.size(); ++n) {
    if (logits[n] > best_v) {
      best_v = logits[n];
      best = n;
    }
  }
  return static_cast<int>(best);
}

inline PredictionSet hard_predictions(const ModelParams& params, const DatasetManifest& manifest, const TrainConfig& config) {
  if (params.num_foreground() != manifest.num_foreground) {
    detail::fail(ErrorKind::configuration, "metrics",
                 "model has " + std::to_string(params.num_foreground()) + " foreground classes, manifest has " +
                     std::to_string(manifest.num_foreground));
  }
  PredictionSet out;
  std::size_t n_test = 0;
  for (const auto& e : manifest.examples) n_test += e.split == Split::test;
  out.confidences = Matrix(n_test, manifest.num_foreground);
  std::size_t row = 0;
  for (const auto& e : manifest.examples) {
    if (e.split != Split::test) continue;
    const Prediction p = predict(params, e.features, config);
    out.ids.push_back(e.id);
    out.truth.push_back(e.main_label);
    out.hard_labels.push_back(hard_label_from_logits(p.logits, config));
    std::copy(p.main.foreground.begin(), p.main.foreground.end(), out.confidences.row(row).begin());
    ++row;
  }
  return out;
}

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

// Per foreground class 1..N (index n-1 in the result); any 0/0 is taken as 0.
inline std::vector<ClassScores> f1_per_class(std::span<const int> predicted, std::span<const int> truth, std::size_t num_foreground) {
  if (predicted.size() != truth.size()) detail::fail(ErrorKind::invalid_input, "metrics", "prediction and truth lengths differ");
  std::vector<std::size_t> tp(num_foreground + 1, 0), fp(num_foreground + 1, 0), fn(num_foreground + 1, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int p = predicted[i], t = truth[i];
    if (p < 0 || t < 0 || static_cast<std::size_t>(p) > num_foreground || static_cast<std::size_t>(t) > num_foreground) {
      detail::fail(ErrorKind::invalid_label, "metrics", "label out of range");
    }
    if (p == t) {
      ++tp[static_cast<std::size_t>(t)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(t)];
    }
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  std::vector<ClassScores> out(num_foreground);
  for (std::size_t n = 1; n <= num_foreground; ++n) {
    ClassScores& s = out[n - 1];
    s.precision = ratio(tp[n], tp[n] + fp[n]);
    s.recall = ratio(tp[n], tp[n] + fn[n]);
    s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    s.support = tp[n] + fn[n];
  }
  return out;
}

// Non-interpolated AP: mean over positives of precision at that positive's rank.
// Ranks by descending confidence, ties by ascending id (index order if no ids).
inline double average_precision(std::span<const double> confidences, std::span<const bool> positives,
                                std::span<const std::string> ids = {}) {
  if (confidences.size() != positives.size() || (!ids.empty() && ids.size() != confidences.size())) {
    detail::fail(ErrorKind::invalid_input, "metrics", "confidence, label and id lengths differ");
  }
  std::vector<std::size_t> order(confidences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (confidences[a] != confidences[b]) return confidences[a] > confidences[b];
    return ids.empty() ? a < b : ids[a] < ids[b];
  });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!positives[order[r]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits == 0) detail::fail(ErrorKind::undefined_metric, "metrics", "average precision needs at least one positive");
  return sum / static_cast<double>(hits);
}

struct ClassMetrics {
  std::string class_id;
  double ap = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t support = 0;

  bool operator==(const ClassMetrics&) const = default;
};

struct EvalReport {
  std::vector<ClassMetrics> classes;
  double map = 0.0;
  double mean_f1 = 0.0;

  void recompute_aggregates() {
    map = 0.0;
    mean_f1 = 0.0;
    for (const auto& c : classes) {
      map += c.ap;
      mean_f1 += c.f1;
    }
    if (!classes.empty()) {
      map /= static_cast<double>(classes.size());
      mean_f1 /= static_cast<double>(classes.size());
    }
  }

  double mean_precision() const {
    double s = 0.0;
    for (const auto& c : classes) s += c.precision;
    return classes.empty() ? 0.0 : s / static_cast<double>(classes.size());
  }

  double mean_recall() const {
    double s = 0.0;
    for (const auto& c : classes) s += c.recall;
    return classes.empty() ? 0.0 : s / static_cast<double>(classes.size());
  }

  bool operator==(const EvalReport&) const = default;
};

// Builds the report from a prediction set. class_names[n-1] names class n.
inline EvalReport report_from_predictions(const PredictionSet& preds, const std::vector<std::string>& class_names) {
  const std::size_t n_fg = preds.confidences.cols;
  if (class_names.size() != n_fg) detail::fail(ErrorKind::configuration, "metrics", "class name count does not match N");
  const auto f1 = f1_per_class(preds.hard_labels, preds.truth, n_fg);
  EvalReport report;
  std::vector<double> column(preds.truth.size());
  std::unique_ptr<bool[]> positives(new bool[preds.truth.size()]);
  for (std::size_t n = 1; n <= n_fg; ++n) {
    std::size_t support = 0;
    for (std::size_t i = 0; i < preds.truth.size(); ++i) {
      column[i] = preds.confidences(i, n - 1);
      positives[i] = preds.truth[i] == static_cast<int>(n);
      support += positives[i];
    }
    if (support == 0) detail::fail(ErrorKind::configuration, "metrics", "class '" + class_names[n - 1] + "' has no test positives");
    ClassMetrics m;
    m.class_id = class_names[n - 1];
    m.ap = average_precision(column, std::span<const bool>(positives.get(), preds.truth.size()), preds.ids);
    m.f1 = f1[n - 1].f1;
    m.precision = f1[n - 1].precision;
    m.recall = f1[n - 1].recall;
    m.support = support;
    report.classes.push_back(std::move(m));
  }
  report.recompute_aggregates();
  return report;
}

inline EvalReport evaluate(const ModelParams& params, const DatasetManifest& test_manifest, const TrainConfig& config) {
  const PredictionSet preds = hard_predictions(params, test_manifest, config);
  std::vector<std::string> names = test_manifest.foreground_categories;
  if (names.size() != test_manifest.num_foreground) {
    names.clear();
    for (std::size_t n = 1; n <= test_manifest.num_foreground; ++n) names.push_back(std::to_string(n));
  }
  return report_from_predictions(preds, names);
}

// Concatenates the per-class rows of disjoint reports and re-aggregates.
inline EvalReport average_reports(std::span<const EvalReport> reports) {
  if (reports.empty()) detail::fail(ErrorKind::configuration, "metrics", "no reports to average");
  EvalReport out;
  std::set<std::string> seen;
  for (const auto& r : reports) {
    for (const auto& c : r.classes) {
      if (!seen.insert(c.class_id).second) detail::fail(ErrorKind::configuration, "metrics", "class '" + c.class_id + "' appears in more than one report");
      out.classes.push_back(c);
    }
  }
  out.recompute_aggregates();
  return out;
}

}  // namespace bgsplit

#endif  // BGSPLIT_METRICS_HPP
