#ifndef BGSPLIT_PSEUDOLABEL_HPP
#define BGSPLIT_PSEUDOLABEL_HPP

// Auxiliary pseudo-labels that split the background: random assignment,
// mini-batch k-means over feature vectors, or labels predicted by an external
// model and supplied as a file.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bgsplit/dataset.hpp"
#include "bgsplit/error.hpp"
#include "bgsplit/rng.hpp"

namespace bgsplit {

inline std::vector<int> random_pseudolabels(std::size_t n, std::size_t num_labels, std::uint64_t seed) {
  if (num_labels < 1) detail::fail(ErrorKind::configuration, "pseudolabel", "random pseudo-labels need K >= 1");
  if (n < 1) detail::fail(ErrorKind::configuration, "pseudolabel", "random pseudo-labels need n >= 1");
  Rng rng(seed);
  std::vector<int> out(n);
  for (int& t : out) t = static_cast<int>(rng.below(num_labels)) + 1;
  return out;
}

struct KMeansParams {
  std::size_t max_iters = 100;
  std::size_t minibatch_size = 1024;
  std::size_t eval_interval = 10;      // full-data inertia every this many mini-batch iterations
  std::size_t max_refine_passes = 50;  // full-batch passes after the mini-batch phase
  std::size_t restarts = 1;            // independent initialisations; lowest final inertia wins
  std::uint64_t seed = 0;
};

struct ClusteringResult {
  std::vector<int> assignments;  // 1-based cluster ids
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
  std::size_t iterations_run = 0;
  std::vector<double> inertia_history;  // one entry per evaluation pass, non-increasing
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// Nearest centroid; the lowest index wins ties.
inline std::pair<std::size_t, double> nearest(std::span<const double> x, const std::vector<std::vector<double>>& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = squared_distance(x, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return {best, best_d};
}

inline double assign_all(std::span<const std::vector<double>> points, const std::vector<std::vector<double>>& centroids,
                         std::vector<std::size_t>& assignment, std::vector<double>* dist = nullptr) {
  assignment.resize(points.size());
  if (dist) dist->resize(points.size());
  double inertia = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto [c, d] = nearest(points[i], centroids);
    assignment[i] = c;
    if (dist) (*dist)[i] = d;
    inertia += d;
  }
  return inertia;
}

// One mini-batch k-means run from K distinct seeded points, then full-batch
// refinement. Inputs are validated by kmeans_cluster.
inline ClusteringResult kmeans_single(std::span<const std::vector<double>> points, std::size_t num_clusters, const KMeansParams& params,
                                      Rng rng) {
  const std::size_t n = points.size();
  const std::size_t dim = points[0].size();
  std::vector<std::size_t> pick(n);
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  for (std::size_t i = 0; i < num_clusters; ++i) std::swap(pick[i], pick[i + rng.below(n - i)]);
  std::vector<std::vector<double>> centroids(num_clusters);
  for (std::size_t c = 0; c < num_clusters; ++c) centroids[c] = points[pick[c]];

  ClusteringResult result;
  std::vector<std::size_t> assignment;
  double best = detail::assign_all(points, centroids, assignment);
  std::vector<std::vector<double>> best_centroids = centroids;
  result.inertia_history.push_back(best);

  auto evaluate = [&] {
    const double inertia = detail::assign_all(points, centroids, assignment);
    if (inertia <= best) {
      best = inertia;
      best_centroids = centroids;
    } else {
      centroids = best_centroids;
    }
    result.inertia_history.push_back(best);
  };

  std::vector<double> counts(num_clusters, 0.0);
  const std::size_t batch = std::min(params.minibatch_size, n);
  std::vector<std::size_t> members(batch), owner(batch);
  for (std::size_t it = 0; it < params.max_iters; ++it) {
    for (std::size_t j = 0; j < batch; ++j) {
      members[j] = rng.below(n);
      owner[j] = detail::nearest(points[members[j]], centroids).first;
    }
    for (std::size_t j = 0; j < batch; ++j) {
      auto& c = centroids[owner[j]];
      const double eta = 1.0 / ++counts[owner[j]];
      const auto& x = points[members[j]];
      for (std::size_t k = 0; k < dim; ++k) c[k] = (1.0 - eta) * c[k] + eta * x[k];
    }
    ++result.iterations_run;
    if (params.eval_interval > 0 && (it + 1) % params.eval_interval == 0) evaluate();
  }
  if (params.eval_interval == 0 || params.max_iters % params.eval_interval != 0) evaluate();
  centroids = best_centroids;

  // Full-batch refinement: centroid <- mean of members, then reassign.
  std::vector<double> dist;
  double inertia = detail::assign_all(points, centroids, assignment, &dist);
  for (std::size_t pass = 0; pass < params.max_refine_passes; ++pass) {
    std::vector<std::vector<double>> next(num_clusters, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> size(num_clusters, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++size[assignment[i]];
      for (std::size_t k = 0; k < dim; ++k) next[assignment[i]][k] += points[i][k];
    }
    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < num_clusters; ++c) {
      if (size[c] > 0) {
        for (double& v : next[c]) v /= static_cast<double>(size[c]);
        continue;
      }
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i] && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      }
      taken[far] = true;
      next[c] = points[far];
    }
    std::vector<std::size_t> next_assignment;
    std::vector<double> next_dist;
    const double next_inertia = detail::assign_all(points, next, next_assignment, &next_dist);
    if (next_inertia > inertia) break;
    const bool stable = next_assignment == assignment && next == centroids;
    centroids = std::move(next);
    assignment = std::move(next_assignment);
    dist = std::move(next_dist);
    inertia = next_inertia;
    result.inertia_history.push_back(inertia);
    if (stable) break;
  }

  result.centroids = std::move(centroids);
  result.inertia = inertia;
  result.assignments.resize(n);
  for (std::size_t i = 0; i < n; ++i) result.assignments[i] = static_cast<int>(assignment[i]) + 1;
  return result;
}

}  // namespace detail

// Mini-batch k-means (per-centroid 1/count learning rate) followed by
// full-batch refinement. Evaluation passes keep the best centroids seen, so
// the recorded full-data inertia never increases. Empty clusters in the
// refinement are re-seeded with the point farthest from its centroid. Of
// `restarts` independent runs the lowest final inertia wins (earliest on ties).
inline ClusteringResult kmeans_cluster(std::span<const std::vector<double>> points, std::size_t num_clusters, const KMeansParams& params) {
  const std::size_t n = points.size();
  if (num_clusters < 1) detail::fail(ErrorKind::configuration, "pseudolabel", "k-means needs K >= 1");
  if (n < num_clusters) {
    detail::fail(ErrorKind::configuration, "pseudolabel",
                 "k-means needs at least K points (n=" + std::to_string(n) + ", K=" + std::to_string(num_clusters) + ")");
  }
  const std::size_t dim = points[0].size();
  for (const auto& p : points) {
    if (p.size() != dim) detail::fail(ErrorKind::invalid_input, "pseudolabel", "embeddings have inconsistent dimensions");
    detail::require_finite(p, "embedding");
  }
  ClusteringResult best = detail::kmeans_single(points, num_clusters, params, Rng(params.seed));
  for (std::size_t r = 1; r < params.restarts; ++r) {
    ClusteringResult next = detail::kmeans_single(points, num_clusters, params, Rng::derive(params.seed, 1000 + r));
    if (next.inertia < best.inertia) best = std::move(next);
  }
  return best;
}

struct ExternalLabels {
  std::vector<int> labels;  // aligned to manifest order
  std::size_t num_labels = 0;
};

// Reads `example_id<TAB>label` lines (1-based labels, no header) and joins
// them to the manifest by id. When `num_labels` is unset K is the largest label.
inline ExternalLabels load_external_pseudolabels(const std::string& path, const DatasetManifest& manifest,
                                                 std::optional<std::size_t> num_labels = std::nullopt) {
  std::ifstream in(path);
  if (!in) detail::fail(ErrorKind::ingestion, "pseudolabel", "cannot open pseudo-label file '" + path + "'");
  std::map<std::string, int> by_id;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      detail::fail(ErrorKind::ingestion, "pseudolabel", "line " + std::to_string(line_no) + " is not 'id<TAB>label'");
    }
    const std::string id = line.substr(0, tab);
    const std::string text = line.substr(tab + 1);
    int label = 0;
    std::size_t used = 0;
    try {
      label = std::stoi(text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != text.size()) detail::fail(ErrorKind::ingestion, "pseudolabel", "example '" + id + "' has a malformed label");
    if (label < 1 || (num_labels && static_cast<std::size_t>(label) > *num_labels)) {
      detail::fail(ErrorKind::ingestion, "pseudolabel", "example '" + id + "' has out-of-range label " + text);
    }
    if (!by_id.emplace(id, label).second) detail::fail(ErrorKind::ingestion, "pseudolabel", "duplicate example id '" + id + "'");
  }

  ExternalLabels out;
  out.labels.reserve(manifest.examples.size());
  std::size_t matched = 0;
  for (const auto& e : manifest.examples) {
    const auto it = by_id.find(e.id);
    if (it == by_id.end()) detail::fail(ErrorKind::ingestion, "pseudolabel", "missing pseudo-label for example '" + e.id + "'");
    out.labels.push_back(it->second);
    out.num_labels = std::max(out.num_labels, static_cast<std::size_t>(it->second));
    ++matched;
  }
  if (matched != by_id.size()) {
    std::set<std::string> known;
    for (const auto& e : manifest.examples) known.insert(e.id);
    for (const auto& [id, label] : by_id) {
      if (!known.contains(id)) detail::fail(ErrorKind::ingestion, "pseudolabel", "unknown example id '" + id + "'");
    }
  }
  if (num_labels) out.num_labels = *num_labels;
  return out;
}

enum class PseudoLabelKind { none, random, cluster, external };

struct PseudoLabelSource {
  PseudoLabelKind kind = PseudoLabelKind::none;
  std::size_t num_labels = 0;  // K for random / cluster
  KMeansParams kmeans;
  std::string path;            // external
  std::uint64_t seed = 0;

  static PseudoLabelSource none() { return {}; }
  static PseudoLabelSource random(std::size_t k, std::uint64_t seed) {
    PseudoLabelSource s;
    s.kind = PseudoLabelKind::random;
    s.num_labels = k;
    s.seed = seed;
    return s;
  }
  static PseudoLabelSource cluster(std::size_t k, std::uint64_t seed, KMeansParams kmeans = {}) {
    PseudoLabelSource s;
    s.kind = PseudoLabelKind::cluster;
    s.num_labels = k;
    s.seed = seed;
    s.kmeans = kmeans;
    s.kmeans.seed = seed;
    return s;
  }
  static PseudoLabelSource external(std::string path) {
    PseudoLabelSource s;
    s.kind = PseudoLabelKind::external;
    s.path = std::move(path);
    return s;
  }
};

inline const char* to_string(PseudoLabelKind k) {
  switch (k) {
    case PseudoLabelKind::none: return "none";
    case PseudoLabelKind::random: return "random";
    case PseudoLabelKind::cluster: return "cluster";
    case PseudoLabelKind::external: return "external";
  }
  return "none";
}

inline PseudoLabelKind parse_pseudolabel_kind(const std::string& s) {
  if (s == "none") return PseudoLabelKind::none;
  if (s == "random") return PseudoLabelKind::random;
  if (s == "cluster") return PseudoLabelKind::cluster;
  if (s == "external") return PseudoLabelKind::external;
  detail::fail(ErrorKind::configuration, "pseudolabel", "unknown pseudo-label source '" + s + "'");
}

// Populates aux_label on every example. Clustering is fit on the training
// split; test examples take the label of their nearest centroid. Features and
// main labels are never touched.
inline DatasetManifest attach_pseudolabels(const DatasetManifest& manifest, const PseudoLabelSource& source) {
  DatasetManifest out = manifest;
  switch (source.kind) {
    case PseudoLabelKind::none:
      return out;
    case PseudoLabelKind::random: {
      const auto labels = random_pseudolabels(out.examples.size(), source.num_labels, source.seed);
      for (std::size_t i = 0; i < labels.size(); ++i) out.examples[i].aux_label = labels[i];
      out.num_aux = source.num_labels;
      out.append_provenance("pseudolabels(random, K=" + std::to_string(source.num_labels) + ", seed=" + std::to_string(source.seed) + ")");
      return out;
    }
    case PseudoLabelKind::cluster: {
      std::vector<std::vector<double>> train_points;
      for (const auto& e : out.examples) {
        if (e.split == Split::train) train_points.push_back(e.features);
      }
      KMeansParams kp = source.kmeans;
      kp.seed = source.seed;
      const ClusteringResult fit = kmeans_cluster(train_points, source.num_labels, kp);
      std::size_t k = 0;
      for (auto& e : out.examples) {
        if (e.split == Split::train) {
          e.aux_label = fit.assignments[k++];
        } else {
          e.aux_label = static_cast<int>(detail::nearest(e.features, fit.centroids).first) + 1;
        }
      }
      out.num_aux = source.num_labels;
      out.append_provenance("pseudolabels(cluster, K=" + std::to_string(source.num_labels) + ", seed=" + std::to_string(source.seed) + ")");
      return out;
    }
    case PseudoLabelKind::external: {
      const ExternalLabels ext = load_external_pseudolabels(source.path, out,
                                                            source.num_labels ? std::optional(source.num_labels) : std::nullopt);
      for (std::size_t i = 0; i < ext.labels.size(); ++i) out.examples[i].aux_label = ext.labels[i];
      out.num_aux = ext.num_labels;
      out.append_provenance("pseudolabels(external, file=" + source.path + ", K=" + std::to_string(ext.num_labels) + ")");
      return out;
    }
  }
  return out;
}

}  // namespace bgsplit

#endif  // BGSPLIT_PSEUDOLABEL_HPP
