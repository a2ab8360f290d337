#ifndef BGSPLIT_DATASET_HPP
#define BGSPLIT_DATASET_HPP

// Dataset construction: remapping source categories into one background
// class, subset families for small-N protocols, background downsampling and
// the synthetic long-tail generator used as the bundled benchmark.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bgsplit/error.hpp"
#include "bgsplit/rng.hpp"

namespace bgsplit {

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct Example {
  std::string id;
  std::vector<double> features;
  std::string original_label;
  int main_label = 0;  // 0 = background, 1..N foreground
  std::optional<int> aux_label;
  Split split = Split::train;

  bool operator==(const Example&) const = default;
};

struct DatasetManifest {
  std::vector<Example> examples;
  std::size_t num_foreground = 0;
  std::optional<std::size_t> num_aux;
  std::vector<std::string> foreground_categories;
  double background_fraction = 0.0;
  std::string provenance;

  // (# train examples with label 0) / (# train examples); 0 when there is no train split.
  double count_background_fraction() const {
    std::size_t train = 0, bg = 0;
    for (const auto& e : examples) {
      if (e.split != Split::train) continue;
      ++train;
      if (e.main_label == 0) ++bg;
    }
    return train == 0 ? 0.0 : static_cast<double>(bg) / static_cast<double>(train);
  }

  void append_provenance(const std::string& step) {
    provenance += provenance.empty() ? step : "; " + step;
  }

  bool operator==(const DatasetManifest&) const = default;
};

namespace detail {

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace detail

// Category k-th in `foreground_categories` gets label k (1-based); every other
// category becomes background. Example order and features are preserved.
inline DatasetManifest build_bg_manifest(const DatasetManifest& source, const std::vector<std::string>& foreground_categories) {
  std::set<std::string> present;
  for (const auto& e : source.examples) present.insert(e.original_label);
  std::map<std::string, int> label_of;
  for (std::size_t i = 0; i < foreground_categories.size(); ++i) {
    const std::string& cat = foreground_categories[i];
    if (!present.contains(cat)) detail::fail(ErrorKind::configuration, "dataset", "unknown foreground category '" + cat + "'");
    if (!label_of.emplace(cat, static_cast<int>(i + 1)).second) {
      detail::fail(ErrorKind::configuration, "dataset", "duplicate foreground category '" + cat + "'");
    }
  }

  DatasetManifest out = source;
  out.num_foreground = foreground_categories.size();
  out.foreground_categories = foreground_categories;
  for (auto& e : out.examples) {
    const auto it = label_of.find(e.original_label);
    e.main_label = it == label_of.end() ? 0 : it->second;
  }
  out.background_fraction = out.count_background_fraction();
  std::string fg;
  for (const auto& c : foreground_categories) fg += (fg.empty() ? "" : ",") + c;
  out.append_provenance("bg(N=" + std::to_string(out.num_foreground) + ", foreground=[" + fg + "])");
  return out;
}

struct SubsetEntry {
  std::vector<std::string> categories;
  DatasetManifest manifest;  // train/test pair for this subset
};

struct SubsetFamily {
  std::vector<SubsetEntry> subsets;
  std::vector<std::string> covering_categories;
};

// Seeded partition of the covering categories into disjoint subsets of
// `subset_size`, one background manifest per subset.
inline SubsetFamily build_subset_family(const DatasetManifest& source, const std::vector<std::string>& covering_categories,
                                        std::size_t subset_size, std::uint64_t seed) {
  if (subset_size == 0 || covering_categories.empty() || covering_categories.size() % subset_size != 0) {
    detail::fail(ErrorKind::configuration, "dataset",
                 "subset size " + std::to_string(subset_size) + " does not divide " + std::to_string(covering_categories.size()) +
                     " covering categories");
  }
  std::vector<std::string> order = covering_categories;
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(order));

  SubsetFamily family;
  family.covering_categories = covering_categories;
  for (std::size_t start = 0; start < order.size(); start += subset_size) {
    std::vector<std::string> subset(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(start + subset_size));
    DatasetManifest m = build_bg_manifest(source, subset);
    family.subsets.push_back({std::move(subset), std::move(m)});
  }
  return family;
}

// Keeps every foreground example and a seeded uniform sample of
// ceil(fraction * #background) background training examples. Test split untouched.
inline DatasetManifest downsample_background(const DatasetManifest& manifest, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    detail::fail(ErrorKind::configuration, "dataset", "downsampling fraction must lie in (0, 1], got " + detail::format_real(fraction));
  }
  if (fraction == 1.0) return manifest;

  std::vector<std::size_t> background;
  for (std::size_t i = 0; i < manifest.examples.size(); ++i) {
    const auto& e = manifest.examples[i];
    if (e.split == Split::train && e.main_label == 0) background.push_back(i);
  }
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(background.size()) - 1e-9));
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(background));
  std::vector<bool> drop(manifest.examples.size(), false);
  for (std::size_t j = keep; j < background.size(); ++j) drop[background[j]] = true;

  DatasetManifest out = manifest;
  out.examples.clear();
  for (std::size_t i = 0; i < manifest.examples.size(); ++i) {
    if (!drop[i]) out.examples.push_back(manifest.examples[i]);
  }
  out.background_fraction = out.count_background_fraction();
  out.append_provenance("downsample(fraction=" + detail::format_real(fraction) + ", seed=" + std::to_string(seed) + ")");
  return out;
}

struct SyntheticParams {
  std::size_t categories = 55;
  double zipf_exponent = 1.0;
  std::size_t examples_total = 23530;
  std::size_t dim = 32;
  double spread = 1.0;            // per-coordinate std-dev of each blob
  double center_distance = 6.0;   // expected distance between two blob centers
  // Optional taxonomy: categories are dealt (seeded) into groups of
  // `group_size` whose centers sit `sibling_distance` apart on average around
  // a shared group center. group_size = 1 gives independent blobs.
  std::size_t group_size = 1;
  double sibling_distance = 0.0;
  // Centers span a random `signal_dim`-dimensional subspace (0 = all of R^d);
  // the remaining directions carry only blob noise.
  std::size_t signal_dim = 0;
  double test_fraction = 0.15;
  std::uint64_t seed = 0;
};

// Category sizes proportional to rank^-s, rounded by largest remainder so they
// sum to `total` exactly.
inline std::vector<std::size_t> zipf_counts(std::size_t categories, double exponent, std::size_t total) {
  std::vector<double> weight(categories);
  for (std::size_t r = 0; r < categories; ++r) weight[r] = std::pow(static_cast<double>(r + 1), -exponent);
  const double sum = std::accumulate(weight.begin(), weight.end(), 0.0);
  std::vector<std::size_t> counts(categories);
  std::vector<std::pair<double, std::size_t>> remainder(categories);
  std::size_t assigned = 0;
  for (std::size_t r = 0; r < categories; ++r) {
    const double exact = static_cast<double>(total) * weight[r] / sum;
    counts[r] = static_cast<std::size_t>(std::floor(exact));
    remainder[r] = {exact - static_cast<double>(counts[r]), r};
    assigned += counts[r];
  }
  std::stable_sort(remainder.begin(), remainder.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[remainder[i % categories].second];
  return counts;
}

inline std::string category_name(std::size_t rank, std::size_t categories) {
  const int width = categories > 1000 ? 4 : 3;
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%0*zu", width, rank);
  return buf;
}

// Gaussian blobs with long-tailed category sizes. Category "c000" is the most
// frequent. Each category is split train/test with at least one example on
// each side. The result is a source manifest: every example is labeled 0.
inline DatasetManifest generate_synthetic_longtail(const SyntheticParams& p) {
  auto bad = [](const std::string& what) { detail::fail(ErrorKind::configuration, "dataset", what); };
  if (p.categories < 2) bad("need at least 2 categories");
  if (p.dim < 2) bad("need at least 2 feature dimensions");
  if (!(p.spread > 0.0) || !(p.center_distance >= 0.0)) bad("spread must be > 0 and center_distance >= 0");
  if (!(p.test_fraction > 0.0 && p.test_fraction < 1.0)) bad("test_fraction must lie in (0, 1)");

  const std::vector<std::size_t> counts = zipf_counts(p.categories, p.zipf_exponent, p.examples_total);
  for (std::size_t r = 0; r < counts.size(); ++r) {
    if (counts[r] < 2) bad("category " + category_name(r, p.categories) + " would receive " + std::to_string(counts[r]) + " examples");
  }

  if (p.group_size == 0) bad("group_size must be positive");

  if (p.signal_dim > p.dim) bad("signal_dim exceeds dim");
  const std::size_t sdim = p.signal_dim == 0 ? p.dim : p.signal_dim;

  // Centers ~ N(0, s^2 I) in signal space with s chosen so E|c_i - c_j| ~ center_distance.
  Rng center_rng = Rng::derive(p.seed, 11);
  const double root = std::sqrt(2.0 * static_cast<double>(sdim));
  const double center_scale = p.center_distance / root;
  const double sibling_scale = p.sibling_distance / root;
  std::vector<std::size_t> group_order(p.categories);
  std::iota(group_order.begin(), group_order.end(), std::size_t{0});
  if (p.group_size > 1) Rng::derive(p.seed, 15).shuffle(std::span<std::size_t>(group_order));
  std::vector<std::vector<double>> centers(p.categories, std::vector<double>(sdim));
  std::vector<double> group_center(sdim);
  for (std::size_t i = 0; i < p.categories; ++i) {
    auto& c = centers[group_order[i]];
    if (p.group_size == 1) {
      for (double& v : c) v = center_scale * center_rng.normal();
      continue;
    }
    if (i % p.group_size == 0) {
      for (double& v : group_center) v = center_scale * center_rng.normal();
    }
    for (std::size_t k = 0; k < sdim; ++k) c[k] = group_center[k] + sibling_scale * center_rng.normal();
  }
  if (sdim < p.dim) {
    // Embed through a random orthonormal basis (Gram-Schmidt on Gaussian vectors).
    Rng basis_rng = Rng::derive(p.seed, 16);
    std::vector<std::vector<double>> basis;
    while (basis.size() < sdim) {
      std::vector<double> v(p.dim);
      for (double& x : v) x = basis_rng.normal();
      for (const auto& b : basis) {
        const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
        for (std::size_t k = 0; k < p.dim; ++k) v[k] -= dot * b[k];
      }
      const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      if (norm < 1e-6) continue;
      for (double& x : v) x /= norm;
      basis.push_back(std::move(v));
    }
    for (auto& c : centers) {
      std::vector<double> full(p.dim, 0.0);
      for (std::size_t j = 0; j < sdim; ++j) {
        for (std::size_t k = 0; k < p.dim; ++k) full[k] += c[j] * basis[j][k];
      }
      c = std::move(full);
    }
  }

  Rng point_rng = Rng::derive(p.seed, 12);
  Rng split_rng = Rng::derive(p.seed, 13);
  std::vector<Example> examples;
  examples.reserve(p.examples_total);
  for (std::size_t r = 0; r < p.categories; ++r) {
    const std::size_t n = counts[r];
    auto n_test = static_cast<std::size_t>(std::llround(p.test_fraction * static_cast<double>(n)));
    n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
    std::vector<Split> splits(n, Split::train);
    std::fill(splits.begin(), splits.begin() + static_cast<std::ptrdiff_t>(n_test), Split::test);
    split_rng.shuffle(std::span<Split>(splits));
    for (std::size_t i = 0; i < n; ++i) {
      Example e;
      e.original_label = category_name(r, p.categories);
      e.features.resize(p.dim);
      for (std::size_t k = 0; k < p.dim; ++k) e.features[k] = centers[r][k] + p.spread * point_rng.normal();
      e.split = splits[i];
      examples.push_back(std::move(e));
    }
  }

  Rng order_rng = Rng::derive(p.seed, 14);
  order_rng.shuffle(std::span<Example>(examples));
  char buf[32];
  for (std::size_t i = 0; i < examples.size(); ++i) {
    std::snprintf(buf, sizeof buf, "ex%06zu", i);
    examples[i].id = buf;
  }

  DatasetManifest m;
  m.examples = std::move(examples);
  m.background_fraction = m.count_background_fraction();
  m.provenance = "synthetic(C=" + std::to_string(p.categories) + ", s=" + detail::format_real(p.zipf_exponent) +
                 ", n=" + std::to_string(p.examples_total) + ", d=" + std::to_string(p.dim) +
                 ", spread=" + detail::format_real(p.spread) + ", center_distance=" + detail::format_real(p.center_distance) +
                 (p.signal_dim > 0 ? ", signal_dim=" + std::to_string(p.signal_dim) : std::string{}) +
                 (p.group_size > 1 ? ", group_size=" + std::to_string(p.group_size) + ", sibling_distance=" + detail::format_real(p.sibling_distance) : std::string{}) +
                 ", seed=" + std::to_string(p.seed) + ")";
  return m;
}

struct ClassCounts {
  std::size_t train = 0;
  std::size_t test = 0;
};

struct ManifestStats {
  std::map<int, ClassCounts> per_class;  // keyed by main label
  std::size_t train_examples = 0;
  std::size_t test_examples = 0;
  double background_fraction = 0.0;
  std::optional<double> max_pseudo_share;  // largest aux-label share of train examples
  std::optional<int> max_pseudo_label;
};

inline ManifestStats manifest_stats(const DatasetManifest& manifest) {
  ManifestStats s;
  std::map<int, std::size_t> aux_counts;
  std::size_t with_aux = 0;
  for (int n = 0; n <= static_cast<int>(manifest.num_foreground); ++n) s.per_class[n];
  for (const auto& e : manifest.examples) {
    auto& c = s.per_class[e.main_label];
    if (e.split == Split::train) {
      ++c.train;
      ++s.train_examples;
      if (e.aux_label) {
        ++aux_counts[*e.aux_label];
        ++with_aux;
      }
    } else {
      ++c.test;
      ++s.test_examples;
    }
  }
  s.background_fraction = manifest.count_background_fraction();
  if (with_aux > 0) {
    const auto top = std::max_element(aux_counts.begin(), aux_counts.end(),
                                      [](const auto& a, const auto& b) { return a.second < b.second; });
    s.max_pseudo_share = static_cast<double>(top->second) / static_cast<double>(with_aux);
    s.max_pseudo_label = top->first;
  }
  return s;
}

// Helper for small-N protocols: the `count` least frequent categories of a
// source manifest (by total example count, ties by name), rarest last.
inline std::vector<std::string> rarest_categories(const DatasetManifest& source, std::size_t count) {
  std::map<std::string, std::size_t> freq;
  for (const auto& e : source.examples) ++freq[e.original_label];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (count > ranked.size()) detail::fail(ErrorKind::configuration, "dataset", "asked for more categories than the source holds");
  std::vector<std::string> out;
  for (std::size_t i = ranked.size() - count; i < ranked.size(); ++i) out.push_back(ranked[i].first);
  return out;
}

}  // namespace bgsplit

#endif  // BGSPLIT_DATASET_HPP
