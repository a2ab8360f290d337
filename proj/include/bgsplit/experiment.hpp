#ifndef BGSPLIT_EXPERIMENT_HPP
#define BGSPLIT_EXPERIMENT_HPP

// Experiment studies driven by a JSON spec file: factor analysis, pseudo-label
// sources, one-axis sweeps and the frozen-trunk transfer study. Each (variant,
// seed) run is keyed by a hash of its effective inputs; identical runs are
// trained once per process and shared between studies.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bgsplit/dataset.hpp"
#include "bgsplit/io.hpp"
#include "bgsplit/metrics.hpp"
#include "bgsplit/pseudolabel.hpp"
#include "bgsplit/trainer.hpp"

#ifndef BGSPLIT_VERSION
#define BGSPLIT_VERSION "0.1.0"
#endif

namespace bgsplit {

// FNV-1a over the canonical (key-sorted, compact) JSON text.
inline std::string hash_json(const nlohmann::json& canonical) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Stable under key reordering: nlohmann::json (not ordered_json) sorts keys.
inline std::string spec_hash(const std::string& spec_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(spec_text);
  } catch (const nlohmann::json::exception& e) {
    detail::fail(ErrorKind::configuration, "experiment", std::string("spec is not valid JSON: ") + e.what());
  }
  return hash_json(j);
}

// ---- spec ------------------------------------------------------------------

// Which source categories become foreground: an explicit list, or the `rarest`
// least frequent categories after skipping the `skip` rarest.
struct ForegroundSelection {
  std::vector<std::string> categories;
  std::size_t rarest = 0;
  std::size_t skip = 0;

  std::vector<std::string> resolve(const DatasetManifest& source) const {
    if (!categories.empty()) return categories;
    if (rarest == 0) detail::fail(ErrorKind::configuration, "experiment", "foreground selection is empty");
    std::vector<std::string> ranked = rarest_categories(source, rarest + skip);
    ranked.resize(rarest);
    return ranked;
  }

  nlohmann::json to_json() const {
    if (!categories.empty()) return {{"categories", categories}};
    return {{"rarest", rarest}, {"skip", skip}};
  }
};

struct DatasetSpec {
  std::optional<SyntheticParams> synthetic;  // seed replaced by the run seed
  std::string manifest_path;                 // source manifest when not synthetic
  ForegroundSelection foreground;
};

struct MethodSpec {
  std::string name;
  TrainConfig config;  // seed replaced by the run seed
};

struct SourceSpec {
  std::string name;
  PseudoLabelSource source;  // seed replaced by the run seed
};

enum class StudyKind { factor_analysis, pseudolabel_study, sweep, transfer };

struct ExperimentSpec {
  StudyKind study = StudyKind::factor_analysis;
  DatasetSpec dataset;
  PseudoLabelSource pseudolabels;  // for methods with use_aux
  std::vector<MethodSpec> methods;
  std::vector<SourceSpec> sources;  // pseudolabel_study
  std::vector<std::uint64_t> seeds;
  std::string sweep_axis;  // batch_size | bg_fraction | N
  std::vector<double> sweep_values;
  ForegroundSelection transfer_target;  // S2; S1 is dataset.foreground
  TrainConfig head_config;              // transfer: head-only retraining
  std::string spec_hash;
};

namespace detail {

inline SyntheticParams synthetic_from_json(const Json& j) {
  SyntheticParams p;
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = get_field<std::decay_t<decltype(field)>>(j, key, "experiment");
  };
  take("categories", p.categories);
  take("zipf_exponent", p.zipf_exponent);
  take("examples_total", p.examples_total);
  take("dim", p.dim);
  take("spread", p.spread);
  take("center_distance", p.center_distance);
  take("group_size", p.group_size);
  take("sibling_distance", p.sibling_distance);
  take("signal_dim", p.signal_dim);
  take("test_fraction", p.test_fraction);
  return p;
}

inline nlohmann::json synthetic_to_json(const SyntheticParams& p) {
  return {{"categories", p.categories},   {"zipf_exponent", p.zipf_exponent},   {"examples_total", p.examples_total},
          {"dim", p.dim},                 {"spread", p.spread},                 {"center_distance", p.center_distance},
          {"group_size", p.group_size},   {"sibling_distance", p.sibling_distance}, {"signal_dim", p.signal_dim},
          {"test_fraction", p.test_fraction}, {"seed", p.seed}};
}

inline ForegroundSelection foreground_from_json(const Json& j) {
  ForegroundSelection f;
  if (j.is_array()) {
    f.categories = j.get<std::vector<std::string>>();
  } else {
    if (j.contains("categories")) f.categories = get_field<std::vector<std::string>>(j, "categories", "experiment");
    if (j.contains("rarest")) f.rarest = get_field<std::size_t>(j, "rarest", "experiment");
    if (j.contains("skip")) f.skip = get_field<std::size_t>(j, "skip", "experiment");
  }
  return f;
}

inline PseudoLabelSource source_from_json(const Json& j) {
  PseudoLabelSource s;
  s.kind = parse_pseudolabel_kind(get_field<std::string>(j, "kind", "experiment"));
  if (j.contains("K")) s.num_labels = get_field<std::size_t>(j, "K", "experiment");
  if (j.contains("path")) s.path = get_field<std::string>(j, "path", "experiment");
  if (j.contains("max_iters")) s.kmeans.max_iters = get_field<std::size_t>(j, "max_iters", "experiment");
  if (j.contains("minibatch_size")) s.kmeans.minibatch_size = get_field<std::size_t>(j, "minibatch_size", "experiment");
  if (j.contains("restarts")) s.kmeans.restarts = get_field<std::size_t>(j, "restarts", "experiment");
  if (s.kmeans.restarts == 0) fail(ErrorKind::configuration, "experiment", "k-means restarts must be >= 1");
  if ((s.kind == PseudoLabelKind::random || s.kind == PseudoLabelKind::cluster) && s.num_labels < 1) {
    fail(ErrorKind::configuration, "experiment", std::string(to_string(s.kind)) + " pseudo-labels need K >= 1");
  }
  return s;
}

inline nlohmann::json source_to_json(const PseudoLabelSource& s) {
  nlohmann::json j = {{"kind", to_string(s.kind)}};
  switch (s.kind) {
    case PseudoLabelKind::none: break;
    case PseudoLabelKind::random: j["K"] = s.num_labels; j["seed"] = s.seed; break;
    case PseudoLabelKind::cluster:
      j["K"] = s.num_labels;
      j["seed"] = s.seed;
      j["max_iters"] = s.kmeans.max_iters;
      j["minibatch_size"] = s.kmeans.minibatch_size;
      j["restarts"] = s.kmeans.restarts;
      break;
    case PseudoLabelKind::external: j["path"] = s.path; j["K"] = s.num_labels; break;
  }
  return j;
}

inline StudyKind parse_study(const std::string& s) {
  if (s == "factor_analysis") return StudyKind::factor_analysis;
  if (s == "pseudolabel_study") return StudyKind::pseudolabel_study;
  if (s == "sweep") return StudyKind::sweep;
  if (s == "transfer") return StudyKind::transfer;
  fail(ErrorKind::configuration, "experiment", "unknown study '" + s + "'");
}

}  // namespace detail

inline const char* to_string(StudyKind k) {
  switch (k) {
    case StudyKind::factor_analysis: return "factor_analysis";
    case StudyKind::pseudolabel_study: return "pseudolabel_study";
    case StudyKind::sweep: return "sweep";
    case StudyKind::transfer: return "transfer";
  }
  return "";
}

namespace detail {

inline ExperimentSpec parse_experiment_spec_impl(const std::string& text, const std::string& base_dir) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    detail::fail(ErrorKind::configuration, "experiment", std::string("spec is not valid JSON: ") + e.what());
  }
  ExperimentSpec spec;
  spec.spec_hash = spec_hash(text);
  spec.study = detail::parse_study(detail::get_field<std::string>(j, "study", "experiment"));

  const Json& ds = j.at("dataset");
  if (ds.contains("synthetic")) {
    spec.dataset.synthetic = detail::synthetic_from_json(ds.at("synthetic"));
  } else {
    std::filesystem::path p = detail::get_field<std::string>(ds, "manifest", "experiment");
    if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
    if (!std::filesystem::exists(p)) detail::fail(ErrorKind::configuration, "experiment", "manifest '" + p.string() + "' does not exist");
    spec.dataset.manifest_path = p.string();
  }
  spec.dataset.foreground = detail::foreground_from_json(ds.at("foreground"));

  if (j.contains("pseudolabels")) spec.pseudolabels = detail::source_from_json(j.at("pseudolabels"));
  if (spec.pseudolabels.kind == PseudoLabelKind::external) {
    std::filesystem::path p = spec.pseudolabels.path;
    if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
    if (!std::filesystem::exists(p)) detail::fail(ErrorKind::configuration, "experiment", "pseudo-label file '" + p.string() + "' does not exist");
    spec.pseudolabels.path = p.string();
  }

  const TrainConfig base = j.contains("train") ? train_config_from_json(j.at("train")) : TrainConfig{};
  std::set<std::string> names;
  if (j.contains("methods")) {
    for (const auto& m : j.at("methods")) {
      MethodSpec method{detail::get_field<std::string>(m, "name", "experiment"), train_config_from_json(m, base)};
      if (!names.insert(method.name).second) detail::fail(ErrorKind::configuration, "experiment", "duplicate method name '" + method.name + "'");
      spec.methods.push_back(std::move(method));
    }
  }
  if (j.contains("sources")) {
    std::set<std::string> source_names;
    for (const auto& s : j.at("sources")) {
      SourceSpec src{detail::get_field<std::string>(s, "name", "experiment"), detail::source_from_json(s)};
      if (!source_names.insert(src.name).second) detail::fail(ErrorKind::configuration, "experiment", "duplicate source name '" + src.name + "'");
      spec.sources.push_back(std::move(src));
    }
  }
  spec.seeds = detail::get_field<std::vector<std::uint64_t>>(j, "seeds", "experiment");
  if (spec.seeds.empty()) detail::fail(ErrorKind::configuration, "experiment", "spec lists no seeds");
  if (j.contains("sweep")) {
    spec.sweep_axis = detail::get_field<std::string>(j.at("sweep"), "axis", "experiment");
    spec.sweep_values = detail::get_field<std::vector<double>>(j.at("sweep"), "values", "experiment");
  }
  if (j.contains("transfer")) {
    spec.transfer_target = detail::foreground_from_json(j.at("transfer").at("target"));
    spec.head_config = j.at("transfer").contains("head") ? train_config_from_json(j.at("transfer").at("head"), base) : base;
  }

  switch (spec.study) {
    case StudyKind::factor_analysis:
    case StudyKind::sweep:
      if (spec.methods.empty()) detail::fail(ErrorKind::configuration, "experiment", "spec lists no methods");
      if (spec.study == StudyKind::sweep) {
        if (spec.sweep_axis != "batch_size" && spec.sweep_axis != "bg_fraction" && spec.sweep_axis != "N") {
          detail::fail(ErrorKind::configuration, "experiment", "sweep axis must be batch_size, bg_fraction or N");
        }
        if (spec.sweep_values.empty()) detail::fail(ErrorKind::configuration, "experiment", "sweep lists no values");
      }
      break;
    case StudyKind::pseudolabel_study:
      if (spec.sources.empty()) detail::fail(ErrorKind::configuration, "experiment", "pseudo-label study lists no sources");
      if (spec.methods.size() > 1) detail::fail(ErrorKind::configuration, "experiment", "pseudo-label study takes at most one method");
      break;
    case StudyKind::transfer:
      if (spec.methods.size() != 2) {
        detail::fail(ErrorKind::configuration, "experiment", "transfer study needs exactly two methods (baseline, then BG splitting)");
      }
      if (spec.transfer_target.categories.empty() && spec.transfer_target.rarest == 0) {
        detail::fail(ErrorKind::configuration, "experiment", "transfer study needs a target foreground set");
      }
      break;
  }
  return spec;
}

}  // namespace detail

inline ExperimentSpec parse_experiment_spec(const std::string& text, const std::string& base_dir = ".") {
  try {
    return detail::parse_experiment_spec_impl(text, base_dir);
  } catch (const nlohmann::json::exception& e) {
    detail::fail(ErrorKind::configuration, "experiment", std::string("malformed spec: ") + e.what());
  }
}

inline ExperimentSpec load_experiment_spec(const std::string& path) {
  return parse_experiment_spec(detail::read_file(path), std::filesystem::path(path).parent_path().string());
}

// The four canonical factor-analysis variants on top of `base`.
inline std::vector<MethodSpec> factor_variants(const TrainConfig& base) {
  std::vector<MethodSpec> out;
  const std::pair<const char*, std::pair<bool, bool>> table[] = {
      {"FT", {false, false}}, {"+Aux", {false, true}}, {"+Thresh", {true, false}}, {"+Both", {true, true}}};
  for (const auto& [name, flags] : table) {
    TrainConfig c = base;
    c.use_thresholding = flags.first;
    c.use_aux = flags.second;
    if (!c.use_aux) c.lambda_g = 0.0;
    out.push_back({name, c});
  }
  return out;
}

// ---- runs ------------------------------------------------------------------

// Everything that determines one train + evaluate run.
struct RunPlan {
  DatasetSpec dataset;
  std::uint64_t seed = 0;
  std::vector<std::string> foreground;
  double bg_fraction = 1.0;
  PseudoLabelSource pseudolabels;
  TrainConfig config;

  // Canonical description; inputs that cannot affect the result are normalised
  // away (pseudo-labels without the aux loss, downsampling at fraction 1).
  nlohmann::json canonical() const {
    nlohmann::json j;
    if (dataset.synthetic) {
      SyntheticParams p = *dataset.synthetic;
      p.seed = seed;
      j["dataset"] = {{"synthetic", detail::synthetic_to_json(p)}};
    } else {
      j["dataset"] = {{"manifest", dataset.manifest_path}};
    }
    j["foreground"] = foreground;
    if (bg_fraction != 1.0) j["downsample"] = {{"fraction", bg_fraction}, {"seed", seed}};
    j["pseudolabels"] = config.use_aux ? detail::source_to_json(pseudolabels) : nlohmann::json{{"kind", "none"}};
    TrainConfig c = config;
    c.seed = seed;
    if (!c.use_aux) c.lambda_g = 0.0;
    j["train"] = nlohmann::json::parse(to_json(c).dump());
    return j;
  }

  std::string hash() const { return hash_json(canonical()); }
};

struct RunOutcome {
  std::string config_hash;
  Checkpoint checkpoint;
  EvalReport report;
  TrainLog log;
  DatasetManifest manifest;  // the manifest the model was trained on
};

// Builds datasets, pseudo-labels, trains and evaluates; memoises by config hash.
class Runner {
 public:
  explicit Runner(std::ostream* progress = nullptr) : progress_(progress) {}

  const DatasetManifest& source(const DatasetSpec& ds, std::uint64_t seed) {
    const std::string key = ds.synthetic ? "synthetic:" + std::to_string(seed) + ":" + detail::synthetic_to_json(*ds.synthetic).dump()
                                         : "manifest:" + ds.manifest_path;
    auto it = sources_.find(key);
    if (it != sources_.end()) return it->second;
    DatasetManifest m;
    if (ds.synthetic) {
      SyntheticParams p = *ds.synthetic;
      p.seed = seed;
      m = generate_synthetic_longtail(p);
    } else {
      m = read_manifest(ds.manifest_path);
    }
    return sources_.emplace(key, std::move(m)).first->second;
  }

  DatasetManifest build_manifest(const RunPlan& plan) {
    DatasetManifest m = build_bg_manifest(source(plan.dataset, plan.seed), plan.foreground);
    m = downsample_background(m, plan.bg_fraction, plan.seed);
    if (plan.config.use_aux) {
      PseudoLabelSource src = plan.pseudolabels;
      src.seed = plan.seed;
      src.kmeans.seed = plan.seed;
      m = attach_pseudolabels(m, src);
    }
    return m;
  }

  const RunOutcome& run(const RunPlan& plan) {
    const std::string hash = plan.hash();
    auto it = cache_.find(hash);
    if (it != cache_.end()) return *it->second;
    const auto start = std::chrono::steady_clock::now();
    auto out = std::make_unique<RunOutcome>();
    out->config_hash = hash;
    out->manifest = build_manifest(plan);
    TrainConfig config = plan.config;
    config.seed = plan.seed;
    TrainResult trained = train(out->manifest, config);
    out->report = evaluate(trained.params, out->manifest, config);
    out->checkpoint = {config, std::move(trained.params)};
    out->log = std::move(trained.log);
    if (progress_) {
      *progress_ << "  run " << hash << " seed " << plan.seed << " mAP " << out->report.map << " meanF1 " << out->report.mean_f1 << " ("
                 << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s)\n";
    }
    return *cache_.emplace(hash, std::move(out)).first->second;
  }

 private:
  std::ostream* progress_;
  std::map<std::string, DatasetManifest> sources_;
  std::map<std::string, std::unique_ptr<RunOutcome>> cache_;
};

// ---- records ---------------------------------------------------------------

struct RunEntry {
  std::string variant;
  std::string axis_value;  // empty outside sweeps
  std::uint64_t seed = 0;
  std::string config_hash;
  EvalReport report;
  std::string directory;
};

struct VariantSummary {
  std::string variant;
  std::string axis_value;
  double map = 0.0;
  double mean_f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t seeds = 0;
};

struct RunRecord {
  std::string spec_hash;
  StudyKind study = StudyKind::factor_analysis;
  std::string axis;
  std::vector<RunEntry> runs;
  std::vector<VariantSummary> summary;  // seed means, in first-seen variant order
  std::string error;                    // set when a variant failed

  const VariantSummary& find(const std::string& variant, const std::string& axis_value = "") const {
    for (const auto& s : summary) {
      if (s.variant == variant && s.axis_value == axis_value) return s;
    }
    detail::fail(ErrorKind::configuration, "experiment", "no summary for variant '" + variant + "'");
  }
};

namespace detail {

inline std::string format_axis(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::string timestamp() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

inline void summarize(RunRecord& record) {
  record.summary.clear();
  for (const auto& r : record.runs) {
    auto it = std::find_if(record.summary.begin(), record.summary.end(),
                           [&](const VariantSummary& s) { return s.variant == r.variant && s.axis_value == r.axis_value; });
    if (it == record.summary.end()) {
      record.summary.push_back({r.variant, r.axis_value});
      it = record.summary.end() - 1;
    }
    it->map += r.report.map;
    it->mean_f1 += r.report.mean_f1;
    it->precision += r.report.mean_precision();
    it->recall += r.report.mean_recall();
    ++it->seeds;
  }
  for (auto& s : record.summary) {
    const double n = static_cast<double>(s.seeds);
    s.map /= n;
    s.mean_f1 /= n;
    s.precision /= n;
    s.recall /= n;
  }
}

}  // namespace detail

inline std::string summary_csv(const RunRecord& record) {
  std::string out = record.axis.empty() ? "variant,mAP,meanF1,precision,recall,seeds\n"
                                        : "variant," + record.axis + ",mAP,meanF1,precision,recall,seeds\n";
  char buf[256];
  for (const auto& s : record.summary) {
    out += s.variant;
    if (!record.axis.empty()) out += "," + s.axis_value;
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%zu\n", s.map, s.mean_f1, s.precision, s.recall, s.seeds);
    out += buf;
  }
  return out;
}

inline std::string runs_csv(const RunRecord& record) {
  std::string out = record.axis.empty() ? "variant,seed,config_hash,mAP,meanF1,precision,recall\n"
                                        : "variant," + record.axis + ",seed,config_hash,mAP,meanF1,precision,recall\n";
  char buf[256];
  for (const auto& r : record.runs) {
    out += r.variant;
    if (!record.axis.empty()) out += "," + r.axis_value;
    std::snprintf(buf, sizeof buf, ",%llu,%s,%.6f,%.6f,%.6f,%.6f\n", static_cast<unsigned long long>(r.seed), r.config_hash.c_str(),
                  r.report.map, r.report.mean_f1, r.report.mean_precision(), r.report.mean_recall());
    out += buf;
  }
  return out;
}

// Writes one directory per (variant, axis value, seed) under `out_dir`, each
// assembled in a temporary directory and renamed into place when complete.
class RecordWriter {
 public:
  RecordWriter(std::string out_dir, std::string study) : root_(std::filesystem::path(out_dir) / study) {
    if (!out_dir.empty()) std::filesystem::create_directories(root_);
    enabled_ = !out_dir.empty();
  }

  std::string write_run(const RunEntry& entry, const Checkpoint& ck, const TrainLog& log) {
    if (!enabled_) return {};
    std::string leaf = entry.variant;
    for (char& c : leaf) {
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    }
    std::filesystem::path dir = root_ / leaf;
    if (!entry.axis_value.empty()) dir /= "value_" + entry.axis_value;
    dir /= "seed_" + std::to_string(entry.seed);
    const std::filesystem::path tmp = dir.string() + ".partial";
    std::filesystem::remove_all(tmp);
    std::filesystem::create_directories(tmp);
    const Json echo = Json{{"config_hash", entry.config_hash}, {"variant", entry.variant}, {"train", to_json(ck.config)}};
    detail::write_file((tmp / "checkpoint.json").string(), write_checkpoint_string(ck));
    detail::write_file((tmp / "report.json").string(), write_report_string(entry.report, echo));
    detail::write_file((tmp / "metrics.csv").string(), write_report_csv(entry.report));
    detail::write_file((tmp / "train_log.json").string(), to_json(log).dump(2) + "\n");
    std::filesystem::remove_all(dir);
    std::filesystem::rename(tmp, dir);
    return dir.string();
  }

  void finish(const RunRecord& record, const std::string& started) {
    if (!enabled_) return;
    Json runs = Json::array();
    for (const auto& r : record.runs) {
      runs.push_back({{"variant", r.variant}, {"axis_value", r.axis_value}, {"seed", r.seed}, {"config_hash", r.config_hash},
                      {"mAP", r.report.map}, {"meanF1", r.report.mean_f1}, {"directory", r.directory}});
    }
    Json j;
    j["spec_hash"] = record.spec_hash;
    j["study"] = to_string(record.study);
    j["environment"] = {{"version", BGSPLIT_VERSION}, {"started", started}, {"finished", detail::timestamp()}};
    j["runs"] = runs;
    if (!record.error.empty()) j["error"] = record.error;
    write_file_atomic((root_ / "record.json").string(), j.dump(2) + "\n");
    write_file_atomic((root_ / "summary.csv").string(), summary_csv(record));
    write_file_atomic((root_ / "runs.csv").string(), runs_csv(record));
  }

 private:
  std::filesystem::path root_;
  bool enabled_ = false;
};

namespace detail {

// Executes `jobs` in order, recording each; a failure stops the study, keeps
// the finished runs on disk and is rethrown after the record is written.
template <typename Job>
RunRecord execute(const ExperimentSpec& spec, const std::string& out_dir, const std::string& axis, std::vector<Job>& jobs) {
  RunRecord record;
  record.spec_hash = spec.spec_hash;
  record.study = spec.study;
  record.axis = axis;
  RecordWriter writer(out_dir, axis.empty() ? std::string(to_string(spec.study)) : "sweep_" + axis);
  const std::string started = timestamp();
  try {
    for (auto& job : jobs) {
      record.runs.push_back(job(writer));
    }
  } catch (const std::exception& e) {
    record.error = e.what();
    summarize(record);
    writer.finish(record, started);
    throw;
  }
  summarize(record);
  writer.finish(record, started);
  return record;
}

}  // namespace detail

using StudyJob = std::function<RunEntry(RecordWriter&)>;

inline StudyJob plan_job(Runner& runner, std::string variant, std::string axis_value, RunPlan plan) {
  return [&runner, variant = std::move(variant), axis_value = std::move(axis_value), plan = std::move(plan)](RecordWriter& writer) {
    const RunOutcome& outcome = runner.run(plan);
    RunEntry e{variant, axis_value, plan.seed, outcome.config_hash, outcome.report, {}};
    e.directory = writer.write_run(e, outcome.checkpoint, outcome.log);
    return e;
  };
}

inline RunPlan base_plan(const ExperimentSpec& spec, Runner& runner, std::uint64_t seed, const TrainConfig& config) {
  RunPlan plan;
  plan.dataset = spec.dataset;
  plan.seed = seed;
  plan.foreground = spec.dataset.foreground.resolve(runner.source(spec.dataset, seed));
  plan.pseudolabels = spec.pseudolabels;
  plan.config = config;
  return plan;
}

// One run per method variant and seed.
inline RunRecord run_factor_analysis(const ExperimentSpec& spec, Runner& runner, const std::string& out_dir = "") {
  std::vector<StudyJob> jobs;
  for (const auto& method : spec.methods) {
    for (std::uint64_t seed : spec.seeds) jobs.push_back(plan_job(runner, method.name, "", base_plan(spec, runner, seed, method.config)));
  }
  return detail::execute(spec, out_dir, "", jobs);
}

// One thresholded run per pseudo-label source; `none` disables the aux loss.
inline RunRecord run_pseudolabel_study(const ExperimentSpec& spec, Runner& runner, const std::string& out_dir = "") {
  TrainConfig base = spec.methods.empty() ? TrainConfig{} : spec.methods.front().config;
  std::vector<StudyJob> jobs;
  for (const auto& src : spec.sources) {
    for (std::uint64_t seed : spec.seeds) {
      TrainConfig c = base;
      c.use_aux = src.source.kind != PseudoLabelKind::none;
      if (!c.use_aux) c.lambda_g = 0.0;
      RunPlan plan = base_plan(spec, runner, seed, c);
      plan.pseudolabels = src.source;
      jobs.push_back(plan_job(runner, src.name, "", plan));
    }
  }
  return detail::execute(spec, out_dir, "", jobs);
}

// One train + evaluate per axis value, method and seed. The N axis partitions
// the foreground set into subsets of that size and averages their reports.
inline RunRecord run_sweep(const ExperimentSpec& spec, Runner& runner, const std::string& out_dir = "") {
  std::vector<StudyJob> jobs;
  for (double value : spec.sweep_values) {
    const std::string axis_value = detail::format_axis(value);
    for (const auto& method : spec.methods) {
      for (std::uint64_t seed : spec.seeds) {
        RunPlan plan = base_plan(spec, runner, seed, method.config);
        if (spec.sweep_axis == "batch_size") {
          if (!(value >= 1.0) || value != std::floor(value)) detail::fail(ErrorKind::configuration, "experiment", "batch sizes must be positive integers");
          plan.config.batch_size = static_cast<std::size_t>(value);
          jobs.push_back(plan_job(runner, method.name, axis_value, plan));
        } else if (spec.sweep_axis == "bg_fraction") {
          plan.bg_fraction = value;
          jobs.push_back(plan_job(runner, method.name, axis_value, plan));
        } else {
          if (!(value >= 1.0) || value != std::floor(value)) detail::fail(ErrorKind::configuration, "experiment", "N values must be positive integers");
          const auto subset_size = static_cast<std::size_t>(value);
          jobs.push_back([&runner, &spec, plan, subset_size, name = method.name, axis_value](RecordWriter& writer) {
            const SubsetFamily family = build_subset_family(runner.source(plan.dataset, plan.seed), plan.foreground, subset_size, plan.seed);
            std::vector<EvalReport> reports;
            std::string hashes;
            for (const auto& subset : family.subsets) {
              RunPlan sub = plan;
              sub.foreground = subset.categories;
              const RunOutcome& outcome = runner.run(sub);
              reports.push_back(outcome.report);
              hashes += hashes.empty() ? outcome.config_hash : "+" + outcome.config_hash;
            }
            RunEntry e{name, axis_value, plan.seed, hash_json(hashes), average_reports(reports), {}};
            (void)spec;
            (void)writer;
            return e;
          });
        }
      }
    }
  }
  return detail::execute(spec, out_dir, spec.sweep_axis, jobs);
}

// Trains both methods on S1, retrains only the main head on S2 from each, and
// trains the second method fully on S2 as the reference.
inline RunRecord run_transfer_study(const ExperimentSpec& spec, Runner& runner, const std::string& out_dir = "") {
  std::vector<StudyJob> jobs;
  for (std::uint64_t seed : spec.seeds) {
    const DatasetManifest& src = runner.source(spec.dataset, seed);
    const std::vector<std::string> s1 = spec.dataset.foreground.resolve(src);
    const std::vector<std::string> s2 = spec.transfer_target.resolve(src);
    for (const auto& c : s2) {
      if (std::find(s1.begin(), s1.end(), c) != s1.end()) {
        detail::fail(ErrorKind::configuration, "experiment", "transfer sets overlap on category '" + c + "'");
      }
    }
    for (const auto& method : spec.methods) {
      const std::string variant = "head-on-" + method.name;
      RunPlan plan = base_plan(spec, runner, seed, method.config);
      jobs.push_back([&runner, &spec, plan, s2, variant](RecordWriter& writer) {
        const RunOutcome& pretrained = runner.run(plan);
        DatasetManifest target = build_bg_manifest(runner.source(plan.dataset, plan.seed), s2);
        TrainConfig head = spec.head_config;
        head.seed = plan.seed;
        head.use_aux = false;
        ModelParams params = freeze_trunk_and_retrain_head(pretrained.checkpoint.params, target, head);
        if (params.trunk != pretrained.checkpoint.params.trunk) {
          detail::fail(ErrorKind::numerical_divergence, "experiment", "trunk changed during head-only retraining");
        }
        RunEntry e{variant, "", plan.seed, hash_json(nlohmann::json{{"pretrained", pretrained.config_hash}, {"target", s2},
                                                                   {"head", nlohmann::json::parse(to_json(head).dump())}}),
                   evaluate(params, target, head), {}};
        e.directory = writer.write_run(e, Checkpoint{head, std::move(params)}, TrainLog{});
        return e;
      });
    }
    RunPlan full = base_plan(spec, runner, seed, spec.methods.back().config);
    full.foreground = s2;
    jobs.push_back(plan_job(runner, "full-" + spec.methods.back().name, "", full));
  }
  return detail::execute(spec, out_dir, "", jobs);
}

inline RunRecord run_study(const ExperimentSpec& spec, Runner& runner, const std::string& out_dir = "") {
  switch (spec.study) {
    case StudyKind::factor_analysis: return run_factor_analysis(spec, runner, out_dir);
    case StudyKind::pseudolabel_study: return run_pseudolabel_study(spec, runner, out_dir);
    case StudyKind::sweep: return run_sweep(spec, runner, out_dir);
    case StudyKind::transfer: return run_transfer_study(spec, runner, out_dir);
  }
  return {};
}

}  // namespace bgsplit

#endif  // BGSPLIT_EXPERIMENT_HPP
