// bgsplit command-line front end.
// Exit status: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bgsplit/bgsplit.hpp"

namespace {

using namespace bgsplit;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_exists(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path)) throw UsageError(std::string(what) + " '" + path + "' does not exist");
}

void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::vector<std::string> split_list(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::size_t start = 0;
    while (start <= item.size()) {
      const std::size_t comma = item.find(',', start);
      const std::string part = item.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!part.empty()) out.push_back(part);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  return out;
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
  std::optional<std::size_t> categories, examples, dim, signal_dim, group_size;
  std::optional<double> zipf, spread, center_distance, sibling_distance, test_fraction;
};

int cmd_synth(const SynthArgs& a) {
  SyntheticParams p;
  if (!a.config.empty()) {
    ensure_exists(a.config, "config");
    p = detail::synthetic_from_json(Json::parse(detail::read_file(a.config)));
  }
  if (a.categories) p.categories = *a.categories;
  if (a.examples) p.examples_total = *a.examples;
  if (a.dim) p.dim = *a.dim;
  if (a.signal_dim) p.signal_dim = *a.signal_dim;
  if (a.group_size) p.group_size = *a.group_size;
  if (a.zipf) p.zipf_exponent = *a.zipf;
  if (a.spread) p.spread = *a.spread;
  if (a.center_distance) p.center_distance = *a.center_distance;
  if (a.sibling_distance) p.sibling_distance = *a.sibling_distance;
  if (a.test_fraction) p.test_fraction = *a.test_fraction;
  p.seed = a.seed;
  ensure_parent(a.out);
  write_file_atomic(a.out, write_manifest_string(generate_synthetic_longtail(p)));
  return 0;
}

// ---- build -----------------------------------------------------------------

struct BuildArgs {
  std::string manifest;
  std::string out;
  std::vector<std::string> foreground;
  std::size_t rarest = 0;
  std::size_t skip = 0;
  double downsample = 1.0;
  std::optional<std::uint64_t> seed;
};

int cmd_build(const BuildArgs& a) {
  ensure_exists(a.manifest, "manifest");
  if (a.foreground.empty() == (a.rarest == 0)) throw UsageError("give exactly one of --foreground or --rarest");
  if (a.downsample != 1.0 && !a.seed) throw UsageError("--downsample needs --seed");
  const DatasetManifest source = read_manifest(a.manifest);
  ForegroundSelection sel;
  sel.categories = split_list(a.foreground);
  sel.rarest = a.rarest;
  sel.skip = a.skip;
  DatasetManifest m = build_bg_manifest(source, sel.resolve(source));
  m = downsample_background(m, a.downsample, a.seed.value_or(0));
  ensure_parent(a.out);
  write_file_atomic(a.out, write_manifest_string(m));
  return 0;
}

// ---- pseudolabel -----------------------------------------------------------

struct PseudoArgs {
  std::string manifest;
  std::string out;
  std::string source = "cluster";
  std::size_t k = 0;
  std::string file;
  std::optional<std::uint64_t> seed;
  std::size_t max_iters = KMeansParams{}.max_iters;
  std::size_t minibatch = KMeansParams{}.minibatch_size;
  std::size_t restarts = KMeansParams{}.restarts;
};

int cmd_pseudolabel(const PseudoArgs& a) {
  ensure_exists(a.manifest, "manifest");
  const PseudoLabelKind kind = parse_pseudolabel_kind(a.source);
  PseudoLabelSource src;
  switch (kind) {
    case PseudoLabelKind::none: src = PseudoLabelSource::none(); break;
    case PseudoLabelKind::random:
    case PseudoLabelKind::cluster: {
      if (!a.seed) throw UsageError("--source " + a.source + " needs --seed");
      if (a.k == 0) throw UsageError("--source " + a.source + " needs --K >= 1");
      if (kind == PseudoLabelKind::random) {
        src = PseudoLabelSource::random(a.k, *a.seed);
      } else {
        KMeansParams km;
        km.max_iters = a.max_iters;
        km.minibatch_size = a.minibatch;
        km.restarts = a.restarts;
        src = PseudoLabelSource::cluster(a.k, *a.seed, km);
      }
      break;
    }
    case PseudoLabelKind::external:
      if (a.file.empty()) throw UsageError("--source external needs --file");
      ensure_exists(a.file, "pseudo-label file");
      src = PseudoLabelSource::external(a.file);
      if (a.k) src.num_labels = a.k;
      break;
  }
  const DatasetManifest m = attach_pseudolabels(read_manifest(a.manifest), src);
  ensure_parent(a.out);
  write_file_atomic(a.out, write_manifest_string(m));
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string config;
  std::string out;
  std::string log;
  std::uint64_t seed = 0;
  std::optional<double> lambda_g, b0, lr, momentum, weight_decay, lr_gamma;
  std::optional<std::size_t> batch_size, epochs, lr_step_epochs;
  std::optional<std::string> sampling;
  std::optional<bool> thresholding, aux;
  std::vector<std::size_t> trunk;
  bool trunk_given = false;
  std::string head_from;  // checkpoint whose trunk is frozen
};

TrainConfig train_config(const TrainArgs& a) {
  TrainConfig c;
  if (!a.config.empty()) {
    ensure_exists(a.config, "config");
    c = train_config_from_json(Json::parse(detail::read_file(a.config)));
  }
  if (a.lambda_g) c.lambda_g = *a.lambda_g;
  if (a.b0) c.b0 = *a.b0;
  if (a.lr) c.learning_rate = *a.lr;
  if (a.momentum) c.momentum = *a.momentum;
  if (a.weight_decay) c.weight_decay = *a.weight_decay;
  if (a.lr_gamma) c.lr_gamma = *a.lr_gamma;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.lr_step_epochs) c.lr_step_epochs = *a.lr_step_epochs;
  if (a.sampling) c.sampling = parse_sampling(*a.sampling);
  if (a.thresholding) c.use_thresholding = *a.thresholding;
  if (a.aux) c.use_aux = *a.aux;
  if (a.trunk_given) c.trunk_shape = a.trunk;
  c.seed = a.seed;
  c.validate();
  return c;
}

int cmd_train(const TrainArgs& a) {
  ensure_exists(a.manifest, "manifest");
  const TrainConfig config = train_config(a);
  const DatasetManifest m = read_manifest(a.manifest);
  Checkpoint ck;
  ck.config = config;
  TrainLog log;
  if (!a.head_from.empty()) {
    ensure_exists(a.head_from, "checkpoint");
    TrainConfig head = config;
    head.use_aux = false;
    ck.config = head;
    ck.params = freeze_trunk_and_retrain_head(read_checkpoint(a.head_from).params, m, head);
  } else {
    TrainResult r = train(m, config);
    ck.params = std::move(r.params);
    log = std::move(r.log);
  }
  ensure_parent(a.out);
  write_file_atomic(a.out, write_checkpoint_string(ck));
  if (!a.log.empty()) {
    ensure_parent(a.log);
    write_file_atomic(a.log, to_json(log).dump(2) + "\n");
  }
  return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  ensure_exists(a.checkpoint, "checkpoint");
  ensure_exists(a.manifest, "manifest");
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const EvalReport report = evaluate(ck.params, read_manifest(a.manifest), ck.config);
  std::filesystem::create_directories(a.out);
  const auto dir = std::filesystem::path(a.out);
  write_file_atomic((dir / "report.json").string(), write_report_string(report, Json{{"train", to_json(ck.config)}}));
  write_file_atomic((dir / "metrics.csv").string(), write_report_csv(report));
  std::cout << "mAP " << report.map << " meanF1 " << report.mean_f1 << "\n";
  return 0;
}

// ---- stats -----------------------------------------------------------------

int cmd_stats(const std::string& manifest) {
  ensure_exists(manifest, "manifest");
  const DatasetManifest m = read_manifest(manifest);
  const ManifestStats s = manifest_stats(m);
  Json j;
  j["N"] = m.num_foreground;
  j["K"] = m.num_aux ? Json(*m.num_aux) : Json(nullptr);
  j["train_examples"] = s.train_examples;
  j["test_examples"] = s.test_examples;
  j["background_fraction"] = s.background_fraction;
  if (s.max_pseudo_share) j["max_pseudo_share"] = *s.max_pseudo_share;
  Json classes = Json::object();
  for (const auto& [label, counts] : s.per_class) classes[std::to_string(label)] = {{"train", counts.train}, {"test", counts.test}};
  j["per_class"] = classes;
  std::cout << j.dump(2) << "\n";
  return 0;
}

// ---- run -------------------------------------------------------------------

int cmd_run(const std::string& config, const std::string& out, bool quiet) {
  ensure_exists(config, "spec");
  const ExperimentSpec spec = load_experiment_spec(config);
  Runner runner(quiet ? nullptr : &std::cerr);
  const RunRecord record = run_study(spec, runner, out);
  std::cout << summary_csv(record);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Background-splitting classifiers for rare categories"};
  app.set_version_flag("--version", BGSPLIT_VERSION);
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a long-tailed synthetic source manifest");
  s->add_option("--seed", synth.seed, "Generator seed")->required();
  s->add_option("--out", synth.out, "Output manifest path")->required();
  s->add_option("--config", synth.config, "JSON file with generator parameters");
  s->add_option("--categories", synth.categories, "Number of source categories");
  s->add_option("--examples", synth.examples, "Total examples");
  s->add_option("--dim", synth.dim, "Feature dimension");
  s->add_option("--signal-dim", synth.signal_dim, "Dimension of the subspace holding the class centers (0 = all)");
  s->add_option("--group-size", synth.group_size, "Categories per taxonomy group");
  s->add_option("--zipf", synth.zipf, "Zipf exponent of category sizes");
  s->add_option("--spread", synth.spread, "Per-coordinate std-dev of each category");
  s->add_option("--center-distance", synth.center_distance, "Expected distance between category centers");
  s->add_option("--sibling-distance", synth.sibling_distance, "Expected distance between centers within a group");
  s->add_option("--test-fraction", synth.test_fraction, "Per-category test fraction");

  BuildArgs build;
  auto* b = app.add_subcommand("build", "Relabel a source manifest into foreground classes plus background");
  b->add_option("--manifest", build.manifest, "Source manifest")->required();
  b->add_option("--out", build.out, "Output manifest path")->required();
  b->add_option("--foreground", build.foreground, "Foreground categories (comma separated or repeated)");
  b->add_option("--rarest", build.rarest, "Use the N least frequent categories as foreground");
  b->add_option("--skip", build.skip, "With --rarest, skip this many of the rarest first");
  b->add_option("--downsample", build.downsample, "Keep this fraction of background examples")->check(CLI::Range(0.0, 1.0));
  b->add_option("--seed", build.seed, "Downsampling seed");

  PseudoArgs pseudo;
  auto* p = app.add_subcommand("pseudolabel", "Attach auxiliary pseudo-labels to a manifest");
  p->add_option("--manifest", pseudo.manifest, "Input manifest")->required();
  p->add_option("--out", pseudo.out, "Output manifest path")->required();
  p->add_option("--source", pseudo.source, "none | random | cluster | external")->check(CLI::IsMember({"none", "random", "cluster", "external"}));
  p->add_option("--K", pseudo.k, "Number of pseudo-categories");
  p->add_option("--file", pseudo.file, "External id<TAB>label file");
  p->add_option("--seed", pseudo.seed, "Seed for random or cluster labels");
  p->add_option("--max-iters", pseudo.max_iters, "Mini-batch k-means iterations");
  p->add_option("--minibatch", pseudo.minibatch, "Mini-batch k-means batch size");
  p->add_option("--restarts", pseudo.restarts, "Independent k-means initialisations")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--manifest", tr.manifest, "Training manifest")->required();
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--seed", tr.seed, "Training seed")->required();
  t->add_option("--config", tr.config, "JSON training config (flags override it)");
  t->add_option("--log", tr.log, "Write the per-epoch training log here");
  t->add_option("--lambda-g", tr.lambda_g, "Auxiliary loss weight");
  t->add_option("--b0", tr.b0, "Fixed background logit");
  t->add_option("--lr", tr.lr, "Learning rate");
  t->add_option("--momentum", tr.momentum, "SGD momentum");
  t->add_option("--weight-decay", tr.weight_decay, "L2 weight decay");
  t->add_option("--lr-step-epochs", tr.lr_step_epochs, "Decay the learning rate every this many epochs (0 = never)");
  t->add_option("--lr-gamma", tr.lr_gamma, "Learning-rate decay factor");
  t->add_option("--batch-size", tr.batch_size, "Mini-batch size");
  t->add_option("--epochs", tr.epochs, "Training epochs");
  t->add_option("--sampling", tr.sampling, "uniform | class_balanced")->check(CLI::IsMember({"uniform", "class_balanced"}));
  t->add_option("--thresholding", tr.thresholding, "Fix the background logit (true/false)");
  t->add_option("--aux", tr.aux, "Enable the auxiliary pseudo-label loss (true/false)");
  auto* trunk = t->add_option("--trunk", tr.trunk, "Hidden layer widths (e.g. --trunk 64 64)");
  t->add_option("--head-from", tr.head_from, "Freeze this checkpoint's trunk and retrain only the main head");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest's test split");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")->required();
  e->add_option("--manifest", ev.manifest, "Evaluation manifest")->required();
  e->add_option("--out", ev.out, "Directory for report.json and metrics.csv")->required();

  std::string stats_manifest;
  auto* st = app.add_subcommand("stats", "Print class counts and pseudo-label balance of a manifest");
  st->add_option("--manifest", stats_manifest, "Manifest")->required();

  std::string run_config, run_out;
  bool run_quiet = false;
  auto* r = app.add_subcommand("run", "Run an experiment study from a spec file");
  r->add_option("--config", run_config, "Experiment spec (JSON)")->required();
  r->add_option("--out", run_out, "Output directory")->required();
  r->add_flag("--quiet", run_quiet, "Suppress per-run progress");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }
  tr.trunk_given = trunk->count() > 0;

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (b->parsed()) return cmd_build(build);
    if (p->parsed()) return cmd_pseudolabel(pseudo);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (st->parsed()) return cmd_stats(stats_manifest);
    if (r->parsed()) return cmd_run(run_config, run_out, run_quiet);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return 1;
  } catch (const bgsplit::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& err) {
    std::cerr << "error: io: malformed JSON: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
