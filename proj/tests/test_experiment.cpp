#include <filesystem>
#include <string>

#include "test_support.hpp"

namespace bgsplit {
namespace {

using testing::expect_error;

nlohmann::json tiny_spec(const std::string& study) {
  nlohmann::json train = {{"trunk_shape", {4}}, {"epochs", 2}, {"batch_size", 64}, {"learning_rate", 0.05}};
  nlohmann::json spec = {
      {"study", study},
      {"dataset", {{"synthetic", {{"categories", 8}, {"zipf_exponent", 1.0}, {"examples_total", 1200}, {"dim", 6}, {"center_distance", 8.0}}},
                   {"foreground", {{"rarest", 2}, {"skip", 0}}}}},
      {"pseudolabels", {{"kind", "cluster"}, {"K", 4}}},
      {"train", train},
      {"methods",
       {{{"name", "FT"}, {"use_thresholding", false}, {"use_aux", false}, {"lambda_g", 0.0}},
        {{"name", "+Aux"}, {"use_thresholding", false}, {"use_aux", true}},
        {{"name", "+Thresh"}, {"use_thresholding", true}, {"use_aux", false}, {"lambda_g", 0.0}},
        {{"name", "+Both"}, {"use_thresholding", true}, {"use_aux", true}}}},
      {"seeds", {1}}};
  return spec;
}

ExperimentSpec parse(const nlohmann::json& j) { return parse_experiment_spec(j.dump()); }

TEST(SpecHash, StableUnderKeyReorderingAndSensitiveToValues) {
  const std::string a = R"({"study":"factor_analysis","seeds":[1,2],"train":{"epochs":3,"b0":0.1}})";
  const std::string b = R"({"train":{"b0":0.1,"epochs":3},"seeds":[1,2],"study":"factor_analysis"})";
  const std::string c = R"({"train":{"b0":0.1,"epochs":4},"seeds":[1,2],"study":"factor_analysis"})";
  EXPECT_EQ(spec_hash(a), spec_hash(b));
  EXPECT_NE(spec_hash(a), spec_hash(c));
  EXPECT_EQ(parse(tiny_spec("factor_analysis")).spec_hash, spec_hash(tiny_spec("factor_analysis").dump(4)));
}

TEST(SpecParse, RejectsInvalidSpecs) {
  auto dup = tiny_spec("factor_analysis");
  dup["methods"][1]["name"] = "FT";
  expect_error([&] { parse(dup); }, ErrorKind::configuration, "'FT'");
  auto missing = tiny_spec("factor_analysis");
  missing["dataset"] = {{"manifest", "/nonexistent/source.jsonl"}, {"foreground", {"a"}}};
  expect_error([&] { parse(missing); }, ErrorKind::configuration, "does not exist");
  auto study = tiny_spec("table9");
  expect_error([&] { parse(study); }, ErrorKind::configuration, "table9");
  auto no_seeds = tiny_spec("factor_analysis");
  no_seeds["seeds"] = nlohmann::json::array();
  expect_error([&] { parse(no_seeds); }, ErrorKind::configuration);
  auto no_dataset = tiny_spec("factor_analysis");
  no_dataset.erase("dataset");
  expect_error([&] { parse(no_dataset); }, ErrorKind::configuration);
  auto axis = tiny_spec("sweep");
  axis["sweep"] = {{"axis", "momentum"}, {"values", {0.1}}};
  expect_error([&] { parse(axis); }, ErrorKind::configuration, "axis");
  expect_error([] { parse_experiment_spec("{oops"); }, ErrorKind::configuration);
  auto ext = tiny_spec("factor_analysis");
  ext["pseudolabels"] = {{"kind", "external"}, {"path", "/nonexistent/labels.tsv"}};
  expect_error([&] { parse(ext); }, ErrorKind::configuration, "does not exist");
}

TEST(FactorVariants, FlagWiring) {
  const auto v = factor_variants(TrainConfig{});
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v[0].name, "FT");
  EXPECT_FALSE(v[0].config.use_thresholding);
  EXPECT_FALSE(v[0].config.use_aux);
  EXPECT_EQ(v[0].config.lambda_g, 0.0);
  EXPECT_EQ(v[3].name, "+Both");
  EXPECT_TRUE(v[3].config.use_thresholding);
  EXPECT_TRUE(v[3].config.use_aux);
  EXPECT_EQ(v[3].config.lambda_g, 0.1);

  const ExperimentSpec spec = parse(tiny_spec("factor_analysis"));
  EXPECT_TRUE(spec.methods[3].config.use_thresholding && spec.methods[3].config.use_aux);
  EXPECT_FALSE(spec.methods[0].config.use_thresholding);
  EXPECT_EQ(spec.methods[0].config.lambda_g, 0.0);
}

TEST(ConfigHash, EquivalentRunsShareHashes) {
  const ExperimentSpec spec = parse(tiny_spec("factor_analysis"));
  Runner runner;
  const RunPlan thresh = base_plan(spec, runner, 1, spec.methods[2].config);
  RunPlan none = thresh;
  none.pseudolabels = PseudoLabelSource::none();
  EXPECT_EQ(thresh.hash(), none.hash());
  RunPlan random = thresh;
  random.pseudolabels = PseudoLabelSource::random(4, 0);
  EXPECT_EQ(thresh.hash(), random.hash());

  RunPlan full = thresh;
  full.bg_fraction = 1.0;
  EXPECT_EQ(thresh.hash(), full.hash());
  full.bg_fraction = 0.5;
  EXPECT_NE(thresh.hash(), full.hash());

  RunPlan both = base_plan(spec, runner, 1, spec.methods[3].config);
  RunPlan both_random = both;
  both_random.pseudolabels = PseudoLabelSource::random(4, 0);
  EXPECT_NE(both.hash(), both_random.hash());
  RunPlan other_seed = both;
  other_seed.seed = 2;
  EXPECT_NE(both.hash(), other_seed.hash());
  RunPlan lr = both;
  lr.config.learning_rate = 0.06;
  EXPECT_NE(both.hash(), lr.hash());
}

TEST(FactorAnalysis, WritesOneDirectoryPerRunAndIsReproducible) {
  testing::TempDir dir("factor");
  const ExperimentSpec spec = parse(tiny_spec("factor_analysis"));
  Runner first;
  const RunRecord a = run_factor_analysis(spec, first, dir.file("a"));
  ASSERT_EQ(a.runs.size(), 4u);
  ASSERT_EQ(a.summary.size(), 4u);
  for (const auto& r : a.runs) {
    for (const char* f : {"checkpoint.json", "report.json", "metrics.csv", "train_log.json"}) {
      EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(r.directory) / f)) << r.directory << "/" << f;
    }
    EXPECT_FALSE(std::filesystem::exists(r.directory + ".partial"));
  }
  for (const char* f : {"record.json", "summary.csv", "runs.csv"}) EXPECT_TRUE(std::filesystem::exists(dir.path() / "a" / "factor_analysis" / f));

  Runner second;
  const RunRecord b = run_factor_analysis(spec, second, dir.file("b"));
  EXPECT_EQ(summary_csv(a), summary_csv(b));
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    for (const char* f : {"checkpoint.json", "metrics.csv", "report.json"}) {
      EXPECT_EQ(detail::read_file(a.runs[i].directory + "/" + f), detail::read_file(b.runs[i].directory + "/" + f)) << f;
    }
  }
  const Checkpoint ck = read_checkpoint(a.runs[3].directory + "/checkpoint.json");
  EXPECT_TRUE(ck.config.use_thresholding && ck.config.use_aux);
  EXPECT_EQ(ck.config.seed, 1u);
}

TEST(PseudolabelStudy, NoneSourceEqualsThresholdingVariant) {
  auto j = tiny_spec("pseudolabel_study");
  j["methods"] = {{{"name", "BGSplit"}, {"use_thresholding", true}, {"use_aux", true}}};
  j["sources"] = {{{"name", "none"}, {"kind", "none"}}, {{"name", "random"}, {"kind", "random"}, {"K", 4}}, {{"name", "cluster"}, {"kind", "cluster"}, {"K", 4}}};
  const ExperimentSpec pl = parse(j);
  const ExperimentSpec fa = parse(tiny_spec("factor_analysis"));
  Runner runner;
  const RunRecord factor = run_factor_analysis(fa, runner);
  const RunRecord study = run_pseudolabel_study(pl, runner);
  ASSERT_EQ(study.runs.size(), 3u);
  EXPECT_EQ(study.runs[0].config_hash, factor.runs[2].config_hash);
  EXPECT_EQ(study.runs[0].report, factor.runs[2].report);
  EXPECT_EQ(study.runs[2].config_hash, factor.runs[3].config_hash);
  EXPECT_NE(study.runs[1].config_hash, study.runs[2].config_hash);
}

TEST(Sweep, BackgroundFractionOneMatchesUndownsampledRun) {
  auto j = tiny_spec("sweep");
  j["methods"] = {j["methods"][0]};
  j["sweep"] = {{"axis", "bg_fraction"}, {"values", {0.5, 1.0}}};
  Runner runner;
  const RunRecord sweep = run_sweep(parse(j), runner);
  const RunRecord factor = run_factor_analysis(parse(tiny_spec("factor_analysis")), runner);
  ASSERT_EQ(sweep.runs.size(), 2u);
  EXPECT_EQ(sweep.runs[1].axis_value, "1");
  EXPECT_EQ(sweep.runs[1].config_hash, factor.runs[0].config_hash);
  EXPECT_NE(sweep.runs[0].config_hash, factor.runs[0].config_hash);
  EXPECT_EQ(sweep.axis, "bg_fraction");
  EXPECT_NE(summary_csv(sweep).find("variant,bg_fraction,mAP"), std::string::npos);
}

TEST(Sweep, SingletonSubsetsAverageTheirReports) {
  auto j = tiny_spec("sweep");
  j["methods"] = {j["methods"][2]};
  j["sweep"] = {{"axis", "N"}, {"values", {1}}};
  const ExperimentSpec spec = parse(j);
  Runner runner;
  const RunRecord sweep = run_sweep(spec, runner);
  ASSERT_EQ(sweep.runs.size(), 1u);

  const DatasetManifest& src = runner.source(spec.dataset, 1);
  const std::vector<std::string> cover = spec.dataset.foreground.resolve(src);
  const SubsetFamily family = build_subset_family(src, cover, 1, 1);
  std::vector<EvalReport> singles;
  for (const auto& s : family.subsets) {
    RunPlan plan = base_plan(spec, runner, 1, spec.methods[0].config);
    plan.foreground = s.categories;
    singles.push_back(runner.run(plan).report);
  }
  EXPECT_EQ(sweep.runs[0].report, average_reports(singles));
  EXPECT_EQ(sweep.runs[0].report.classes.size(), 2u);
}

TEST(Sweep, BatchSizeAxisOverridesConfig) {
  auto j = tiny_spec("sweep");
  j["methods"] = {j["methods"][0]};
  j["sweep"] = {{"axis", "batch_size"}, {"values", {32, 128}}};
  testing::TempDir dir("batch");
  Runner runner;
  const RunRecord r = run_sweep(parse(j), runner, dir.file("out"));
  ASSERT_EQ(r.runs.size(), 2u);
  EXPECT_EQ(read_checkpoint(r.runs[0].directory + "/checkpoint.json").config.batch_size, 32u);
  EXPECT_EQ(read_checkpoint(r.runs[1].directory + "/checkpoint.json").config.batch_size, 128u);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "out" / "sweep_batch_size" / "summary.csv"));
}

TEST(Transfer, ThreeRowsAndFrozenTrunk) {
  auto j = tiny_spec("transfer");
  j["methods"] = {j["methods"][0], {{"name", "BGSplit"}, {"use_thresholding", true}, {"use_aux", true}}};
  j["dataset"]["foreground"] = {{"rarest", 2}, {"skip", 2}};
  j["transfer"] = {{"target", {{"rarest", 2}, {"skip", 0}}}, {"head", {{"use_thresholding", true}, {"use_aux", false}}}};
  testing::TempDir dir("transfer");
  Runner runner;
  const RunRecord r = run_transfer_study(parse(j), runner, dir.file("out"));
  ASSERT_EQ(r.summary.size(), 3u);
  EXPECT_EQ(r.summary[0].variant, "head-on-FT");
  EXPECT_EQ(r.summary[1].variant, "head-on-BGSplit");
  EXPECT_EQ(r.summary[2].variant, "full-BGSplit");
  const Checkpoint head = read_checkpoint(r.runs[1].directory + "/checkpoint.json");
  const ExperimentSpec spec = parse(j);
  const RunOutcome& pre = runner.run(base_plan(spec, runner, 1, spec.methods[1].config));
  EXPECT_EQ(head.params.trunk, pre.checkpoint.params.trunk);
}

TEST(Transfer, OverlappingSetsRejected) {
  auto j = tiny_spec("transfer");
  j["methods"] = {j["methods"][0], j["methods"][3]};
  j["transfer"] = {{"target", {{"rarest", 1}, {"skip", 0}}}};
  Runner runner;
  expect_error([&] { run_transfer_study(parse(j), runner); }, ErrorKind::configuration, "overlap");
}

TEST(PartialFailure, EarlierRunsKeptAndErrorRecorded) {
  auto j = tiny_spec("factor_analysis");
  j["pseudolabels"] = {{"kind", "none"}};
  j["methods"] = {j["methods"][0], j["methods"][3]};
  testing::TempDir dir("partial");
  Runner runner;
  expect_error([&] { run_factor_analysis(parse(j), runner, dir.file("out")); }, ErrorKind::configuration);
  const auto root = dir.path() / "out" / "factor_analysis";
  EXPECT_TRUE(std::filesystem::exists(root / "FT" / "seed_1" / "metrics.csv"));
  EXPECT_FALSE(std::filesystem::exists(root / "_Both"));
  const Json record = Json::parse(detail::read_file((root / "record.json").string()));
  EXPECT_TRUE(record.contains("error"));
  EXPECT_EQ(record.at("runs").size(), 1u);
}

TEST(BundledSpecs, AllParse) {
  for (const char* name : {"factor_analysis", "pseudolabel_study", "transfer", "sweep_batch_size", "sweep_bg_fraction", "sweep_n"}) {
    EXPECT_NO_THROW(load_experiment_spec(std::string(BGSPLIT_CONFIG_DIR) + "/" + name + ".json")) << name;
  }
}

}  // namespace
}  // namespace bgsplit
