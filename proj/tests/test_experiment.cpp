#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "lplp/experiment.hpp"

using namespace lplp;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lplp_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_experiment_config(in);
}

std::string tiny_config(const fs::path& out, const std::string& methods, const std::string& seeds) {
  return "[experiment]\nmethods = " + methods + "\nseeds = " + seeds + "\noutput_dir = " + out.string() +
         "\njobs = 2\n"
         "[dataset]\nn_train_pos = 6\nn_train_neg = 6\nn_val_pos = 3\nn_val_neg = 3\nn_test_pos = 3\n"
         "n_test_neg = 1\nbag_size = 8\n"
         "[train]\nmax_epochs = 2\nbatch_bags = 4\naggregation = mean\n";
}

}  // namespace

TEST(ExperimentConfig, ParsesSectionsAndOverrides) {
  const ExperimentConfig cfg = parse(
      "# comment\n"
      "[experiment]\nmethods = ours, ppl\nseeds = 3, 5\n"
      "[dataset]\nc = 3\ndim = 6  # trailing comment\n"
      "[train]\nw_mil = 0.1\naggregation = lse\nlse_r = 2\nextractor_hidden = 8, 4\n"
      "[method.ppl]\nppl_mode = ignore\nlearning_rate = 0.01\n");
  EXPECT_EQ(cfg.methods, (std::vector<Method>{Method::ours, Method::ppl}));
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{3, 5}));
  EXPECT_EQ(cfg.dataset.num_positive_classes, 3);
  EXPECT_EQ(cfg.dataset.feature_dim, 6u);
  const TrainConfig ours = cfg.train_config(Method::ours, 3);
  EXPECT_EQ(ours.w_mil, 0.1);
  EXPECT_EQ(ours.aggregation, Aggregation::lse(2.0));
  EXPECT_EQ(ours.architecture.extractor_hidden, (std::vector<std::size_t>{8, 4}));
  EXPECT_EQ(ours.seed, 3u);
  const TrainConfig ppl = cfg.train_config(Method::ppl, 5);
  EXPECT_EQ(ppl.ppl_mode, PplMode::ignore);
  EXPECT_EQ(ppl.learning_rate, 0.01);
  EXPECT_EQ(ppl.w_mil, 0.1);
  EXPECT_EQ(ppl.method, Method::ppl);
}

TEST(ExperimentConfig, Errors) {
  EXPECT_THROW(parse("[train]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse("[experiment]\nmethods = ours, magic\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nlearning_rate = -1\n"), ConfigError);
  EXPECT_THROW(parse("[elsewhere]\nx = 1\n"), ConfigError);
  try {
    parse("[train]\npatience = 3\npatience = 4\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  try {
    parse("[train]\n\nw_mil = lots\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse("w_mil = 1\n"), ParseError);
}

TEST(ExperimentConfig, HashIgnoresLayoutButNotValues) {
  const auto a = describe_experiment(parse("[train]\nw_mil = 0.5\n"));
  const auto b = describe_experiment(parse("# x\n[train]\n  w_mil=0.5   \n[experiment]\noutput_dir = elsewhere\n"));
  const auto c = describe_experiment(parse("[train]\nw_mil = 0.25\n"));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Summary, MeanAndSampleStd) {
  const MetricSummary one = summarize({0.9});
  EXPECT_EQ(one.mean, 0.9);
  EXPECT_FALSE(one.std.has_value());
  const MetricSummary five = summarize({0.1, 0.2, 0.3, 0.4, 0.5});
  EXPECT_NEAR(five.mean, 0.3, 1e-15);
  ASSERT_TRUE(five.std.has_value());
  EXPECT_NEAR(*five.std, std::sqrt(0.1 / 4.0), 1e-15);
  EXPECT_EQ(five.values.size(), 5u);
}

TEST(RunExperiment, SingleRunOmitsStd) {
  const fs::path out = scratch_dir("single");
  const ExperimentSummary s = run_experiment(parse(tiny_config(out, "ours", "0")));
  ASSERT_EQ(s.cells.size(), 1u);
  ASSERT_TRUE(s.cells[0].report.has_value()) << s.cells[0].error;
  const std::string text = io::read_file(s.run_dir / "summary.txt");
  EXPECT_NE(text.find("record ours accuracy n 1 mean "), std::string::npos) << text;
  EXPECT_EQ(text.find(" std "), std::string::npos) << text;
  for (const char* f : {"seed-0/dataset.lplp", "seed-0/ours/checkpoint.lplp", "seed-0/ours/metrics.log",
                        "seed-0/ours/eval.txt", "table.txt", "config.txt"})
    EXPECT_TRUE(fs::exists(s.run_dir / f)) << f;
  fs::remove_all(out);
}

TEST(RunExperiment, SummariesAreByteIdenticalAcrossRuns) {
  const fs::path out = scratch_dir("determinism");
  const ExperimentConfig cfg = parse(tiny_config(out, "ours, two_stage, ppl", "0, 1"));
  const ExperimentSummary a = run_experiment(cfg);
  const ExperimentSummary b = run_experiment(cfg);
  EXPECT_NE(a.run_dir, b.run_dir);
  EXPECT_EQ(io::read_file(a.run_dir / "summary.txt"), io::read_file(b.run_dir / "summary.txt"));
  const MetricSummary acc = a.metric(Method::ours, "accuracy");
  EXPECT_EQ(acc.values.size(), 2u);
  EXPECT_TRUE(acc.std.has_value());
  fs::remove_all(out);
}

TEST(RunExperiment, FailedCellsAreRecordedAndOthersStillReported) {
  const fs::path out = scratch_dir("failure");
  SynthConfig sc;
  sc.n_train_pos = 6;
  sc.n_train_neg = 1;
  sc.n_val_pos = 2;
  sc.n_val_neg = 1;
  sc.n_test_pos = 2;
  sc.n_test_neg = 1;
  sc.bag_size = 8;
  DatasetSplit data = synth_gaussian_dataset(sc);
  std::erase_if(data.train, [](const Bag& b) { return !b.positive(); });
  save_dataset(data, out / "positives_only.lplp");

  const ExperimentConfig cfg = parse("[experiment]\nmethods = ours, ppl\nseeds = 0\noutput_dir = " + out.string() +
                                     "\n[dataset]\npath = " + (out / "positives_only.lplp").string() +
                                     "\n[train]\nmax_epochs = 1\naggregation = mean\n");
  const ExperimentSummary s = run_experiment(cfg);
  EXPECT_EQ(s.failures(), 1u);
  EXPECT_FALSE(s.cells[0].report.has_value());
  EXPECT_TRUE(s.cells[1].report.has_value());
  const std::string text = io::read_file(s.run_dir / "summary.txt");
  EXPECT_NE(text.find("failure ours 0 "), std::string::npos) << text;
  EXPECT_NE(text.find("record ppl accuracy n 1"), std::string::npos) << text;
  EXPECT_NE(text.find("record ours accuracy n 0 values\n"), std::string::npos) << text;
  fs::remove_all(out);
}

TEST(FormatTable, TwoDecimalPercentages) {
  ExperimentSummary s;
  s.methods = {Method::ours};
  s.seeds = {0, 1};
  for (std::uint64_t seed : {0u, 1u}) {
    CellResult c;
    c.method = Method::ours;
    c.seed = seed;
    EvalReport r;
    r.accuracy = seed ? 0.98 : 0.99;
    r.miou = 0.5;
    r.binary_accuracy = 1.0;
    c.report = r;
    s.cells.push_back(c);
  }
  const std::string t = format_table(s);
  EXPECT_NE(t.find("98.50 +- 0.71"), std::string::npos) << t;
  EXPECT_NE(t.find("50.00 +- 0.00"), std::string::npos) << t;
  EXPECT_NE(t.find("2/2"), std::string::npos) << t;
}
