// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//
//   acceptance [--config <experiment.ini>] [--cli <path to lplp>] [--work <dir>]

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lplp/lplp.hpp"

namespace fs = std::filesystem;
using namespace lplp;

namespace {

struct Outcome {
  bool passed;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

std::vector<double> simplex(std::mt19937_64& g, std::size_t n) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(n);
  double s = 0.0;
  for (double& x : v) s += (x = e(g) + 1e-12);
  for (double& x : v) x /= s;
  return v;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const GradCheckSuiteResult r = run_gradcheck_suite();
  const double secs = seconds_since(t0);
  std::size_t checked = 0;
  for (const auto& t : r.trials) checked += t.report.checked;
  const bool ok = r.passed && r.trials.size() == 10 && secs < 30.0;
  return {ok, std::to_string(r.trials.size()) + " triples, " + std::to_string(checked) +
                  " coordinates, worst relative error " + fmt(r.worst_relative_error) + ", " + fmt(secs, 3) + " s"};
}

Outcome gibbs_inequality() {
  std::mt19937_64 g(1);
  double worst_gap = 0.0, worst_equality = 0.0;
  bool ok = true;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t c = 2 + g() % 5;
    const auto p = simplex(g, c), q = simplex(g, c);
    double h = 0.0;
    for (double v : p) h -= v * std::log(v);
    ad::Tape t;
    const double loss = proportion_loss(p, t.variables(q)).value();
    const double self = proportion_loss(p, t.variables(p)).value();
    ok = ok && loss >= h - 1e-9 && std::abs(self - h) <= 1e-9;
    worst_gap = std::min(worst_gap, loss - h);
    worst_equality = std::max(worst_equality, std::abs(self - h));
  }
  return {ok, "1000 pairs, min(loss - H) = " + fmt(worst_gap) + ", max |loss(p,p) - H| = " + fmt(worst_equality)};
}

std::vector<double> masked(const std::vector<double>& s, const std::vector<std::vector<double>>& z) {
  ad::Tape t;
  const auto scores = t.variables(s);
  std::vector<std::vector<ad::Var>> probs;
  for (const auto& row : z) probs.push_back(t.variables(row));
  return ad::values(masked_proportion(scores, probs).p_hat);
}

Outcome masked_proportion_algebra() {
  const std::vector<std::vector<double>> z = {{0.6, 0.4}, {0.2, 0.8}};
  struct Example {
    std::vector<double> s, expected;
  };
  const Example examples[] = {{{1, 1}, {0.4, 0.6}}, {{1, 0}, {0.6, 0.4}}, {{0.75, 0.25}, {0.5, 0.5}}};
  double worst_example = 0.0;
  for (const auto& ex : examples) {
    const auto p = masked(ex.s, z);
    for (std::size_t c = 0; c < 2; ++c) worst_example = std::max(worst_example, std::abs(p[c] - ex.expected[c]));
  }
  std::mt19937_64 g(2);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  double worst_scale = 0.0;
  for (int b = 0; b < 100; ++b) {
    const std::size_t n = 1 + g() % 32, c = 2 + g() % 3;
    std::vector<double> s(n);
    std::vector<std::vector<double>> zz;
    for (double& v : s) v = u(g);
    for (std::size_t j = 0; j < n; ++j) zz.push_back(simplex(g, c));
    const auto base = masked(s, zz);
    for (double lambda : {1.0, 0.5, 0.01}) {
      auto scaled = s;
      for (double& v : scaled) v *= lambda;
      const auto p = masked(scaled, zz);
      for (std::size_t k = 0; k < c; ++k) worst_scale = std::max(worst_scale, std::abs(p[k] - base[k]));
    }
  }
  const bool ok = worst_example <= 1e-12 && worst_scale <= 1e-9;
  return {ok, "worked examples max error " + fmt(worst_example) + ", scale invariance max deviation " + fmt(worst_scale)};
}

Outcome pooling_limits() {
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_mean = 0.0, worst_max = 0.0;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> s(32);
    for (double& v : s) v = u(g);
    ad::Tape t;
    const auto vars = t.variables(s);
    double mean = 0.0;
    for (double v : s) mean += v / 32.0;
    const double top = *std::max_element(s.begin(), s.end());
    worst_mean = std::max(worst_mean, std::abs(aggregate(vars, Aggregation::lse(0.01)).value() - mean));
    worst_max = std::max(worst_max, std::abs(aggregate(vars, Aggregation::lse(100)).value() - top));
  }
  return {worst_mean < 1e-3 && worst_max < 0.05,
          "max |LSE(0.01) - mean| = " + fmt(worst_mean) + ", max |LSE(100) - max| = " + fmt(worst_max)};
}

Outcome miou_example() {
  // One positive class; x_0 > 0 means the score head fires and the single class head answers class 1.
  ModelTriple m;
  m.num_classes = 1;
  m.feature_dim = 1;
  m.extractor = Mlp{MlpSpec{{1, 1}}, {1, 0}};
  m.score_head = Mlp{MlpSpec{{1, 1}}, {20, 0}};
  m.class_head = Mlp{MlpSpec{{1, 1}}, {0, 0}};
  m.validate();
  Bag bag;
  bag.instances = {{{-1.0}, 0, 0}, {{1.0}, 0, 1}, {{1.0}, 1, 2}, {{1.0}, 1, 3}};
  const EvalReport r = evaluate(m, std::vector<Bag>{bag}, 0.5);
  const bool ok = r.per_class_iou.size() == 2 && r.per_class_iou[0] == 1.0 / 2.0 && r.per_class_iou[1] == 2.0 / 3.0 &&
                  std::abs(r.miou - 7.0 / 12.0) <= 1e-15;
  return {ok, "IoU = (" + fmt(r.per_class_iou.at(0), 17) + ", " + fmt(r.per_class_iou.at(1), 17) + "), mIoU = " +
                  fmt(r.miou, 17)};
}

Outcome early_stopping() {
  SynthConfig sc;
  sc.n_train_pos = 8;
  sc.n_train_neg = 8;
  sc.n_val_pos = 4;
  sc.n_val_neg = 4;
  sc.n_test_pos = 2;
  sc.n_test_neg = 1;
  sc.bag_size = 8;
  const DatasetSplit data = synth_gaussian_dataset(sc);
  TrainConfig cfg;
  cfg.aggregation = Aggregation::mean();
  TrainHooks hooks;
  std::size_t evaluated = 0;
  hooks.validation_override = [&](std::size_t, double) {
    ++evaluated;
    return 0.75;
  };
  const TrainState s = train(cfg, data, hooks);
  const bool ok = cfg.patience == 30 && s.best_epoch == 1 && s.epoch == s.best_epoch + cfg.patience && evaluated == s.epoch;
  return {ok, "best epoch " + std::to_string(s.best_epoch) + ", stopped after epoch " + std::to_string(s.epoch) +
                  " (patience " + std::to_string(cfg.patience) + ")"};
}

int run_command(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism(const fs::path& cli, const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path config = dir / "grid.ini";
  std::ofstream(config) << "[experiment]\nmethods = ours, two_stage, ppl, ce, pl\nseeds = 0, 1\noutput_dir = "
                        << (dir / "runs").string()
                        << "\n[dataset]\nn_train_pos = 12\nn_train_neg = 12\nn_val_pos = 4\nn_val_neg = 4\n"
                           "n_test_pos = 4\nn_test_neg = 2\nbag_size = 16\n"
                           "[train]\nmax_epochs = 40\naggregation = select_on_validation\n";
  for (int k = 0; k < 2; ++k) {
    const std::string cmd = "'" + cli.string() + "' experiment --config '" + config.string() + "' > '" +
                            (dir / ("run" + std::to_string(k) + ".log")).string() + "' 2>&1";
    if (run_command(cmd) != 0) return {false, "experiment run " + std::to_string(k) + " failed, see " + dir.string()};
  }
  std::vector<std::string> summaries;
  for (const auto& entry : fs::directory_iterator(dir / "runs")) summaries.push_back(io::read_file(entry.path() / "summary.txt"));
  if (summaries.size() != 2) return {false, "expected two run directories, found " + std::to_string(summaries.size())};
  const bool same = summaries[0] == summaries[1];
  return {same, same ? "two runs, identical " + std::to_string(summaries[0].size()) + "-byte summaries"
                     : "summaries differ"};
}

struct GridOutcomes {
  Outcome ordering, mask_quality, ceiling;
};

GridOutcomes comparative_grid(const fs::path& config_path, const fs::path& work) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  cfg.output_dir = work / "grid";
  const auto t0 = Clock::now();
  const ExperimentSummary s = run_experiment(cfg, &std::cout);
  const double minutes = seconds_since(t0) / 60.0;
  std::cout << '\n' << format_table(s) << "run directory " << s.run_dir.string() << "\n\n";

  auto mean = [&](Method m, const char* metric) {
    const MetricSummary ms = s.metric(m, metric);
    return ms.values.size() == cfg.seeds.size() ? ms.mean : std::nan("");
  };
  auto has = [&](Method m) { return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end(); };
  const std::size_t seeds = cfg.seeds.size();
  const bool complete = s.failures() == 0 && seeds == 5;

  const double ours = mean(Method::ours, "accuracy"), two = mean(Method::two_stage, "accuracy"),
               ppl = mean(Method::ppl, "accuracy"), ce = mean(Method::ce, "accuracy");
  GridOutcomes out;
  out.ordering = {complete && ours > two && ours > ppl && ours >= 0.90 && minutes < 30.0,
                  std::to_string(seeds) + "-seed mean accuracy: ours " + fmt(ours) + ", two_stage " + fmt(two) +
                      ", ppl " + fmt(ppl) + "; grid runtime " + fmt(minutes, 3) + " min"};

  const double ours_bin = mean(Method::ours, "binary_accuracy"), mil_bin = mean(Method::two_stage, "binary_accuracy");
  out.mask_quality = {complete && ours_bin >= mil_bin,
                "pos/neg accuracy: ours " + fmt(ours_bin, 6) + ", stand-alone MIL (two_stage stage 1) " + fmt(mil_bin, 6)};

  bool ceiling = complete && has(Method::ce);
  std::string detail = "ce " + fmt(ce, 6);
  for (Method m : {Method::ours, Method::two_stage, Method::ppl}) {
    const double v = mean(m, "accuracy");
    ceiling = ceiling && ce >= v;
    detail += ", " + method_name(m) + " " + fmt(v, 6);
  }
  out.ceiling = {ceiling, detail};
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path config = LPLP_DEFAULT_CONFIG, cli = LPLP_CLI, work = fs::current_path() / "acceptance_work";
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--config") config = argv[i + 1];
    else if (flag == "--cli") cli = argv[i + 1];
    else if (flag == "--work") work = argv[i + 1];
    else {
      std::cerr << "unknown flag " << flag << '\n';
      return 2;
    }
  }
  fs::create_directories(work);

  std::vector<std::pair<int, Outcome>> results;
  auto record = [&](int id, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    results.emplace_back(id, o);
    std::cout << "criterion " << id << ": " << (o.passed ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  };

  record(1, gradient_correctness);
  record(2, gibbs_inequality);
  record(3, masked_proportion_algebra);
  record(4, pooling_limits);
  GridOutcomes grid{{false, "not run"}, {false, "not run"}, {false, "not run"}};
  try {
    grid = comparative_grid(config, work);
  } catch (const std::exception& e) {
    grid.ordering = grid.mask_quality = grid.ceiling = {false, std::string("exception: ") + e.what()};
  }
  record(5, [&] { return grid.ordering; });
  record(6, [&] { return grid.mask_quality; });
  record(7, [&] { return grid.ceiling; });
  record(8, miou_example);
  record(9, [&] { return determinism(cli, work); });
  record(10, early_stopping);

  std::cout << "\nsummary\n";
  bool all = true;
  for (const auto& [id, o] : results) {
    std::cout << "criterion " << id << ": " << (o.passed ? "PASS" : "FAIL") << "  " << o.detail << '\n';
    all = all && o.passed;
  }
  return all ? 0 : 1;
}
