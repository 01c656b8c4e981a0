// Command-line front end: synth, train, eval, experiment, gradcheck.
//
// Exit codes: 0 success, 1 invalid input (flags, config, data), 2 runtime failure.

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "lplp/lplp.hpp"

namespace {

using namespace lplp;

constexpr int kInvalidInput = 1;
constexpr int kRuntimeFailure = 2;

struct SynthArgs {
  SynthConfig cfg;
  std::string out;
};

struct TrainArgs {
  std::string data;
  std::string method;
  std::uint64_t seed = 0;
  std::string out;
  std::string metrics;
  std::string aggregation = "select_on_validation";
  TrainConfig cfg;
  std::string ppl_mode = "renormalize";
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::optional<double> threshold;
};

struct ExperimentArgs {
  std::string config;
  std::optional<std::size_t> jobs;
  std::optional<std::string> output_dir;
};

struct GradcheckArgs {
  GradCheckSuiteConfig cfg;
};

void print_report(const EvalReport& r) {
  std::cout << std::fixed << std::setprecision(4);
  std::cout << "accuracy " << r.accuracy << "\nbinary_accuracy " << r.binary_accuracy << "\nmiou " << r.miou
            << "\nper_class_iou";
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    if (r.iou_included[c]) std::cout << ' ' << r.per_class_iou[c];
    else std::cout << " excluded";
  }
  std::cout << "\nconfusion (rows true, columns predicted)\n";
  for (std::size_t t = 0; t < r.confusion.num_labels(); ++t) {
    for (std::size_t p = 0; p < r.confusion.num_labels(); ++p) std::cout << std::setw(8) << r.confusion.at(t, p);
    std::cout << '\n';
  }
  std::cout << std::defaultfloat;
}

int run_synth(const SynthArgs& a) {
  const DatasetSplit data = synth_gaussian_dataset(a.cfg);
  save_dataset(data, a.out);
  std::cout << "wrote " << a.out << ": " << data.train.size() << " train, " << data.validation.size()
            << " validation, " << data.test.size() << " test bags\n";
  return 0;
}

int run_train(TrainArgs a) {
  const DatasetSplit data = load_dataset(a.data);
  TrainConfig cfg = a.cfg;
  cfg.method = parse_method(a.method);
  cfg.seed = a.seed;
  if (a.aggregation == "select_on_validation") cfg.aggregation.reset();
  else cfg.aggregation = Aggregation::parse(a.aggregation, cfg.lse_sharpness);
  if (a.ppl_mode == "renormalize") cfg.ppl_mode = PplMode::renormalize;
  else if (a.ppl_mode == "ignore") cfg.ppl_mode = PplMode::ignore;
  else throw ConfigError("--ppl-mode must be renormalize or ignore");
  cfg.validate();

  const std::string stem = a.method + "-seed" + std::to_string(a.seed);
  const std::filesystem::path out = a.out.empty() ? stem + ".ckpt" : a.out;
  const std::filesystem::path metrics = a.metrics.empty() ? stem + ".metrics" : a.metrics;

  std::ofstream log(metrics);
  if (!log) throw Error("cannot open " + metrics.string());
  TrainHooks hooks;
  hooks.on_epoch = [&log](const EpochRecord& r) { log << format_epoch_record(r) << std::endl; };
  const TrainState state = train(cfg, data, hooks);
  save_checkpoint(Checkpoint::from_state(state, cfg.inference_threshold), out);

  std::cout << "method " << a.method << " seed " << a.seed << ": " << state.epoch << " epochs, best epoch "
            << state.best_epoch << ", best validation loss " << state.best_val_loss;
  if (state.aggregation) std::cout << ", aggregation " << state.aggregation->name();
  if (state.skipped_bags) std::cout << ", " << state.skipped_bags << " bags skipped";
  std::cout << "\ncheckpoint " << out.string() << "\nmetrics " << metrics.string() << '\n';
  if (!data.test.empty()) {
    const EvalReport r = evaluate(state.model, data.test, cfg.inference_threshold);
    std::cout << "test accuracy " << std::fixed << std::setprecision(4) << r.accuracy << '\n';
  }
  return 0;
}

int run_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const DatasetSplit data = load_dataset(a.data);
  SplitTag tag;
  if (a.split == "train") tag = SplitTag::train;
  else if (a.split == "validation") tag = SplitTag::validation;
  else if (a.split == "test") tag = SplitTag::test;
  else throw UsageError("--split must be train, validation or test");
  if (data.feature_dim != ck.model.feature_dim || data.num_positive_classes != ck.model.num_classes)
    throw ValidationError("checkpoint expects C=" + std::to_string(ck.model.num_classes) + ", d=" +
                          std::to_string(ck.model.feature_dim) + " but the dataset has C=" +
                          std::to_string(data.num_positive_classes) + ", d=" + std::to_string(data.feature_dim));
  const double threshold = a.threshold.value_or(ck.threshold);
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("--threshold must lie in (0, 1)");
  EvalReport r = evaluate(ck.model, data.bags(tag), threshold);
  std::cout << "method " << method_name(ck.method) << " split " << a.split << " threshold " << threshold << '\n';
  print_report(r);
  return 0;
}

int run_experiment_cmd(const ExperimentArgs& a) {
  ExperimentConfig cfg = load_experiment_config(a.config);
  if (a.jobs) cfg.jobs = *a.jobs;
  if (a.output_dir) cfg.output_dir = *a.output_dir;
  const ExperimentSummary s = run_experiment(cfg, &std::cout);
  std::cout << '\n' << format_table(s) << "run directory " << s.run_dir.string() << "\nelapsed " << std::fixed
            << std::setprecision(1) << s.seconds << " s\n";
  if (s.failures()) {
    std::cout << s.failures() << " cell(s) failed, see summary.txt\n";
    return kRuntimeFailure;
  }
  return 0;
}

int run_gradcheck(const GradcheckArgs& a) {
  const GradCheckSuiteResult r = run_gradcheck_suite(a.cfg);
  for (std::size_t t = 0; t < r.trials.size(); ++t)
    std::cout << "trial " << t << " (" << r.trials[t].aggregation << "): " << r.trials[t].report.summary() << '\n';
  std::cout << "worst relative error " << r.worst_relative_error << '\n' << (r.passed ? "PASS" : "FAIL") << '\n';
  return r.passed ? 0 : kRuntimeFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learning from partial label proportions: data generation, training and evaluation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic bag dataset");
  synth_cmd->add_option("--out", synth.out, "Output dataset file")->required();
  synth_cmd->add_option("--c", synth.cfg.num_positive_classes, "Number of positive classes C")->capture_default_str();
  synth_cmd->add_option("--dim", synth.cfg.feature_dim, "Feature dimension d")->capture_default_str();
  synth_cmd->add_option("--separation", synth.cfg.class_separation, "Distance between class means")->capture_default_str();
  synth_cmd->add_option("--train-pos", synth.cfg.n_train_pos)->capture_default_str();
  synth_cmd->add_option("--train-neg", synth.cfg.n_train_neg)->capture_default_str();
  synth_cmd->add_option("--val-pos", synth.cfg.n_val_pos)->capture_default_str();
  synth_cmd->add_option("--val-neg", synth.cfg.n_val_neg)->capture_default_str();
  synth_cmd->add_option("--test-pos", synth.cfg.n_test_pos)->capture_default_str();
  synth_cmd->add_option("--test-neg", synth.cfg.n_test_neg)->capture_default_str();
  synth_cmd->add_option("--bag-size", synth.cfg.bag_size)->capture_default_str();
  synth_cmd->add_option("--min-neg-frac", synth.cfg.min_negative_fraction)->capture_default_str();
  synth_cmd->add_option("--max-neg-frac", synth.cfg.max_negative_fraction)->capture_default_str();
  synth_cmd->add_option("--seed", synth.cfg.seed)->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one method with one seed");
  train_cmd->add_option("--data", tr.data, "Dataset file")->required();
  train_cmd->add_option("--method", tr.method, "ce, pl, ppl, two_stage or ours")->required();
  train_cmd->add_option("--seed", tr.seed)->capture_default_str();
  train_cmd->add_option("--out", tr.out, "Checkpoint file (default <method>-seed<seed>.ckpt)");
  train_cmd->add_option("--metrics", tr.metrics, "Per-epoch log (default <method>-seed<seed>.metrics)");
  train_cmd->add_option("--lr", tr.cfg.learning_rate)->capture_default_str();
  train_cmd->add_option("--batch-bags", tr.cfg.batch_bags)->capture_default_str();
  train_cmd->add_option("--w-mil", tr.cfg.w_mil)->capture_default_str();
  train_cmd->add_option("--patience", tr.cfg.patience)->capture_default_str();
  train_cmd->add_option("--max-epochs", tr.cfg.max_epochs)->capture_default_str();
  train_cmd->add_option("--aggregation", tr.aggregation, "mean, max, lse or select_on_validation")->capture_default_str();
  train_cmd->add_option("--lse-r", tr.cfg.lse_sharpness)->capture_default_str();
  train_cmd->add_option("--threshold", tr.cfg.inference_threshold)->capture_default_str();
  train_cmd->add_option("--ppl-mode", tr.ppl_mode, "renormalize or ignore")->capture_default_str();
  train_cmd->add_flag("--reuse-stage1-extractor", tr.cfg.reuse_stage1_extractor);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--data", ev.data)->required();
  eval_cmd->add_option("--split", ev.split, "train, validation or test")->capture_default_str();
  eval_cmd->add_option("--threshold", ev.threshold, "Defaults to the checkpoint's threshold");

  ExperimentArgs ex;
  auto* exp_cmd = app.add_subcommand("experiment", "Run a methods x seeds grid from a config file");
  exp_cmd->add_option("--config", ex.config)->required();
  exp_cmd->add_option("--jobs", ex.jobs, "Parallel cells (0: one per hardware thread)");
  exp_cmd->add_option("--output-dir", ex.output_dir, "Overrides output_dir from the config");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the joint loss");
  gc_cmd->add_option("--trials", gc.cfg.trials)->capture_default_str();
  gc_cmd->add_option("--seed", gc.cfg.seed)->capture_default_str();
  gc_cmd->add_option("--tol", gc.cfg.tolerance)->capture_default_str();
  gc_cmd->add_option("--step", gc.cfg.step)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalidInput;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*exp_cmd) return run_experiment_cmd(ex);
    if (*gc_cmd) return run_gradcheck(gc);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kInvalidInput;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kInvalidInput;
  } catch (const ValidationError& e) {
    std::cerr << "invalid data: " << e.what() << '\n';
    return kInvalidInput;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kInvalidInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kInvalidInput;
}
