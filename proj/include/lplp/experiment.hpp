#pragma once

// Methods x seeds experiment grid.
//
// Config file: `key = value` lines grouped in sections, `#` starts a comment.
//
//   [experiment]   methods, seeds, output_dir, jobs
//   [dataset]      c, dim, class_separation, n_train_pos, n_train_neg, n_val_pos,
//                  n_val_neg, n_test_pos, n_test_neg, bag_size,
//                  min_negative_fraction, max_negative_fraction, path
//   [train]        learning_rate, batch_bags, w_mil, patience, max_epochs,
//                  aggregation, lse_r, inference_threshold, ppl_mode,
//                  reuse_stage1_extractor, extractor_hidden
//   [method.<m>]   any [train] key, applied to method m only
//
// Each seed s generates the synthetic dataset with seed s (unless `path` names
// a dataset file) and trains every method with seed s. Results land in
// <output_dir>/<config hash>-<UTC timestamp>/.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lplp/checkpoint.hpp"
#include "lplp/dataset_io.hpp"
#include "lplp/metrics.hpp"
#include "lplp/trainer.hpp"

namespace lplp {

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string dataset_fingerprint(const DatasetSplit& data) { return hex64(fnv1a(dataset_to_string(data))); }

// ---------------------------------------------------------------------------
// Config file

struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
};

/// Sections of `key = value` entries. Keys before the first section header are rejected.
using ConfigSections = std::map<std::string, std::map<std::string, ConfigEntry>>;

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

inline ConfigSections parse_config_sections(std::istream& in) {
  ConfigSections sections;
  std::string line, current;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string text = trim(std::string_view(line).substr(0, line.find('#')));
    if (text.empty()) continue;
    if (text.front() == '[') {
      if (text.back() != ']') throw ParseError("unterminated section header", n);
      current = trim(std::string_view(text).substr(1, text.size() - 2));
      if (current.empty()) throw ParseError("empty section name", n);
      if (sections.count(current)) throw ParseError("duplicate section [" + current + "]", n);
      sections[current];
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", n);
    if (current.empty()) throw ParseError("entry outside of any section", n);
    const std::string key = trim(std::string_view(text).substr(0, eq));
    if (key.empty()) throw ParseError("missing key", n);
    auto& section = sections[current];
    if (section.count(key)) throw ParseError("duplicate key '" + key + "'", n);
    section[key] = {trim(std::string_view(text).substr(eq + 1)), n};
  }
  return sections;
}

namespace config_value {

inline std::vector<std::string> list(const ConfigEntry& e) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(e.value);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ParseError("empty list item", e.line);
    out.push_back(item);
  }
  if (out.empty()) throw ParseError("empty list", e.line);
  return out;
}

template <class T>
T number(const std::string& text, std::size_t line) {
  T out{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    throw ParseError("expected a number, got '" + text + "'", line);
  return out;
}

template <class T>
T number(const ConfigEntry& e) {
  return number<T>(e.value, e.line);
}

inline bool boolean(const ConfigEntry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  throw ParseError("expected true or false, got '" + e.value + "'", e.line);
}

}  // namespace config_value

/// Applies one training key. Returns false if the key is not a training key.
inline bool apply_train_key(TrainConfig& cfg, const std::string& key, const ConfigEntry& e) {
  using namespace config_value;
  if (key == "learning_rate") cfg.learning_rate = number<double>(e);
  else if (key == "batch_bags") cfg.batch_bags = number<std::size_t>(e);
  else if (key == "w_mil") cfg.w_mil = number<double>(e);
  else if (key == "patience") cfg.patience = number<std::size_t>(e);
  else if (key == "max_epochs") cfg.max_epochs = number<std::size_t>(e);
  else if (key == "lse_r") {
    cfg.lse_sharpness = number<double>(e);
    if (cfg.aggregation && cfg.aggregation->kind == Aggregation::Kind::lse) cfg.aggregation->sharpness = cfg.lse_sharpness;
  } else if (key == "aggregation") {
    if (e.value == "select_on_validation") cfg.aggregation.reset();
    else cfg.aggregation = Aggregation::parse(e.value, cfg.lse_sharpness);
  } else if (key == "inference_threshold") cfg.inference_threshold = number<double>(e);
  else if (key == "ppl_mode") {
    if (e.value == "renormalize") cfg.ppl_mode = PplMode::renormalize;
    else if (e.value == "ignore") cfg.ppl_mode = PplMode::ignore;
    else throw ConfigError("ppl_mode must be renormalize or ignore (line " + std::to_string(e.line) + ")");
  } else if (key == "reuse_stage1_extractor") cfg.reuse_stage1_extractor = boolean(e);
  else if (key == "extractor_hidden") {
    cfg.architecture.extractor_hidden.clear();
    for (const auto& w : list(e)) cfg.architecture.extractor_hidden.push_back(number<std::size_t>(w, e.line));
  } else return false;
  return true;
}

inline bool apply_dataset_key(SynthConfig& cfg, std::optional<std::filesystem::path>& path, const std::string& key,
                              const ConfigEntry& e) {
  using namespace config_value;
  if (key == "c") cfg.num_positive_classes = number<int>(e);
  else if (key == "dim") cfg.feature_dim = number<std::size_t>(e);
  else if (key == "class_separation") cfg.class_separation = number<double>(e);
  else if (key == "n_train_pos") cfg.n_train_pos = number<std::size_t>(e);
  else if (key == "n_train_neg") cfg.n_train_neg = number<std::size_t>(e);
  else if (key == "n_val_pos") cfg.n_val_pos = number<std::size_t>(e);
  else if (key == "n_val_neg") cfg.n_val_neg = number<std::size_t>(e);
  else if (key == "n_test_pos") cfg.n_test_pos = number<std::size_t>(e);
  else if (key == "n_test_neg") cfg.n_test_neg = number<std::size_t>(e);
  else if (key == "bag_size") cfg.bag_size = number<std::size_t>(e);
  else if (key == "min_negative_fraction") cfg.min_negative_fraction = number<double>(e);
  else if (key == "max_negative_fraction") cfg.max_negative_fraction = number<double>(e);
  else if (key == "path") path = e.value;
  else return false;
  return true;
}

struct ExperimentConfig {
  std::vector<Method> methods = {Method::ours, Method::two_stage, Method::ppl, Method::ce, Method::pl};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::filesystem::path output_dir = "runs";
  /// Worker threads for (method, seed) cells; 0 means one per hardware thread.
  std::size_t jobs = 0;
  SynthConfig dataset;
  /// Load this dataset for every seed instead of generating one.
  std::optional<std::filesystem::path> dataset_path;
  TrainConfig train;
  std::map<Method, TrainConfig> per_method;

  TrainConfig train_config(Method m, std::uint64_t seed) const {
    const auto it = per_method.find(m);
    TrainConfig cfg = it == per_method.end() ? train : it->second;
    cfg.method = m;
    cfg.seed = seed;
    return cfg;
  }
};

inline ExperimentConfig parse_experiment_config(std::istream& in) {
  const ConfigSections sections = parse_config_sections(in);
  ExperimentConfig cfg;
  auto unknown = [](const std::string& section, const std::string& key, const ConfigEntry& e) {
    return ConfigError("line " + std::to_string(e.line) + ": unknown key '" + key + "' in [" + section + "]");
  };
  if (const auto it = sections.find("experiment"); it != sections.end()) {
    for (const auto& [key, e] : it->second) {
      if (key == "methods") {
        cfg.methods.clear();
        for (const auto& m : config_value::list(e)) {
          const Method parsed = parse_method(m);
          if (std::find(cfg.methods.begin(), cfg.methods.end(), parsed) != cfg.methods.end())
            throw ConfigError("method '" + m + "' listed twice");
          cfg.methods.push_back(parsed);
        }
      } else if (key == "seeds") {
        cfg.seeds.clear();
        for (const auto& s : config_value::list(e)) cfg.seeds.push_back(config_value::number<std::uint64_t>(s, e.line));
      } else if (key == "output_dir") {
        cfg.output_dir = e.value;
      } else if (key == "jobs") {
        cfg.jobs = config_value::number<std::size_t>(e);
      } else {
        throw unknown("experiment", key, e);
      }
    }
  }
  if (const auto it = sections.find("dataset"); it != sections.end())
    for (const auto& [key, e] : it->second)
      if (!apply_dataset_key(cfg.dataset, cfg.dataset_path, key, e)) throw unknown("dataset", key, e);
  if (const auto it = sections.find("train"); it != sections.end())
    for (const auto& [key, e] : it->second)
      if (!apply_train_key(cfg.train, key, e)) throw unknown("train", key, e);
  for (const auto& [name, entries] : sections) {
    if (name == "experiment" || name == "dataset" || name == "train") continue;
    if (name.rfind("method.", 0) != 0) throw ConfigError("unknown section [" + name + "]");
    const Method m = parse_method(name.substr(7));
    TrainConfig tc = cfg.train;
    for (const auto& [key, e] : entries)
      if (!apply_train_key(tc, key, e)) throw unknown(name, key, e);
    cfg.per_method[m] = tc;
  }
  if (cfg.methods.empty()) throw ConfigError("no methods requested");
  if (cfg.seeds.empty()) throw ConfigError("no seeds requested");
  cfg.train.validate();
  for (const auto& [m, tc] : cfg.per_method) tc.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_experiment_config(in);
}

inline std::string describe_train_config(const TrainConfig& c) {
  std::ostringstream os;
  os << "learning_rate=" << io::format_real(c.learning_rate) << " batch_bags=" << c.batch_bags
     << " w_mil=" << io::format_real(c.w_mil) << " patience=" << c.patience << " max_epochs=" << c.max_epochs
     << " aggregation=" << (c.aggregation ? c.aggregation->name() : "select_on_validation")
     << " lse_r=" << io::format_real(c.lse_sharpness) << " inference_threshold=" << io::format_real(c.inference_threshold)
     << " ppl_mode=" << (c.ppl_mode == PplMode::renormalize ? "renormalize" : "ignore")
     << " reuse_stage1_extractor=" << (c.reuse_stage1_extractor ? "true" : "false") << " extractor_hidden=";
  for (std::size_t i = 0; i < c.architecture.extractor_hidden.size(); ++i)
    os << (i ? "," : "") << c.architecture.extractor_hidden[i];
  return os.str();
}

/// Canonical text of everything that influences results. Output location and
/// worker count are left out, so they do not change the config hash.
inline std::string describe_experiment(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "methods";
  for (Method m : cfg.methods) os << ' ' << method_name(m);
  os << "\nseeds";
  for (auto s : cfg.seeds) os << ' ' << s;
  const SynthConfig& d = cfg.dataset;
  os << "\ndataset ";
  if (cfg.dataset_path) {
    os << "path=" << cfg.dataset_path->string();
  } else {
    os << "c=" << d.num_positive_classes << " dim=" << d.feature_dim
       << " class_separation=" << io::format_real(d.class_separation) << " n_train_pos=" << d.n_train_pos
       << " n_train_neg=" << d.n_train_neg << " n_val_pos=" << d.n_val_pos << " n_val_neg=" << d.n_val_neg
       << " n_test_pos=" << d.n_test_pos << " n_test_neg=" << d.n_test_neg << " bag_size=" << d.bag_size
       << " min_negative_fraction=" << io::format_real(d.min_negative_fraction)
       << " max_negative_fraction=" << io::format_real(d.max_negative_fraction);
  }
  for (Method m : cfg.methods) os << "\ntrain " << method_name(m) << ' ' << describe_train_config(cfg.train_config(m, 0));
  os << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Summary

struct MetricSummary {
  double mean = 0.0;
  /// Sample standard deviation (n - 1); empty for a single value.
  std::optional<double> std;
  std::vector<double> values;
};

inline MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  double total = 0.0;
  for (double v : s.values) total += v;
  s.mean = total / static_cast<double>(s.values.size());
  if (s.values.size() >= 2) {
    double sq = 0.0;
    for (double v : s.values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(s.values.size() - 1));
  }
  return s;
}

struct CellResult {
  Method method = Method::ours;
  std::uint64_t seed = 0;
  std::optional<EvalReport> report;
  /// Epochs of the final optimization stage.
  std::size_t epochs = 0;
  std::string aggregation;
  std::string error;
  double seconds = 0.0;
};

inline constexpr const char* kSummaryMetrics[] = {"accuracy", "miou", "binary_accuracy"};

inline double metric_of(const EvalReport& r, std::string_view metric) {
  if (metric == "accuracy") return r.accuracy;
  if (metric == "miou") return r.miou;
  if (metric == "binary_accuracy") return r.binary_accuracy;
  throw UsageError("unknown metric '" + std::string(metric) + "'");
}

struct ExperimentSummary {
  std::string config_hash;
  std::vector<Method> methods;
  std::vector<std::uint64_t> seeds;
  /// Cells in (method, seed) order.
  std::vector<CellResult> cells;
  std::filesystem::path run_dir;
  double seconds = 0.0;

  /// Metric over the completed seeds of one method; empty values if none completed.
  MetricSummary metric(Method m, std::string_view name) const {
    std::vector<double> values;
    for (const CellResult& c : cells)
      if (c.method == m && c.report) values.push_back(metric_of(*c.report, name));
    return summarize(std::move(values));
  }

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const CellResult& c) { return !c.report; }));
  }
};

/// Deterministic summary text: no timestamps, paths or timings.
inline void write_summary(std::ostream& out, const ExperimentSummary& s) {
  out << "lplp-summary 1\n";
  out << "config_hash " << s.config_hash << '\n';
  out << "seeds";
  for (auto seed : s.seeds) out << ' ' << seed;
  out << '\n';
  for (Method m : s.methods) {
    for (const char* metric : kSummaryMetrics) {
      const MetricSummary ms = s.metric(m, metric);
      out << "record " << method_name(m) << ' ' << metric << " n " << ms.values.size();
      if (!ms.values.empty()) out << " mean " << io::format_real(ms.mean);
      if (ms.std) out << " std " << io::format_real(*ms.std);
      out << " values";
      for (double v : ms.values) out << ' ' << io::format_real(v);
      out << '\n';
    }
  }
  for (const CellResult& c : s.cells)
    if (!c.report) out << "failure " << method_name(c.method) << ' ' << c.seed << ' ' << c.error << '\n';
  out << "end\n";
}

inline std::string summary_to_string(const ExperimentSummary& s) {
  std::ostringstream os;
  write_summary(os, s);
  return os.str();
}

/// Percentages with two decimals, one row per method.
inline std::string format_table(const ExperimentSummary& s) {
  std::ostringstream os;
  auto cell = [](const MetricSummary& ms) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(2);
    if (ms.values.empty()) {
      c << "n/a";
    } else {
      c << 100.0 * ms.mean;
      if (ms.std) c << " +- " << 100.0 * *ms.std;
    }
    return c.str();
  };
  os << std::left << std::setw(12) << "method" << std::setw(20) << "Acc [%]" << std::setw(20) << "mIoU [%]"
     << std::setw(20) << "Pos/Neg Acc [%]" << "runs\n";
  for (Method m : s.methods) {
    const MetricSummary acc = s.metric(m, "accuracy");
    os << std::setw(12) << method_name(m) << std::setw(20) << cell(acc) << std::setw(20) << cell(s.metric(m, "miou"))
       << std::setw(20) << cell(s.metric(m, "binary_accuracy")) << acc.values.size() << '/' << s.seeds.size() << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Runner

/// Creates <output_dir>/<hash>-<timestamp>, adding -1, -2, ... on collision.
inline std::filesystem::path make_run_dir(const std::filesystem::path& output_dir, const std::string& hash) {
  std::filesystem::create_directories(output_dir);
  std::string stamp = utc_timestamp();
  std::erase(stamp, ':');
  std::erase(stamp, '-');
  const std::string base = hash.substr(0, 12) + "-" + stamp;
  for (int k = 0;; ++k) {
    const std::filesystem::path dir = output_dir / (k == 0 ? base : base + "-" + std::to_string(k));
    if (std::filesystem::create_directory(dir)) return dir;
  }
}

inline std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "method " << r.method << "\nseed " << r.seed << "\ndataset " << r.dataset_fingerprint
     << "\naccuracy " << io::format_real(r.accuracy) << "\nbinary_accuracy " << io::format_real(r.binary_accuracy)
     << "\nmiou " << io::format_real(r.miou) << "\nper_class_iou";
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c)
    os << ' ' << (r.iou_included[c] ? io::format_real(r.per_class_iou[c]) : std::string("excluded"));
  os << "\nconfusion";
  for (std::size_t t = 0; t < r.confusion.num_labels(); ++t) {
    os << (t ? " |" : "");
    for (std::size_t p = 0; p < r.confusion.num_labels(); ++p) os << ' ' << r.confusion.at(t, p);
  }
  os << '\n';
  return os.str();
}

/// Trains one (method, seed) cell and writes its checkpoint, epoch log and report into `dir`.
inline CellResult run_cell(Method method, std::uint64_t seed, const TrainConfig& cfg, const DatasetSplit& data,
                           const std::string& fingerprint, const std::filesystem::path& dir) {
  CellResult cell;
  cell.method = method;
  cell.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  try {
    std::filesystem::create_directories(dir);
    std::ofstream log(dir / "metrics.log");
    TrainHooks hooks;
    hooks.on_epoch = [&log](const EpochRecord& r) { log << format_epoch_record(r) << '\n'; };
    const TrainState state = train(cfg, data, hooks);
    save_checkpoint(Checkpoint::from_state(state, cfg.inference_threshold), dir / "checkpoint.lplp");
    EvalReport report = evaluate(state.model, data.test, cfg.inference_threshold);
    report.method = method_name(method);
    report.seed = seed;
    report.dataset_fingerprint = fingerprint;
    io::write_atomically(dir / "eval.txt", [&](std::ostream& out) { out << format_report(report); });
    cell.epochs = state.epoch;
    cell.aggregation = state.aggregation ? state.aggregation->name() : "none";
    cell.report = std::move(report);
  } catch (const std::exception& e) {
    cell.error = e.what();
    std::replace(cell.error.begin(), cell.error.end(), '\n', ' ');
  }
  cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cell;
}

/// Runs every (method, seed) cell, in parallel when jobs allow, and writes
/// summary.txt and table.txt into a fresh run directory. Progress lines go to `progress`.
inline ExperimentSummary run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentSummary summary;
  summary.config_hash = hex64(fnv1a(describe_experiment(cfg)));
  summary.methods = cfg.methods;
  summary.seeds = cfg.seeds;
  summary.run_dir = make_run_dir(cfg.output_dir, summary.config_hash);
  io::write_atomically(summary.run_dir / "config.txt", [&](std::ostream& out) { out << describe_experiment(cfg); });

  std::vector<DatasetSplit> datasets;
  std::vector<std::string> fingerprints;
  std::optional<DatasetSplit> loaded;
  if (cfg.dataset_path) loaded = load_dataset(*cfg.dataset_path);
  for (auto seed : cfg.seeds) {
    DatasetSplit data;
    if (loaded) {
      data = *loaded;
    } else {
      SynthConfig sc = cfg.dataset;
      sc.seed = seed;
      data = synth_gaussian_dataset(sc);
    }
    const std::filesystem::path dir = summary.run_dir / ("seed-" + std::to_string(seed));
    std::filesystem::create_directories(dir);
    save_dataset(data, dir / "dataset.lplp");
    fingerprints.push_back(dataset_fingerprint(data));
    datasets.push_back(std::move(data));
  }

  struct Job {
    Method method;
    std::size_t seed_index;
  };
  std::vector<Job> jobs;
  for (Method m : cfg.methods)
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) jobs.push_back({m, i});
  summary.cells.resize(jobs.size());

  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      const Job& job = jobs[k];
      const std::uint64_t seed = cfg.seeds[job.seed_index];
      const std::filesystem::path dir =
          summary.run_dir / ("seed-" + std::to_string(seed)) / method_name(job.method);
      summary.cells[k] = run_cell(job.method, seed, cfg.train_config(job.method, seed), datasets[job.seed_index],
                                  fingerprints[job.seed_index], dir);
      if (progress) {
        const CellResult& c = summary.cells[k];
        std::lock_guard lock(progress_mutex);
        *progress << method_name(c.method) << " seed " << c.seed << ": ";
        if (c.report)
          *progress << "accuracy " << std::fixed << std::setprecision(4) << c.report->accuracy << " ("
                    << c.aggregation << ", " << c.epochs << " epochs, " << std::setprecision(1) << c.seconds << " s)";
        else
          *progress << "FAILED " << c.error;
        *progress << std::defaultfloat << std::endl;
      }
    }
  };
  std::size_t threads = cfg.jobs ? cfg.jobs : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  io::write_atomically(summary.run_dir / "summary.txt", [&](std::ostream& out) { write_summary(out, summary); });
  io::write_atomically(summary.run_dir / "table.txt", [&](std::ostream& out) { out << format_table(summary); });
  return summary;
}

}  // namespace lplp
