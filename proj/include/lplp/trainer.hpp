#pragma once

// Training drivers for the proposed joint method and the four comparison
// methods, early stopping, and (C+1)-class inference.
//
//   ours       f, g, h trained jointly: L_llp(p, p_hat) + w_mil * L_mil(Y, S)
//   two_stage  f, g trained with L_mil alone, then frozen; a fresh f', h are
//              trained with the proportion loss on hard-selected instances
//   ppl        f + (C+1)-way head, partial proportion loss
//   ce         f + (C+1)-way head, instance cross-entropy (oracle: reads labels)
//   pl         f + (C+1)-way head, complete proportion loss (oracle: reads the
//              realized negative fraction)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lplp/adam.hpp"
#include "lplp/autodiff.hpp"
#include "lplp/bagdata.hpp"
#include "lplp/llp.hpp"
#include "lplp/mil.hpp"
#include "lplp/nets.hpp"

namespace lplp {

enum class Method { ce, pl, ppl, two_stage, ours };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::ce: return "ce";
    case Method::pl: return "pl";
    case Method::ppl: return "ppl";
    case Method::two_stage: return "two_stage";
    case Method::ours: return "ours";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::ce, Method::pl, Method::ppl, Method::two_stage, Method::ours})
    if (method_name(m) == s) return m;
  throw ConfigError("unknown method '" + s + "' (expected ce, pl, ppl, two_stage or ours)");
}

/// Oracle methods read generator-side ground truth.
inline bool is_oracle(Method m) { return m == Method::ce || m == Method::pl; }

struct TrainConfig {
  Method method = Method::ours;
  double learning_rate = 0.0003;
  std::size_t batch_bags = 16;
  double w_mil = 0.01;
  std::size_t patience = 30;
  std::size_t max_epochs = 1000;
  /// Empty means: train mean, max and lse and keep the lowest validation loss.
  std::optional<Aggregation> aggregation;
  double lse_sharpness = 4.0;
  double inference_threshold = 0.5;
  std::uint64_t seed = 0;
  PplMode ppl_mode = PplMode::renormalize;
  /// Two-stage only: reuse the frozen stage-1 extractor instead of training a fresh one.
  bool reuse_stage1_extractor = false;
  Architecture architecture;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_bags < 1) throw ConfigError("batch_bags must be at least 1");
    if (!(w_mil >= 0.0)) throw ConfigError("w_mil must be non-negative");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
    if (!(lse_sharpness > 0.0)) throw ConfigError("lse_r must be positive");
    if (!(inference_threshold > 0.0 && inference_threshold < 1.0))
      throw ConfigError("inference_threshold must lie in (0, 1)");
  }
};

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::size_t epochs_since_improvement = 0;
  std::string timestamp;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Optional callbacks into the training loop.
struct TrainHooks {
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Replaces the computed validation loss (scripted runs in tests).
  std::function<double(std::size_t epoch, double computed)> validation_override;
};

/// Patience counter over a validation series. Any strict decrease resets it.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Registers one epoch's validation loss. Returns true if it is a new best.
  bool observe(double val_loss) {
    ++epochs_;
    if (val_loss < best_) {
      best_ = val_loss;
      best_epoch_ = epochs_;
      since_ = 0;
      return true;
    }
    ++since_;
    return false;
  }

  bool should_stop() const noexcept { return since_ >= patience_; }
  double best() const noexcept { return best_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  std::size_t epochs() const noexcept { return epochs_; }
  std::size_t since_improvement() const noexcept { return since_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t epochs_ = 0;
  std::size_t since_ = 0;
};

struct TrainState {
  Method method = Method::ours;
  ModelTriple model;
  std::optional<Aggregation> aggregation;
  /// Epochs run by the final (or stage-2) optimization.
  std::size_t epoch = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_improvement = 0;
  std::vector<EpochRecord> log;
  /// (aggregation, best validation loss) of every candidate tried.
  std::vector<std::pair<Aggregation, double>> aggregation_trials;
  /// Two-stage: positive bags dropped because no instance passed the threshold.
  std::size_t skipped_bags = 0;
};

enum class NetRole { extractor, score_head, class_head, class_extractor };

inline const char* role_name(NetRole r) {
  switch (r) {
    case NetRole::extractor: return "extractor";
    case NetRole::score_head: return "score_head";
    case NetRole::class_head: return "class_head";
    case NetRole::class_extractor: return "class_extractor";
  }
  return "?";
}

namespace detail {

inline Mlp& net_of(ModelTriple& m, NetRole r) {
  switch (r) {
    case NetRole::extractor: return m.extractor;
    case NetRole::score_head: return m.score_head.value();
    case NetRole::class_head: return m.class_head;
    case NetRole::class_extractor: return m.class_extractor.value();
  }
  throw UsageError("unknown net role");
}

inline const BoundMlp& bound_of(const BoundModel& m, NetRole r) {
  switch (r) {
    case NetRole::extractor: return m.extractor;
    case NetRole::score_head: return m.score_head.value();
    case NetRole::class_head: return m.class_head;
    case NetRole::class_extractor: return m.class_extractor.value();
  }
  throw UsageError("unknown net role");
}

}  // namespace detail

/// Per-bag loss built on a tape from the bound model.
using BagObjective = std::function<ad::Var(const BoundModel&, const Bag&, ad::Tape&)>;

/// L_llp(p, p_hat) + w_mil * L_mil(1, S) for positive bags, w_mil * L_mil(0, S) for negative bags.
inline ad::Var joint_loss(const BoundModel& model, const Bag& bag, const Aggregation& agg, double w_mil,
                          ad::Tape& tape) {
  const MilForward mil = mil_bag_forward(model, bag, agg, tape);
  const ad::Var weighted_mil = mil.loss * w_mil;
  if (!bag.positive()) return weighted_mil;
  std::vector<std::vector<ad::Var>> probs;
  probs.reserve(bag.size());
  for (const auto& feat : mil.features) probs.push_back(instance_class_probs(model.class_head, feat));
  const MaskedProportionEstimate est = masked_proportion(mil.scores, probs);
  return proportion_loss(*bag.partial_proportions, est) + weighted_mil;
}

namespace detail {

inline std::vector<std::vector<ad::Var>> class_path_probs(const BoundModel& model, const Bag& bag, ad::Tape& tape) {
  const BoundMlp& fx = model.class_extractor ? *model.class_extractor : model.extractor;
  std::vector<std::vector<ad::Var>> probs;
  probs.reserve(bag.size());
  for (const Instance& x : bag.instances) {
    const auto feat = forward_feature(fx, x, tape);
    probs.push_back(instance_class_probs(model.class_head, feat));
  }
  return probs;
}

/// Index of a ground-truth label in a (C+1)-way head (negative last).
inline std::size_t flat_index(int label, int num_classes) {
  return label == 0 ? static_cast<std::size_t>(num_classes) : static_cast<std::size_t>(label - 1);
}

inline ad::Var ce_bag_loss(const BoundModel& model, const Bag& bag, int num_classes, ad::Tape& tape) {
  const auto probs = class_path_probs(model, bag, tape);
  std::vector<ad::Var> terms;
  terms.reserve(bag.size());
  for (std::size_t j = 0; j < bag.size(); ++j)
    terms.push_back(ad::safe_log(probs[j][flat_index(bag.instances[j].true_label, num_classes)]));
  return ad::sum(terms) * (-1.0 / static_cast<double>(bag.size()));
}

inline std::vector<double> complete_proportions(const Bag& bag, int num_classes) {
  if (!bag.positive()) {
    std::vector<double> target(static_cast<std::size_t>(num_classes) + 1, 0.0);
    target.back() = 1.0;
    return target;
  }
  return full_proportion_from_partial(*bag.partial_proportions, bag.realized_negative_fraction());
}

inline ad::Var pl_bag_loss(const BoundModel& model, const Bag& bag, int num_classes, ad::Tape& tape) {
  const auto probs = class_path_probs(model, bag, tape);
  return proportion_loss(complete_proportions(bag, num_classes), mean_distribution(probs));
}

inline ad::Var hard_selected_llp_loss(const BoundModel& model, const Bag& bag, ad::Tape& tape) {
  const auto probs = class_path_probs(model, bag, tape);
  return proportion_loss(*bag.partial_proportions, mean_distribution(probs));
}

/// Mini-batch Adam over the nets in `roles`, with early stopping on the mean
/// validation objective. `state.model` holds the best-validation parameters on return.
inline void optimize(TrainState& state, const std::string& stage, const std::vector<NetRole>& roles,
                     const BagObjective& objective, const std::vector<Bag>& train, const std::vector<Bag>& validation,
                     const TrainConfig& cfg, std::uint64_t seed, const TrainHooks& hooks) {
  if (train.empty()) throw TrainingError(stage + ": no training bags");
  if (validation.empty()) throw TrainingError(stage + ": no validation bags");

  ModelTriple model = state.model;
  std::vector<ParamBlock> blocks;
  std::size_t total = 0;
  for (NetRole r : roles) {
    const std::size_t n = net_of(model, r).params.size();
    blocks.push_back({role_name(r), total, n});
    total += n;
  }
  std::vector<double> flat(total), grads(total);
  auto gather = [&] {
    for (std::size_t k = 0; k < roles.size(); ++k) {
      const auto& p = net_of(model, roles[k]).params;
      std::copy(p.begin(), p.end(), flat.begin() + static_cast<std::ptrdiff_t>(blocks[k].offset));
    }
  };
  auto scatter = [&] {
    for (std::size_t k = 0; k < roles.size(); ++k) {
      auto& p = net_of(model, roles[k]).params;
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(blocks[k].offset), p.size(), p.begin());
    }
  };
  gather();

  AdamState adam(total);
  EarlyStopping stopper(cfg.patience);
  ad::Tape tape;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  auto validation_loss = [&] {
    double acc = 0.0;
    for (const Bag& bag : validation) {
      tape.reset();
      const BoundModel bound = bind(model, tape);
      acc += objective(bound, bag, tape).value();
    }
    return acc / static_cast<double>(validation.size());
  };

  ModelTriple best = model;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double train_acc = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_bags) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_bags);
      const double inv = 1.0 / static_cast<double>(stop - start);
      std::fill(grads.begin(), grads.end(), 0.0);
      for (std::size_t k = start; k < stop; ++k) {
        tape.reset();
        const BoundModel bound = bind(model, tape);
        const ad::Var loss = objective(bound, train[order[k]], tape);
        if (!std::isfinite(loss.value()))
          throw TrainingError(stage + ": non-finite loss on bag " + std::to_string(train[order[k]].id));
        train_acc += loss.value();
        tape.backward(loss);
        for (std::size_t r = 0; r < roles.size(); ++r) {
          const auto& leaves = bound_of(bound, roles[r]).leaves;
          double* g = grads.data() + blocks[r].offset;
          for (std::size_t i = 0; i < leaves.size(); ++i) g[i] += inv * leaves[i].adjoint();
        }
      }
      adam_step(flat, grads, adam, cfg.learning_rate, blocks);
      scatter();
    }

    double val = validation_loss();
    if (hooks.validation_override) val = hooks.validation_override(epoch, val);
    if (stopper.observe(val)) best = model;

    EpochRecord rec;
    rec.stage = stage;
    rec.epoch = epoch;
    rec.train_loss = train_acc / static_cast<double>(train.size());
    rec.val_loss = val;
    rec.epochs_since_improvement = stopper.since_improvement();
    rec.timestamp = utc_timestamp();
    state.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (stopper.should_stop()) break;
  }

  state.model = std::move(best);
  state.epoch = stopper.epochs();
  state.best_epoch = stopper.best_epoch();
  state.best_val_loss = stopper.best();
  state.epochs_since_improvement = stopper.since_improvement();
}

inline std::vector<Aggregation> aggregation_candidates(const TrainConfig& cfg) {
  if (cfg.aggregation) return {*cfg.aggregation};
  return {Aggregation::mean(), Aggregation::max(), Aggregation::lse(cfg.lse_sharpness)};
}

/// Runs `fit` once per aggregation candidate and keeps the lowest best validation loss.
/// Ties keep the earlier candidate (mean, max, lse order).
inline TrainState select_aggregation(const TrainConfig& cfg, const std::function<TrainState(const Aggregation&)>& fit) {
  std::optional<TrainState> chosen;
  std::vector<std::pair<Aggregation, double>> trials;
  for (const Aggregation& agg : aggregation_candidates(cfg)) {
    TrainState s = fit(agg);
    trials.emplace_back(agg, s.best_val_loss);
    if (!chosen || s.best_val_loss < chosen->best_val_loss) chosen = std::move(s);
  }
  chosen->aggregation_trials = std::move(trials);
  return std::move(*chosen);
}

inline void check_data(const TrainConfig& cfg, const DatasetSplit& data) {
  cfg.validate();
  validate_dataset(data);
  if (data.num_positive_classes < 1) throw ConfigError("dataset has no positive classes");
  if (data.train.empty() || data.validation.empty())
    throw ConfigError("training needs non-empty train and validation splits");
  const bool any_pos = std::any_of(data.train.begin(), data.train.end(), [](const Bag& b) { return b.positive(); });
  const bool any_neg = std::any_of(data.train.begin(), data.train.end(), [](const Bag& b) { return !b.positive(); });
  if (cfg.method != Method::ce && !any_pos)
    throw ConfigError(method_name(cfg.method) + " needs positive training bags with proportions");
  if ((cfg.method == Method::ours || cfg.method == Method::two_stage) && !any_neg)
    throw ConfigError(method_name(cfg.method) + " needs negative training bags for the MIL module");
}

}  // namespace detail

/// Keeps instances with score >= threshold from every positive bag; the stored
/// proportions are carried over unchanged. Returns the number of bags dropped empty.
inline std::size_t select_positive_instances(const ModelTriple& stage1, const std::vector<Bag>& bags, double threshold,
                                             std::vector<Bag>& out) {
  std::size_t skipped = 0;
  for (const Bag& bag : bags) {
    if (!bag.positive()) continue;
    Bag kept;
    kept.id = bag.id;
    kept.bag_label = bag.bag_label;
    kept.partial_proportions = bag.partial_proportions;
    for (const Instance& x : bag.instances)
      if (score_value(stage1, x.features) >= threshold) kept.instances.push_back(x);
    if (kept.instances.empty()) {
      ++skipped;
      continue;
    }
    out.push_back(std::move(kept));
  }
  return skipped;
}

/// Trains f and g with the bag-level MIL loss alone (stage 1 of the two-stage baseline).
inline TrainState train_mil(const TrainConfig& cfg, const DatasetSplit& data, const TrainHooks& hooks = {}) {
  cfg.validate();
  validate_dataset(data);
  return detail::select_aggregation(cfg, [&](const Aggregation& agg) {
    TrainState s;
    s.method = cfg.method;
    s.aggregation = agg;
    s.model = make_masked_model(data.num_positive_classes, data.feature_dim, cfg.seed, cfg.architecture);
    const BagObjective objective = [agg](const BoundModel& m, const Bag& bag, ad::Tape& tape) {
      return mil_bag_forward(m, bag, agg, tape).loss;
    };
    detail::optimize(s, "mil:" + agg.name(), {NetRole::extractor, NetRole::score_head}, objective, data.train,
                     data.validation, cfg, derive_seed(cfg.seed, 101), hooks);
    return s;
  });
}

inline TrainState train_two_stage(const TrainConfig& cfg, const DatasetSplit& data, const TrainHooks& hooks = {}) {
  detail::check_data(cfg, data);
  TrainState stage1 = train_mil(cfg, data, hooks);

  std::vector<Bag> train_sel, val_sel;
  const std::size_t skipped = select_positive_instances(stage1.model, data.train, cfg.inference_threshold, train_sel);
  select_positive_instances(stage1.model, data.validation, cfg.inference_threshold, val_sel);
  if (train_sel.empty()) throw TrainingError("two_stage: every positive training bag is empty after selection");
  if (val_sel.empty()) throw TrainingError("two_stage: every positive validation bag is empty after selection");

  TrainState s;
  s.method = Method::two_stage;
  s.aggregation = stage1.aggregation;
  s.aggregation_trials = stage1.aggregation_trials;
  s.log = stage1.log;
  s.skipped_bags = skipped;
  s.model = stage1.model;
  // Fresh class head (and extractor unless reused) for stage 2.
  const ModelTriple fresh =
      make_masked_model(data.num_positive_classes, data.feature_dim, derive_seed(cfg.seed, 202), cfg.architecture);
  s.model.class_head = fresh.class_head;
  std::vector<NetRole> roles = {NetRole::class_head};
  if (!cfg.reuse_stage1_extractor) {
    s.model.class_extractor = fresh.extractor;
    roles.insert(roles.begin(), NetRole::class_extractor);
  }
  const BagObjective objective = [](const BoundModel& m, const Bag& bag, ad::Tape& tape) {
    return detail::hard_selected_llp_loss(m, bag, tape);
  };
  detail::optimize(s, "llp", roles, objective, train_sel, val_sel, cfg, derive_seed(cfg.seed, 102), hooks);
  return s;
}

/// Trains one method end to end and returns the best-validation model.
inline TrainState train(const TrainConfig& cfg, const DatasetSplit& data, const TrainHooks& hooks = {}) {
  detail::check_data(cfg, data);
  const int num_classes = data.num_positive_classes;
  switch (cfg.method) {
    case Method::two_stage:
      return train_two_stage(cfg, data, hooks);
    case Method::ours:
      return detail::select_aggregation(cfg, [&](const Aggregation& agg) {
        TrainState s;
        s.method = Method::ours;
        s.aggregation = agg;
        s.model = make_masked_model(num_classes, data.feature_dim, cfg.seed, cfg.architecture);
        const double w = cfg.w_mil;
        const BagObjective objective = [agg, w](const BoundModel& m, const Bag& bag, ad::Tape& tape) {
          return joint_loss(m, bag, agg, w, tape);
        };
        detail::optimize(s, "joint:" + agg.name(),
                         {NetRole::extractor, NetRole::score_head, NetRole::class_head}, objective, data.train,
                         data.validation, cfg, derive_seed(cfg.seed, 103), hooks);
        return s;
      });
    case Method::ce:
    case Method::pl:
    case Method::ppl: {
      TrainState s;
      s.method = cfg.method;
      s.model = make_flat_model(num_classes, data.feature_dim, cfg.seed, cfg.architecture);
      BagObjective objective;
      if (cfg.method == Method::ce) {
        objective = [num_classes](const BoundModel& m, const Bag& bag, ad::Tape& tape) {
          return detail::ce_bag_loss(m, bag, num_classes, tape);
        };
      } else if (cfg.method == Method::pl) {
        objective = [num_classes](const BoundModel& m, const Bag& bag, ad::Tape& tape) {
          return detail::pl_bag_loss(m, bag, num_classes, tape);
        };
      } else {
        const PplMode mode = cfg.ppl_mode;
        objective = [mode](const BoundModel& m, const Bag& bag, ad::Tape& tape) {
          return ppl_loss(bag, detail::class_path_probs(m, bag, tape), mode);
        };
      }
      detail::optimize(s, method_name(cfg.method), {NetRole::extractor, NetRole::class_head}, objective, data.train,
                       data.validation, cfg, derive_seed(cfg.seed, 104), hooks);
      return s;
    }
  }
  throw ConfigError("unknown method");
}

struct InstancePrediction {
  /// Positive-instance score in [0, 1].
  double score = 0.0;
  /// Distribution over the C positive classes.
  std::vector<double> class_probs;
  /// Final label in {0..C}.
  int label = 0;
};

/// Masked models: score < threshold gives 0, otherwise 1 + argmax of the class
/// distribution (lowest class on ties). Flat models: argmax over the C+1
/// outputs with the last output mapped to 0.
inline InstancePrediction infer_instance(const ModelTriple& model, const Instance& x, double threshold) {
  if (x.features.size() != model.feature_dim)
    throw UsageError("infer_instance: instance has " + std::to_string(x.features.size()) +
                     " features, model expects " + std::to_string(model.feature_dim));
  InstancePrediction out;
  std::vector<double> probs = class_probs_value(model, x.features);
  if (model.masked()) {
    out.score = score_value(model, x.features);
    out.class_probs = std::move(probs);
    if (out.score < threshold) {
      out.label = 0;
    } else {
      const auto it = std::max_element(out.class_probs.begin(), out.class_probs.end());
      out.label = 1 + static_cast<int>(it - out.class_probs.begin());
    }
    return out;
  }
  const auto it = std::max_element(probs.begin(), probs.end());
  const auto idx = static_cast<std::size_t>(it - probs.begin());
  out.label = idx == probs.size() - 1 ? 0 : static_cast<int>(idx) + 1;
  const double neg = probs.back();
  out.score = 1.0 - neg;
  out.class_probs.assign(probs.begin(), probs.end() - 1);
  const double mass = std::max(out.score, kMaskEpsilon);
  for (double& v : out.class_probs) v /= mass;
  return out;
}

}  // namespace lplp
