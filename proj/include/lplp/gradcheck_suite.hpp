#pragma once

// Finite-difference check of the joint loss summed over one positive and one
// negative bag, on randomly drawn bags and model initializations.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lplp/grad_check.hpp"
#include "lplp/trainer.hpp"

namespace lplp {

struct GradCheckSuiteConfig {
  std::size_t trials = 10;
  int num_classes = 2;
  std::size_t feature_dim = 6;
  std::size_t bag_size = 12;
  double w_mil = 0.5;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct GradCheckTrial {
  std::string aggregation;
  ad::GradCheckReport report;
};

struct GradCheckSuiteResult {
  std::vector<GradCheckTrial> trials;
  double worst_relative_error = 0.0;
  bool passed = true;
};

namespace detail {

/// Random bag with Gaussian features. Positive bags mix negatives and positives.
inline Bag random_bag(int num_classes, std::size_t dim, std::size_t size, bool positive, Rng& rng, std::uint64_t id) {
  std::normal_distribution<double> normal(0.0, 1.5);
  Bag bag;
  bag.id = id;
  bag.bag_label = positive ? 1 : 0;
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  std::size_t positives = 0;
  for (std::size_t j = 0; j < size; ++j) {
    Instance x;
    x.id = id * 1000 + j;
    // Instance 0 of a positive bag is always positive so the proportions are defined.
    if (positive && (j == 0 || rng() % 3 != 0)) {
      x.true_label = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(num_classes));
      ++counts[static_cast<std::size_t>(x.true_label - 1)];
      ++positives;
    }
    for (std::size_t k = 0; k < dim; ++k) x.features.push_back(normal(rng));
    bag.instances.push_back(std::move(x));
  }
  if (positive) {
    std::vector<double> p(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) p[c] = static_cast<double>(counts[c]) / static_cast<double>(positives);
    bag.partial_proportions = std::move(p);
  }
  return bag;
}

/// Binds a masked model whose parameters are the consecutive leaves of `params`
/// in the order extractor, score head, class head.
inline BoundModel bind_flat(const ModelTriple& model, std::span<const ad::Var> params) {
  BoundModel b;
  std::size_t offset = 0;
  auto take = [&](const Mlp& net) {
    const std::size_t n = net.params.size();
    BoundMlp bound = bind(net.spec, params.subspan(offset, n));
    offset += n;
    return bound;
  };
  b.extractor = take(model.extractor);
  b.score_head = take(*model.score_head);
  b.class_head = take(model.class_head);
  return b;
}

}  // namespace detail

/// Trial k uses aggregation mean, max or lse (cycling) and a fresh model seed.
inline GradCheckSuiteResult run_gradcheck_suite(const GradCheckSuiteConfig& cfg = {}) {
  GradCheckSuiteResult result;
  const Aggregation kinds[] = {Aggregation::mean(), Aggregation::max(), Aggregation::lse(4.0)};
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    const std::uint64_t trial_seed = derive_seed(cfg.seed, t);
    Rng rng(trial_seed);
    const Bag pos = detail::random_bag(cfg.num_classes, cfg.feature_dim, cfg.bag_size, true, rng, 1);
    const Bag neg = detail::random_bag(cfg.num_classes, cfg.feature_dim, cfg.bag_size, false, rng, 2);
    const ModelTriple model = make_masked_model(cfg.num_classes, cfg.feature_dim, derive_seed(trial_seed, 7));
    const Aggregation agg = kinds[t % 3];

    std::vector<double> params;
    for (const Mlp* net : {&model.extractor, &*model.score_head, &model.class_head})
      params.insert(params.end(), net->params.begin(), net->params.end());

    const ad::LossBuilder build = [&](ad::Tape& tape, std::span<const ad::Var> leaves) {
      const BoundModel bound = detail::bind_flat(model, leaves);
      return joint_loss(bound, pos, agg, cfg.w_mil, tape) + joint_loss(bound, neg, agg, cfg.w_mil, tape);
    };
    GradCheckTrial trial{agg.name(), ad::grad_check(build, params, cfg.step, cfg.tolerance)};
    result.passed = result.passed && trial.report.passed;
    if (trial.report.worst_relative_error > result.worst_relative_error)
      result.worst_relative_error = trial.report.worst_relative_error;
    result.trials.push_back(std::move(trial));
  }
  return result;
}

}  // namespace lplp
