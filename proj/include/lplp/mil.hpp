#pragma once

// Output-aggregation MIL: per-instance scores pooled into a bag score and
// trained with bag-level binary cross-entropy.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "lplp/autodiff.hpp"
#include "lplp/bagdata.hpp"
#include "lplp/nets.hpp"

namespace lplp {

struct Aggregation {
  enum class Kind { mean, max, lse };

  Kind kind = Kind::mean;
  /// Sharpness r of LSE pooling.
  double sharpness = 4.0;

  static Aggregation mean() { return {Kind::mean, 4.0}; }
  static Aggregation max() { return {Kind::max, 4.0}; }
  static Aggregation lse(double r = 4.0) {
    if (!(r > 0.0)) throw ConfigError("LSE sharpness must be positive");
    return {Kind::lse, r};
  }

  std::string name() const {
    switch (kind) {
      case Kind::mean: return "mean";
      case Kind::max: return "max";
      case Kind::lse: return "lse";
    }
    return "?";
  }

  static Aggregation parse(const std::string& name, double r = 4.0) {
    if (name == "mean") return mean();
    if (name == "max") return max();
    if (name == "lse") return lse(r);
    throw ConfigError("unknown aggregation '" + name + "' (expected mean, max or lse)");
  }

  bool operator==(const Aggregation&) const = default;
};

/// Bag score from instance scores.
///   mean: arithmetic mean
///   max:  hard maximum, gradient to the first maximal score
///   lse:  (1/r) log((1/n) sum_j exp(r s_j)), which stays within [min s, max s]
inline ad::Var aggregate(std::span<const ad::Var> scores, const Aggregation& agg) {
  if (scores.empty()) throw UsageError("aggregate: empty bag");
  const double n = static_cast<double>(scores.size());
  switch (agg.kind) {
    case Aggregation::Kind::mean:
      return ad::sum(scores) * (1.0 / n);
    case Aggregation::Kind::max:
      return ad::max(scores);
    case Aggregation::Kind::lse: {
      const double r = agg.sharpness;
      if (!(r > 0.0)) throw UsageError("aggregate: LSE sharpness must be positive");
      // Shifting by the maximum keeps exp() in range; the shift cancels analytically.
      double top = scores.front().value();
      for (ad::Var s : scores) top = std::max(top, s.value());
      ad::Tape& tape = *scores.front().tape();
      const ad::Var shift = tape.variable(top);
      std::vector<ad::Var> terms;
      terms.reserve(scores.size());
      for (ad::Var s : scores) terms.push_back(ad::exp((s - shift) * r));
      return shift + ad::log(ad::sum(terms) * (1.0 / n)) * (1.0 / r);
    }
  }
  throw UsageError("aggregate: unknown kind");
}

inline constexpr double kProbabilityFloor = 1e-12;

/// -Y log S - (1 - Y) log(1 - S) with S clamped to [1e-12, 1 - 1e-12].
inline ad::Var mil_loss(int bag_label, ad::Var bag_score) {
  if (bag_label != 0 && bag_label != 1) throw UsageError("mil_loss: bag label must be 0 or 1");
  const ad::Var s = ad::clamp(bag_score, kProbabilityFloor, 1.0 - kProbabilityFloor);
  if (bag_label == 1) return -ad::log(s);
  return -ad::log(1.0 - s);
}

struct MilForward {
  /// f(x_j) for every instance, reused by the class path.
  std::vector<std::vector<ad::Var>> features;
  /// Instance scores in instance order.
  std::vector<ad::Var> scores;
  ad::Var bag_score;
  ad::Var loss;
};

inline MilForward mil_bag_forward(const BoundModel& model, const Bag& bag, const Aggregation& agg, ad::Tape& tape) {
  if (!model.score_head) throw UsageError("mil_bag_forward: model has no score head");
  if (bag.instances.empty()) throw UsageError("mil_bag_forward: empty bag");
  MilForward out;
  out.features.reserve(bag.size());
  out.scores.reserve(bag.size());
  for (const Instance& x : bag.instances) {
    out.features.push_back(forward_feature(model.extractor, x, tape));
    out.scores.push_back(instance_score(*model.score_head, out.features.back()));
  }
  out.bag_score = aggregate(out.scores, agg);
  out.loss = mil_loss(bag.bag_label, out.bag_score);
  return out;
}

}  // namespace lplp
