#pragma once

// Label-proportion losses: the soft-masked proportion estimate, the
// bag-level proportion cross-entropy, and the partial-proportion (PPL)
// baseline loss.

#include <algorithm>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lplp/autodiff.hpp"
#include "lplp/bagdata.hpp"

namespace lplp {

/// Lower bound for the mask sum and the PPL positive-block mass.
inline constexpr double kMaskEpsilon = 1e-8;
/// Mask sums below this are reported as degenerate.
inline constexpr double kDegenerateMask = 1e-6;

struct MaskedProportionEstimate {
  std::vector<ad::Var> p_hat;
  ad::Var mask_sum;
  bool degenerate_mask = false;
};

/// p_hat = sum_j s_j z_j / sum_j s_j. The denominator is floored at kMaskEpsilon.
inline MaskedProportionEstimate masked_proportion(std::span<const ad::Var> scores,
                                                  std::span<const std::vector<ad::Var>> probs) {
  if (scores.empty()) throw UsageError("masked_proportion: empty bag");
  if (scores.size() != probs.size()) throw UsageError("masked_proportion: scores and probabilities differ in length");
  const std::size_t num_classes = probs.front().size();
  for (const auto& z : probs)
    if (z.size() != num_classes) throw UsageError("masked_proportion: ragged class distributions");

  MaskedProportionEstimate est;
  est.mask_sum = ad::sum(scores);
  est.degenerate_mask = est.mask_sum.value() < kDegenerateMask;
  const ad::Var denom = ad::clamp(est.mask_sum, kMaskEpsilon, std::numeric_limits<double>::infinity());

  std::vector<ad::Var> weighted(scores.size());
  est.p_hat.reserve(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t j = 0; j < scores.size(); ++j) weighted[j] = scores[j] * probs[j][c];
    est.p_hat.push_back(ad::sum(weighted) / denom);
  }
  return est;
}

/// -sum_c p_c log p_hat_c, with p_hat clamped to >= 1e-12. Zero-weight terms are skipped.
inline ad::Var proportion_loss(std::span<const double> p, std::span<const ad::Var> p_hat) {
  if (p.size() != p_hat.size())
    throw UsageError("proportion_loss: target has " + std::to_string(p.size()) + " classes, estimate has " +
                     std::to_string(p_hat.size()));
  if (p.empty()) throw UsageError("proportion_loss: empty proportion vector");
  std::vector<ad::Var> terms;
  terms.reserve(p.size());
  for (std::size_t c = 0; c < p.size(); ++c)
    if (p[c] != 0.0) terms.push_back(ad::safe_log(p_hat[c]) * (-p[c]));
  if (terms.empty()) return p_hat.front() * 0.0;
  return ad::sum(terms);
}

inline ad::Var proportion_loss(std::span<const double> p, const MaskedProportionEstimate& est) {
  return proportion_loss(p, est.p_hat);
}

/// Unweighted mean of per-instance distributions.
inline std::vector<ad::Var> mean_distribution(std::span<const std::vector<ad::Var>> probs) {
  if (probs.empty()) throw UsageError("mean_distribution: empty bag");
  const std::size_t k = probs.front().size();
  const double inv_n = 1.0 / static_cast<double>(probs.size());
  std::vector<ad::Var> column(probs.size());
  std::vector<ad::Var> out;
  out.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < probs.size(); ++j) {
      if (probs[j].size() != k) throw UsageError("mean_distribution: ragged class distributions");
      column[j] = probs[j][c];
    }
    out.push_back(ad::sum(column) * inv_n);
  }
  return out;
}

/// How PPL compares a positive bag's C-class target with the (C+1)-way average.
enum class PplMode {
  /// Positive block of the average divided by its mass.
  renormalize,
  /// Positive block used as is; the negative entry is ignored.
  ignore,
};

/// Partial proportion loss for a (C+1)-way head whose last output is the negative class.
/// Positive bags: cross-entropy between p and the positive block of the bag-averaged
/// distribution. Negative bags: cross-entropy against (0, ..., 0, 1).
inline ad::Var ppl_loss(const Bag& bag, std::span<const std::vector<ad::Var>> probs, PplMode mode = PplMode::renormalize) {
  if (probs.size() != bag.size()) throw UsageError("ppl_loss: one distribution per instance required");
  const std::vector<ad::Var> avg = mean_distribution(probs);
  const std::size_t num_positive = avg.size() - 1;
  if (!bag.positive()) return -ad::safe_log(avg.back());

  const auto& p = *bag.partial_proportions;
  if (p.size() != num_positive)
    throw UsageError("ppl_loss: head has " + std::to_string(num_positive) + " positive classes, bag has " +
                     std::to_string(p.size()));
  std::vector<ad::Var> block(avg.begin(), avg.end() - 1);
  if (mode == PplMode::renormalize) {
    const ad::Var mass = ad::clamp(ad::sum(block), kMaskEpsilon, std::numeric_limits<double>::infinity());
    for (ad::Var& v : block) v = v / mass;
  }
  return proportion_loss(p, block);
}

}  // namespace lplp
