#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lplp/autodiff.hpp"

namespace lplp::ad {

/// Builds a scalar loss on `tape` from one leaf per parameter.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckReport {
  bool passed = true;
  double worst_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t checked = 0;
  /// Coordinates whose perturbation crossed a kink (relu, clamp or argmax switch).
  std::size_t skipped = 0;
  bool non_finite = false;
  /// Set when a perturbed evaluation was non-finite; empty if the base point was.
  std::optional<std::size_t> non_finite_coordinate;

  std::string summary() const {
    std::ostringstream os;
    os << (passed ? "PASS" : "FAIL") << " worst_rel_err=" << worst_relative_error << " at coordinate "
       << worst_coordinate << " (checked " << checked << ", skipped " << skipped << ")";
    if (non_finite) {
      os << " non-finite loss";
      if (non_finite_coordinate) os << " at coordinate " << *non_finite_coordinate;
    }
    return os.str();
  }
};

namespace detail {

struct Evaluation {
  double value;
  std::uint64_t signature;
};

inline Evaluation evaluate(const LossBuilder& build, std::span<const double> params, Tape& tape) {
  tape.reset();
  const std::vector<Var> leaves = tape.variables(params);
  const Var loss = build(tape, leaves);
  return {loss.value(), tape.branch_signature()};
}

}  // namespace detail

/// Compares reverse-mode adjoints with central differences (f(x+h) - f(x-h)) / 2h,
/// coordinate by coordinate. The relative error of a coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckReport grad_check(const LossBuilder& build, std::span<const double> params, double step,
                                  double tol) {
  if (!(step > 0.0)) throw UsageError("grad_check: step must be positive");
  if (!(tol > 0.0)) throw UsageError("grad_check: tolerance must be positive");

  GradCheckReport report;
  Tape tape;
  const std::vector<Var> leaves = tape.variables(params);
  const Var loss = build(tape, leaves);
  if (!std::isfinite(loss.value())) {
    report.passed = false;
    report.non_finite = true;
    return report;
  }
  const std::uint64_t base_signature = tape.branch_signature();
  tape.backward(loss);
  const std::vector<double> analytic = adjoints(leaves);

  Tape probe;
  std::vector<double> point(params.begin(), params.end());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + step;
    const auto plus = detail::evaluate(build, point, probe);
    point[i] = saved - step;
    const auto minus = detail::evaluate(build, point, probe);
    point[i] = saved;

    if (!std::isfinite(plus.value) || !std::isfinite(minus.value)) {
      report.passed = false;
      report.non_finite = true;
      report.non_finite_coordinate = i;
      return report;
    }
    if (plus.signature != base_signature || minus.signature != base_signature) {
      ++report.skipped;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (!std::isfinite(rel)) {
      report.passed = false;
      report.non_finite = true;
      report.non_finite_coordinate = i;
      return report;
    }
    ++report.checked;
    if (report.checked == 1 || rel > report.worst_relative_error) {
      report.worst_relative_error = rel;
      report.worst_coordinate = i;
    }
  }
  report.passed = report.worst_relative_error <= tol;
  return report;
}

}  // namespace lplp::ad
