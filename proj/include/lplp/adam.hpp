#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lplp/error.hpp"

namespace lplp {

/// Named slice of a flat parameter vector, used for diagnostics.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam. Gradients are checked for finiteness before any state
/// changes; a bad entry raises TrainingError naming its block.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      std::span<const ParamBlock> blocks = {}) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw UsageError("adam_step: parameter, gradient and moment lengths differ");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (std::isfinite(grads[i])) continue;
    std::string where = "parameter " + std::to_string(i);
    for (const ParamBlock& b : blocks)
      if (i >= b.offset && i < b.offset + b.size) where = b.name + "[" + std::to_string(i - b.offset) + "]";
    throw TrainingError("non-finite gradient at " + where);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

}  // namespace lplp
