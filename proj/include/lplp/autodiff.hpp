#pragma once

// Scalar reverse-mode automatic differentiation.
//
// A Tape is an append-only arena of nodes. Every node stores its forward
// value together with the local partial derivative towards each parent, so
// the reverse sweep is a single pass over the arena in reverse creation
// order. Creation order is a topological order by construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lplp/error.hpp"

namespace lplp::ad {

/// Lower bound applied to every loss-side logarithm argument.
inline constexpr double kLogFloor = 1e-12;

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  exp,
  log,
  sigmoid,
  relu,
  neg,
  clamp,
  sum,
  affine,
  max,
  custom,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sigmoid: return "sigmoid";
    case Op::relu: return "relu";
    case Op::neg: return "neg";
    case Op::clamp: return "clamp";
    case Op::sum: return "sum";
    case Op::affine: return "affine";
    case Op::max: return "max";
    case Op::custom: return "custom";
  }
  return "?";
}

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape is reset.
class Var {
 public:
  Var() = default;

  inline double value() const;
  inline double adjoint() const;
  Tape* tape() const noexcept { return tape_; }
  std::uint32_t index() const noexcept { return index_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::uint32_t index_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// New leaf node. Parameters and constants are both leaves.
  Var variable(double value) {
    open_node(Op::leaf, 0);
    nodes_.back().value = value;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  std::vector<Var> variables(std::span<const double> values) {
    std::vector<Var> out;
    out.reserve(values.size());
    nodes_.reserve(nodes_.size() + values.size());
    for (double v : values) out.push_back(variable(v));
    return out;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool contains(Var v) const noexcept { return v.tape_ == this && v.index_ < nodes_.size(); }

  double value(Var v) const { return node(v).value; }
  double adjoint(Var v) const { return node(v).adjoint; }
  Op op(Var v) const { return node(v).op; }

  /// Indices of the parents of `v`, in operand order.
  std::vector<std::uint32_t> parents(Var v) const {
    const Node& n = node(v);
    std::vector<std::uint32_t> out;
    out.reserve(n.count);
    for (std::uint32_t k = n.begin; k < n.begin + n.count; ++k) out.push_back(edges_[k].parent);
    return out;
  }

  /// Runs the reverse sweep from `root`, leaving d(root)/d(node) in every adjoint.
  /// A second call without reset() is rejected because adjoints would double count.
  void backward(Var root) {
    if (!contains(root)) throw UsageError("backward: root is not a node of this tape");
    if (swept_) throw UsageError("backward: tape already swept; reset() before reuse");
    swept_ = true;
    Node* nodes = nodes_.data();
    const Edge* edges = edges_.data();
    nodes[root.index_].adjoint = 1.0;
    for (std::size_t i = root.index_ + 1; i-- > 0;) {
      const Node& n = nodes[i];
      const double a = n.adjoint;
      if (a == 0.0) continue;
      const Edge* e = edges + n.begin;
      const Edge* end = e + n.count;
      for (; e != end; ++e) nodes[e->parent].adjoint += a * e->partial;
    }
  }

  bool swept() const noexcept { return swept_; }

  /// Drops every node. Storage is kept so a tape can be recycled per bag.
  void reset() noexcept {
    nodes_.clear();
    edge_count_ = 0;
    swept_ = false;
    branch_signature_ = kSignatureSeed;
  }

  /// Hash over every piecewise decision taken so far (relu side, clamp region, argmax).
  /// Two evaluations with equal signatures lie on the same smooth piece.
  std::uint64_t branch_signature() const noexcept { return branch_signature_; }

  void note_branch(std::uint64_t decision) noexcept {
    branch_signature_ ^= decision + 0x9e3779b97f4a7c15ULL + (branch_signature_ << 6) + (branch_signature_ >> 2);
  }

  /// Appends a node. `parents` and `partials` have equal length; partials[k] is
  /// d(value)/d(parents[k]) evaluated at the current point.
  Var push(Op op, double value, std::span<const Var> parents, std::span<const double> partials) {
    if (parents.size() != partials.size()) throw UsageError("push: parents/partials length mismatch");
    for (Var p : parents) check_owned(p);
    Edge* e = open_node(op, parents.size());
    for (std::size_t k = 0; k < parents.size(); ++k) e[k] = {parents[k].index_, partials[k]};
    nodes_.back().value = value;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  /// Single-parent node.
  Var push_unary(Op op, double value, Var parent, double partial) {
    check_owned(parent);
    Edge* e = open_node(op, 1);
    *e = {parent.index_, partial};
    nodes_.back().value = value;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  /// Fused bias + sum_i weights[i] * inputs[i].
  /// Operand spans are validated at their ends only; this is the hot loop of every forward pass.
  Var push_affine(std::span<const Var> weights, std::span<const Var> inputs, Var bias) {
    const std::size_t n = weights.size();
    check_owned(bias);
    if (n > 0) {
      check_owned(weights.front());
      check_owned(weights.back());
      check_owned(inputs.front());
      check_owned(inputs.back());
    }
    Edge* e = open_node(Op::affine, 2 * n + 1);
    const Node* nodes = nodes_.data();
    double acc = nodes[bias.index_].value;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t wi = weights[i].index_, xi = inputs[i].index_;
      const double wv = nodes[wi].value, xv = nodes[xi].value;
      e[2 * i] = {wi, xv};
      e[2 * i + 1] = {xi, wv};
      acc += wv * xv;
    }
    e[2 * n] = {bias.index_, 1.0};
    nodes_.back().value = acc;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  /// bias + sum_i weights[i] * inputs[i] where the inputs are constants. Only
  /// the weights and the bias become parents.
  Var push_affine(std::span<const Var> weights, std::span<const double> inputs, Var bias) {
    const std::size_t n = weights.size();
    check_owned(bias);
    if (n > 0) {
      check_owned(weights.front());
      check_owned(weights.back());
    }
    Edge* e = open_node(Op::affine, n + 1);
    const Node* nodes = nodes_.data();
    double acc = nodes[bias.index_].value;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t wi = weights[i].index_;
      e[i] = {wi, inputs[i]};
      acc += nodes[wi].value * inputs[i];
    }
    e[n] = {bias.index_, 1.0};
    nodes_.back().value = acc;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  /// Sum of operands with unit partials.
  Var push_sum(std::span<const Var> xs) {
    for (Var x : xs) check_owned(x);
    Edge* e = open_node(Op::sum, xs.size());
    const Node* nodes = nodes_.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      e[i] = {xs[i].index_, 1.0};
      acc += nodes[xs[i].index_].value;
    }
    nodes_.back().value = acc;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  void check_owned(Var v) const {
    if (v.tape_ != this || v.index_ >= nodes_.size()) throw UsageError("operand does not belong to this tape");
  }

 private:
  static constexpr std::uint64_t kSignatureSeed = 0xcbf29ce484222325ULL;

  struct Node {
    double value = 0.0;
    double adjoint = 0.0;
    std::uint32_t begin = 0;
    std::uint32_t count = 0;
    Op op = Op::leaf;
  };

  struct Edge {
    std::uint32_t parent;
    double partial;
  };

  /// Appends a node with `count` uninitialized edge slots and returns them.
  Edge* open_node(Op op, std::size_t count) {
    if (swept_) throw UsageError("cannot extend a tape after backward; reset() first");
    if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max() ||
        edge_count_ + count >= std::numeric_limits<std::uint32_t>::max())
      throw UsageError("tape exceeds node limit");
    if (edge_count_ + count > edges_.size()) edges_.resize(std::max(edges_.size() * 2, edge_count_ + count));
    Node n;
    n.begin = static_cast<std::uint32_t>(edge_count_);
    n.count = static_cast<std::uint32_t>(count);
    n.op = op;
    nodes_.push_back(n);
    Edge* e = edges_.data() + edge_count_;
    edge_count_ += count;
    return e;
  }

  const Node& node(Var v) const {
    if (!contains(v)) throw UsageError("node does not belong to this tape");
    return nodes_[v.index_];
  }

  std::vector<Node> nodes_;
  // Grows to the high-water mark; only the first edge_count_ entries are live.
  std::vector<Edge> edges_;
  std::size_t edge_count_ = 0;
  bool swept_ = false;
  std::uint64_t branch_signature_ = kSignatureSeed;
};

inline double Var::value() const {
  if (!tape_) throw UsageError("value() on an unbound Var");
  return tape_->value(*this);
}

inline double Var::adjoint() const {
  if (!tape_) throw UsageError("adjoint() on an unbound Var");
  return tape_->adjoint(*this);
}

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape()) throw UsageError("operation on an unbound Var");
  return *a.tape();
}

inline Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw UsageError("operands live on different tapes");
  return t;
}

inline Var unary(Op op, Var a, double value, double partial) {
  return tape_of(a).push_unary(op, value, a, partial);
}

inline Var binary(Op op, Var a, Var b, double value, double da, double db) {
  const Var parents[2] = {a, b};
  const double partials[2] = {da, db};
  return tape_of(a, b).push(op, value, parents, partials);
}

inline Var constant_like(Var a, double c) { return tape_of(a).variable(c); }

}  // namespace detail

inline Var operator+(Var a, Var b) { return detail::binary(Op::add, a, b, a.value() + b.value(), 1.0, 1.0); }
inline Var operator-(Var a, Var b) { return detail::binary(Op::sub, a, b, a.value() - b.value(), 1.0, -1.0); }
inline Var operator*(Var a, Var b) {
  const double av = a.value(), bv = b.value();
  return detail::binary(Op::mul, a, b, av * bv, bv, av);
}
inline Var operator/(Var a, Var b) {
  const double av = a.value(), bv = b.value();
  if (bv == 0.0) throw GraphError("div: denominator is zero");
  return detail::binary(Op::div, a, b, av / bv, 1.0 / bv, -av / (bv * bv));
}
inline Var operator-(Var a) { return detail::unary(Op::neg, a, -a.value(), -1.0); }

inline Var operator+(Var a, double c) { return a + detail::constant_like(a, c); }
inline Var operator+(double c, Var a) { return detail::constant_like(a, c) + a; }
inline Var operator-(Var a, double c) { return a - detail::constant_like(a, c); }
inline Var operator-(double c, Var a) { return detail::constant_like(a, c) - a; }
inline Var operator*(Var a, double c) { return a * detail::constant_like(a, c); }
inline Var operator*(double c, Var a) { return detail::constant_like(a, c) * a; }
inline Var operator/(Var a, double c) { return a / detail::constant_like(a, c); }
inline Var operator/(double c, Var a) { return detail::constant_like(a, c) / a; }

inline Var exp(Var a) {
  const double e = std::exp(a.value());
  return detail::unary(Op::exp, a, e, e);
}

inline Var log(Var a) {
  const double v = a.value();
  if (!(v > 0.0)) throw GraphError("log: argument " + std::to_string(v) + " is not positive");
  return detail::unary(Op::log, a, std::log(v), 1.0 / v);
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  const double s = sigmoid_value(a.value());
  return detail::unary(Op::sigmoid, a, s, s * (1.0 - s));
}

/// max(0, x); the derivative at exactly 0 is 0.
inline Var relu(Var a) {
  const double v = a.value();
  const bool on = v > 0.0;
  detail::tape_of(a).note_branch(on ? 1 : 2);
  return detail::unary(Op::relu, a, on ? v : 0.0, on ? 1.0 : 0.0);
}

/// Clamps into [lo, hi]. Outside the interval the derivative is 0.
inline Var clamp(Var a, double lo, double hi) {
  const double v = a.value();
  int region = 0;
  double out = v;
  if (v < lo) {
    region = 1;
    out = lo;
  } else if (v > hi) {
    region = 2;
    out = hi;
  }
  detail::tape_of(a).note_branch(static_cast<std::uint64_t>(16 + region));
  return detail::unary(Op::clamp, a, out, region == 0 ? 1.0 : 0.0);
}

/// log(max(x, kLogFloor)).
inline Var safe_log(Var a) { return log(clamp(a, kLogFloor, std::numeric_limits<double>::infinity())); }

inline Var sum(std::span<const Var> xs) {
  if (xs.empty()) throw UsageError("sum: empty operand list");
  return detail::tape_of(xs.front()).push_sum(xs);
}

/// bias + sum_i weights[i] * inputs[i] as one node.
inline Var affine(std::span<const Var> weights, std::span<const Var> inputs, Var bias) {
  if (weights.size() != inputs.size())
    throw UsageError("affine: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(inputs.size()) + " inputs");
  return detail::tape_of(bias).push_affine(weights, inputs, bias);
}

/// bias + sum_i weights[i] * inputs[i] with constant inputs.
inline Var affine(std::span<const Var> weights, std::span<const double> inputs, Var bias) {
  if (weights.size() != inputs.size())
    throw UsageError("affine: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(inputs.size()) + " inputs");
  return detail::tape_of(bias).push_affine(weights, inputs, bias);
}

/// Hard maximum. The whole adjoint goes to the first maximal operand.
inline Var max(std::span<const Var> xs) {
  if (xs.empty()) throw UsageError("max: empty operand list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i].value() > xs[best].value()) best = i;
  detail::tape_of(xs.front()).note_branch(static_cast<std::uint64_t>(best) << 8);
  return detail::unary(Op::max, xs[best], xs[best].value(), 1.0);
}

/// Node with caller-supplied value and local partials. Used for ops the
/// library does not ship, and to inject faulty rules in tests.
inline Var custom(std::span<const Var> inputs, double value, std::span<const double> partials) {
  if (inputs.empty()) throw UsageError("custom: no inputs");
  return detail::tape_of(inputs.front()).push(Op::custom, value, inputs, partials);
}

/// Softmax with the maximum logit subtracted before exponentiation.
inline std::vector<Var> softmax(std::span<const Var> logits) {
  if (logits.empty()) throw UsageError("softmax: empty logits");
  Tape& t = detail::tape_of(logits.front());
  double shift = logits.front().value();
  for (Var l : logits) shift = std::max(shift, l.value());
  // The shift cancels analytically, so it enters the graph as a constant.
  const Var c = t.variable(shift);
  std::vector<Var> e;
  e.reserve(logits.size());
  for (Var l : logits) e.push_back(exp(l - c));
  const Var z = sum(e);
  std::vector<Var> out;
  out.reserve(logits.size());
  for (Var v : e) out.push_back(v / z);
  return out;
}

inline std::vector<double> adjoints(std::span<const Var> leaves) {
  std::vector<double> out;
  out.reserve(leaves.size());
  for (Var v : leaves) out.push_back(v.adjoint());
  return out;
}

inline std::vector<double> values(std::span<const Var> xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (Var v : xs) out.push_back(v.value());
  return out;
}

}  // namespace lplp::ad
