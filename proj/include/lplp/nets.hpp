#pragma once

// Small fully connected networks: the shared feature extractor f, the binary
// instance head g and the class head h.
//
// Parameters of one MLP live in a single flat vector. Layer l contributes its
// weight matrix (out x in, row-major) followed by its bias vector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lplp/autodiff.hpp"
#include "lplp/bagdata.hpp"
#include "lplp/error.hpp"

namespace lplp {

struct MlpSpec {
  /// Input width first, output width last. ReLU between layers, linear output.
  std::vector<std::size_t> widths;

  std::size_t input_dim() const { return widths.front(); }
  std::size_t output_dim() const { return widths.back(); }
  std::size_t num_layers() const { return widths.size() - 1; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l + 1] * (widths[l] + 1);
    return n;
  }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("MlpSpec needs an input width and at least one layer");
    for (std::size_t w : widths)
      if (w == 0) throw ConfigError("MlpSpec widths must be positive");
  }

  bool operator==(const MlpSpec&) const = default;
};

struct Mlp {
  MlpSpec spec;
  std::vector<double> params;

  bool operator==(const Mlp&) const = default;
};

/// He initialization: weights ~ N(0, 2 / fan_in), biases 0.
inline std::vector<double> init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::vector<double> params;
  params.reserve(spec.parameter_count());
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t fan_in = spec.widths[l];
    const std::size_t fan_out = spec.widths[l + 1];
    std::normal_distribution<double> weight(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (std::size_t k = 0; k < fan_in * fan_out; ++k) params.push_back(weight(rng));
    params.insert(params.end(), fan_out, 0.0);
  }
  return params;
}

inline Mlp make_mlp(MlpSpec spec, std::uint64_t seed) {
  Mlp net{std::move(spec), {}};
  net.params = init_params(net.spec, seed);
  return net;
}

/// Parameters of one MLP bound to leaves of a tape.
struct BoundMlp {
  const MlpSpec* spec = nullptr;
  std::vector<ad::Var> leaves;
};

inline BoundMlp bind(const Mlp& net, ad::Tape& tape) {
  if (net.params.size() != net.spec.parameter_count())
    throw UsageError("bind: parameter vector does not match its spec");
  return {&net.spec, tape.variables(net.params)};
}

/// Binds caller-owned leaves (e.g. grad_check coordinates) to a spec.
inline BoundMlp bind(const MlpSpec& spec, std::span<const ad::Var> leaves) {
  if (leaves.size() != spec.parameter_count()) throw UsageError("bind: leaf count does not match spec");
  return {&spec, std::vector<ad::Var>(leaves.begin(), leaves.end())};
}

namespace detail {

/// Layers of `net` from the first one on. `first` computes the pre-activation
/// of output unit `o` of layer 0.
template <class FirstLayer>
std::vector<ad::Var> forward_layers(const BoundMlp& net, FirstLayer&& first) {
  const MlpSpec& spec = *net.spec;
  std::vector<ad::Var> act, next;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.widths[l];
    const std::size_t out = spec.widths[l + 1];
    const std::span<const ad::Var> weights(net.leaves.data() + offset, in * out);
    const std::span<const ad::Var> biases(net.leaves.data() + offset + in * out, out);
    const bool last = l + 1 == spec.num_layers();
    next.clear();
    next.reserve(out);
    for (std::size_t o = 0; o < out; ++o) {
      const ad::Var z = l == 0 ? first(weights.subspan(o * in, in), biases[o])
                               : ad::affine(weights.subspan(o * in, in), act, biases[o]);
      next.push_back(last ? z : ad::relu(z));
    }
    act.swap(next);
    offset += out * (in + 1);
  }
  return act;
}

inline void check_input(const MlpSpec& spec, std::size_t n) {
  if (n != spec.input_dim())
    throw UsageError("forward: input has " + std::to_string(n) + " entries, network expects " +
                     std::to_string(spec.input_dim()));
}

}  // namespace detail

inline std::vector<ad::Var> forward(const BoundMlp& net, std::span<const ad::Var> input) {
  detail::check_input(*net.spec, input.size());
  return detail::forward_layers(net, [&](std::span<const ad::Var> w, ad::Var b) { return ad::affine(w, input, b); });
}

/// Forward pass whose input is data rather than graph nodes.
inline std::vector<ad::Var> forward(const BoundMlp& net, std::span<const double> input) {
  detail::check_input(*net.spec, input.size());
  return detail::forward_layers(net, [&](std::span<const ad::Var> w, ad::Var b) { return ad::affine(w, input, b); });
}

/// Same network evaluated on plain doubles, for inference.
inline std::vector<double> forward(const Mlp& net, std::span<const double> input) {
  const MlpSpec& spec = net.spec;
  if (input.size() != spec.input_dim())
    throw UsageError("forward: input has " + std::to_string(input.size()) + " entries, network expects " +
                     std::to_string(spec.input_dim()));
  std::vector<double> act(input.begin(), input.end());
  std::vector<double> next;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.widths[l];
    const std::size_t out = spec.widths[l + 1];
    const bool last = l + 1 == spec.num_layers();
    next.assign(out, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double* w = net.params.data() + offset + o * in;
      double z = net.params[offset + in * out + o];
      for (std::size_t i = 0; i < in; ++i) z += w[i] * act[i];
      next[o] = last ? z : (z > 0.0 ? z : 0.0);
    }
    act.swap(next);
    offset += out * (in + 1);
  }
  return act;
}

/// f(x) on the tape. Feature values are constants of the first layer.
inline std::vector<ad::Var> forward_feature(const BoundMlp& extractor, const Instance& x, ad::Tape& /*tape*/) {
  if (x.features.size() != extractor.spec->input_dim())
    throw UsageError("forward_feature: instance " + std::to_string(x.id) + " has " +
                     std::to_string(x.features.size()) + " features, extractor expects " +
                     std::to_string(extractor.spec->input_dim()));
  return forward(extractor, std::span<const double>(x.features));
}

/// s = sigmoid(g(feature)), strictly inside (0, 1) for finite logits.
inline ad::Var instance_score(const BoundMlp& score_head, std::span<const ad::Var> feature) {
  if (score_head.spec->output_dim() != 1) throw UsageError("instance_score: head must have one output");
  return ad::sigmoid(forward(score_head, feature).front());
}

/// softmax(h(feature)).
inline std::vector<ad::Var> instance_class_probs(const BoundMlp& class_head, std::span<const ad::Var> feature) {
  return ad::softmax(forward(class_head, feature));
}

inline std::vector<double> softmax_values(std::span<const double> logits) {
  double shift = logits.front();
  for (double v : logits) shift = std::max(shift, v);
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += out[i] = std::exp(logits[i] - shift);
  for (double& v : out) v /= total;
  return out;
}

/// Network set of one trained method.
///
/// Masked models (ours, two-stage) carry the score head g and a C-way class
/// head h. Flat models (ce, pl, ppl) carry no score head and a (C+1)-way class
/// head whose last output is the negative class. Two-stage models keep a
/// separate extractor f' in front of h.
struct ModelTriple {
  int num_classes = 0;
  std::size_t feature_dim = 0;
  Mlp extractor;
  std::optional<Mlp> score_head;
  Mlp class_head;
  std::optional<Mlp> class_extractor;

  bool masked() const noexcept { return score_head.has_value(); }

  const Mlp& class_feature_net() const { return class_extractor ? *class_extractor : extractor; }

  void validate() const {
    extractor.spec.validate();
    class_head.spec.validate();
    if (extractor.spec.input_dim() != feature_dim) throw ConfigError("extractor input width must equal d");
    const std::size_t expected_classes = static_cast<std::size_t>(num_classes) + (masked() ? 0 : 1);
    if (class_head.spec.output_dim() != expected_classes)
      throw ConfigError("class head has " + std::to_string(class_head.spec.output_dim()) + " outputs, expected " +
                        std::to_string(expected_classes));
    if (class_head.spec.input_dim() != class_feature_net().spec.output_dim())
      throw ConfigError("class head input must equal its extractor's output width");
    if (class_extractor && class_extractor->spec.input_dim() != feature_dim)
      throw ConfigError("class extractor input width must equal d");
    if (score_head) {
      score_head->spec.validate();
      if (score_head->spec.output_dim() != 1) throw ConfigError("score head must have one output");
      if (score_head->spec.input_dim() != extractor.spec.output_dim())
        throw ConfigError("score head input must equal the extractor output width");
    }
    for (const Mlp* m : {&extractor, &class_head})
      if (m->params.size() != m->spec.parameter_count()) throw ConfigError("parameter count mismatch");
    for (const auto* m : {&score_head, &class_extractor})
      if (*m && (*m)->params.size() != (*m)->spec.parameter_count()) throw ConfigError("parameter count mismatch");
  }

  bool operator==(const ModelTriple&) const = default;
};

struct Architecture {
  std::vector<std::size_t> extractor_hidden = {32, 16};
};

inline MlpSpec extractor_spec(std::size_t dim, const Architecture& arch) {
  MlpSpec s;
  s.widths.push_back(dim);
  s.widths.insert(s.widths.end(), arch.extractor_hidden.begin(), arch.extractor_hidden.end());
  return s;
}

/// f = [d, 32, 16], g = [16, 1], h = [16, C] by default.
inline ModelTriple make_masked_model(int num_classes, std::size_t dim, std::uint64_t seed,
                                     const Architecture& arch = {}) {
  ModelTriple m;
  m.num_classes = num_classes;
  m.feature_dim = dim;
  m.extractor = make_mlp(extractor_spec(dim, arch), derive_seed(seed, 1));
  const std::size_t width = m.extractor.spec.output_dim();
  m.score_head = make_mlp(MlpSpec{{width, 1}}, derive_seed(seed, 2));
  m.class_head = make_mlp(MlpSpec{{width, static_cast<std::size_t>(num_classes)}}, derive_seed(seed, 3));
  m.validate();
  return m;
}

/// f plus a (C+1)-way head; the negative class is the last output.
inline ModelTriple make_flat_model(int num_classes, std::size_t dim, std::uint64_t seed,
                                   const Architecture& arch = {}) {
  ModelTriple m;
  m.num_classes = num_classes;
  m.feature_dim = dim;
  m.extractor = make_mlp(extractor_spec(dim, arch), derive_seed(seed, 1));
  const std::size_t width = m.extractor.spec.output_dim();
  m.class_head = make_mlp(MlpSpec{{width, static_cast<std::size_t>(num_classes) + 1}}, derive_seed(seed, 4));
  m.validate();
  return m;
}

/// A model's networks bound to one tape.
struct BoundModel {
  BoundMlp extractor;
  std::optional<BoundMlp> score_head;
  BoundMlp class_head;
  std::optional<BoundMlp> class_extractor;
};

inline BoundModel bind(const ModelTriple& model, ad::Tape& tape) {
  BoundModel b;
  b.extractor = bind(model.extractor, tape);
  if (model.score_head) b.score_head = bind(*model.score_head, tape);
  b.class_head = bind(model.class_head, tape);
  if (model.class_extractor) b.class_extractor = bind(*model.class_extractor, tape);
  return b;
}

/// Plain-double score s = sigmoid(g(f(x))).
inline double score_value(const ModelTriple& model, std::span<const double> x) {
  if (!model.score_head) throw UsageError("score_value: model has no score head");
  return ad::sigmoid_value(forward(*model.score_head, forward(model.extractor, x)).front());
}

/// Plain-double class distribution from the class path (C or C+1 entries).
inline std::vector<double> class_probs_value(const ModelTriple& model, std::span<const double> x) {
  return softmax_values(forward(model.class_head, forward(model.class_feature_net(), x)));
}

}  // namespace lplp
