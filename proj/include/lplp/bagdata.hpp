#pragma once

// Instances, bags with partial label proportions, and the synthetic bag generator.
//
// Label convention: 0 is the negative class, 1..C are the positive classes.
// A positive bag stores proportions over the C positive classes only; the
// share of negatives inside it is never part of the supervision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lplp/error.hpp"

namespace lplp {

using Rng = std::mt19937_64;

/// splitmix64 finalizer over (base, stream); gives independent sub-seeds.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct Instance {
  std::vector<double> features;
  /// Ground truth in {0..C}. Only evaluation and the oracle methods may read it.
  int true_label = 0;
  std::uint64_t id = 0;

  bool operator==(const Instance&) const = default;
};

struct Bag {
  std::uint64_t id = 0;
  std::vector<Instance> instances;
  int bag_label = 0;
  std::optional<std::vector<double>> partial_proportions;

  bool positive() const noexcept { return bag_label == 1; }
  std::size_t size() const noexcept { return instances.size(); }

  /// Share of ground-truth negatives. Oracle-only quantity.
  double realized_negative_fraction() const {
    if (instances.empty()) return 0.0;
    const auto n = std::count_if(instances.begin(), instances.end(),
                                 [](const Instance& x) { return x.true_label == 0; });
    return static_cast<double>(n) / static_cast<double>(instances.size());
  }

  bool operator==(const Bag&) const = default;
};

enum class SplitTag { train, validation, test };

inline const char* split_name(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::validation: return "validation";
    case SplitTag::test: return "test";
  }
  return "?";
}

struct DatasetSplit {
  std::vector<Bag> train;
  std::vector<Bag> validation;
  std::vector<Bag> test;
  int num_positive_classes = 0;
  std::size_t feature_dim = 0;
  std::uint64_t seed = 0;

  const std::vector<Bag>& bags(SplitTag tag) const {
    switch (tag) {
      case SplitTag::train: return train;
      case SplitTag::validation: return validation;
      case SplitTag::test: return test;
    }
    return train;
  }
  std::vector<Bag>& bags(SplitTag tag) { return const_cast<std::vector<Bag>&>(std::as_const(*this).bags(tag)); }

  bool operator==(const DatasetSplit&) const = default;
};

inline constexpr double kSimplexTolerance = 1e-9;

inline void validate_bag(const Bag& bag, int num_classes, std::size_t dim) {
  const std::string where = "bag " + std::to_string(bag.id);
  if (bag.instances.empty()) throw ValidationError(where + ": empty bag");
  if (bag.bag_label != 0 && bag.bag_label != 1) throw ValidationError(where + ": bag label must be 0 or 1");
  for (const Instance& x : bag.instances) {
    if (x.features.size() != dim)
      throw ValidationError(where + ": instance " + std::to_string(x.id) + " has " +
                            std::to_string(x.features.size()) + " features, expected " + std::to_string(dim));
    if (x.true_label < 0 || x.true_label > num_classes)
      throw ValidationError(where + ": instance " + std::to_string(x.id) + " label out of range");
    if (bag.bag_label == 0 && x.true_label != 0)
      throw ValidationError(where + ": negative bag holds a positive instance " + std::to_string(x.id));
  }
  if (bag.bag_label == 0) {
    if (bag.partial_proportions) throw ValidationError(where + ": negative bag carries proportions");
    return;
  }
  if (!bag.partial_proportions) throw ValidationError(where + ": positive bag without proportions");
  const auto& p = *bag.partial_proportions;
  if (p.size() != static_cast<std::size_t>(num_classes))
    throw ValidationError(where + ": proportion vector has " + std::to_string(p.size()) + " entries, expected " +
                          std::to_string(num_classes));
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(where + ": negative or non-finite proportion");
    total += v;
  }
  if (std::abs(total - 1.0) > kSimplexTolerance)
    throw ValidationError(where + ": proportions sum to " + std::to_string(total));
}

inline void validate_dataset(const DatasetSplit& data) {
  if (data.num_positive_classes < 1) throw ValidationError("dataset: C must be positive");
  if (data.feature_dim < 1) throw ValidationError("dataset: feature dimension must be positive");
  std::unordered_set<std::uint64_t> bag_ids, instance_ids;
  for (SplitTag tag : {SplitTag::train, SplitTag::validation, SplitTag::test}) {
    for (const Bag& bag : data.bags(tag)) {
      validate_bag(bag, data.num_positive_classes, data.feature_dim);
      if (!bag_ids.insert(bag.id).second) throw ValidationError("duplicate bag id " + std::to_string(bag.id));
      for (const Instance& x : bag.instances)
        if (!instance_ids.insert(x.id).second)
          throw ValidationError("instance id " + std::to_string(x.id) + " appears twice");
    }
  }
}

/// Uniform draw from the simplex over `num_classes` entries (Dirichlet with all concentrations 1).
inline std::vector<double> sample_partial_proportions(int num_classes, Rng& rng) {
  if (num_classes < 2) throw ConfigError("sample_partial_proportions: need at least 2 positive classes");
  std::gamma_distribution<double> gamma(1.0, 1.0);
  std::vector<double> p(static_cast<std::size_t>(num_classes));
  double total = 0.0;
  for (double& v : p) {
    v = gamma(rng);
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

inline std::vector<double> sample_partial_proportions(int num_classes, std::uint64_t seed) {
  Rng rng(seed);
  return sample_partial_proportions(num_classes, rng);
}

/// Hamilton apportionment: floors of total*p, leftover units to the largest
/// fractional parts (lowest index first on ties).
inline std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> remainder(n);
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const double quota = proportions[c] * static_cast<double>(total);
    const double whole = std::floor(quota);
    counts[c] = static_cast<std::size_t>(whole);
    remainder[c] = quota - whole;
    assigned += counts[c];
  }
  // Floors can overshoot by one when the proportions sum slightly above 1.
  while (assigned > total) {
    const auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < total; k = (k + 1) % n) {
    ++counts[order[k]];
    ++assigned;
  }
  return counts;
}

/// Finite per-class reservoirs that bags are drawn from without replacement.
class InstancePool {
 public:
  explicit InstancePool(int num_positive_classes) : classes_(static_cast<std::size_t>(num_positive_classes) + 1) {}

  void add(Instance x) {
    if (x.true_label < 0 || static_cast<std::size_t>(x.true_label) >= classes_.size())
      throw UsageError("InstancePool: label out of range");
    classes_[static_cast<std::size_t>(x.true_label)].push_back(std::move(x));
  }

  int num_positive_classes() const noexcept { return static_cast<int>(classes_.size()) - 1; }
  std::size_t available(int label) const { return classes_.at(static_cast<std::size_t>(label)).size(); }

  /// Removes a uniformly chosen instance of class `label`.
  Instance take(int label, Rng& rng) {
    auto& v = classes_.at(static_cast<std::size_t>(label));
    if (v.empty()) throw GenerationError("instance pool for class " + std::to_string(label) + " is exhausted");
    std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
    const std::size_t i = pick(rng);
    std::swap(v[i], v.back());
    Instance x = std::move(v.back());
    v.pop_back();
    return x;
  }

 private:
  std::vector<std::vector<Instance>> classes_;
};

namespace detail {

inline void require_available(const InstancePool& pool, int label, std::size_t count) {
  if (pool.available(label) < count)
    throw GenerationError("instance pool for class " + std::to_string(label) + " is exhausted: need " +
                          std::to_string(count) + ", have " + std::to_string(pool.available(label)));
}

}  // namespace detail

/// Positive bag. round(negative_fraction * size) negatives; the rest is split
/// over the positive classes by largest remainder. The stored proportions are
/// the realized class counts divided by the positive count.
inline Bag compose_bag(InstancePool& pool, std::size_t size, std::span<const double> proportions,
                       double negative_fraction, std::uint64_t seed, std::uint64_t bag_id = 0) {
  const int num_classes = pool.num_positive_classes();
  if (size < 1) throw ConfigError("compose_bag: size must be at least 1");
  if (proportions.size() != static_cast<std::size_t>(num_classes))
    throw ConfigError("compose_bag: proportion vector does not match the pool's class count");
  if (!(negative_fraction >= 0.0 && negative_fraction < 1.0))
    throw ConfigError("compose_bag: negative_fraction must lie in [0, 1)");
  const auto negatives = static_cast<std::size_t>(std::round(negative_fraction * static_cast<double>(size)));
  if (negatives >= size) throw GenerationError("compose_bag: no positive slots left after rounding negatives");
  const std::size_t positives = size - negatives;
  const std::vector<std::size_t> counts = largest_remainder(proportions, positives);

  // Check every class before drawing so a failure leaves the pool untouched.
  detail::require_available(pool, 0, negatives);
  for (int c = 1; c <= num_classes; ++c) detail::require_available(pool, c, counts[static_cast<std::size_t>(c - 1)]);

  Rng rng(seed);
  Bag bag;
  bag.id = bag_id;
  bag.bag_label = 1;
  bag.instances.reserve(size);
  for (std::size_t k = 0; k < negatives; ++k) bag.instances.push_back(pool.take(0, rng));
  for (int c = 1; c <= num_classes; ++c)
    for (std::size_t k = 0; k < counts[static_cast<std::size_t>(c - 1)]; ++k) bag.instances.push_back(pool.take(c, rng));
  std::shuffle(bag.instances.begin(), bag.instances.end(), rng);

  std::vector<double> realized(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c)
    realized[c] = static_cast<double>(counts[c]) / static_cast<double>(positives);
  bag.partial_proportions = std::move(realized);
  return bag;
}

inline Bag compose_negative_bag(InstancePool& pool, std::size_t size, std::uint64_t seed, std::uint64_t bag_id = 0) {
  if (size < 1) throw ConfigError("compose_negative_bag: size must be at least 1");
  detail::require_available(pool, 0, size);
  Rng rng(seed);
  Bag bag;
  bag.id = bag_id;
  bag.bag_label = 0;
  bag.instances.reserve(size);
  for (std::size_t k = 0; k < size; ++k) bag.instances.push_back(pool.take(0, rng));
  return bag;
}

/// ((1 - p_neg) p_1, ..., (1 - p_neg) p_C, p_neg): the complete proportion
/// vector with the negative class last.
inline std::vector<double> full_proportion_from_partial(std::span<const double> p, double p_neg) {
  if (!(p_neg >= 0.0 && p_neg <= 1.0)) throw UsageError("full_proportion_from_partial: p_neg outside [0, 1]");
  std::vector<double> full;
  full.reserve(p.size() + 1);
  for (double v : p) full.push_back((1.0 - p_neg) * v);
  full.push_back(p_neg);
  return full;
}

struct SynthConfig {
  int num_positive_classes = 2;
  std::size_t feature_dim = 8;
  double class_separation = 6.0;
  std::size_t n_train_pos = 400;
  std::size_t n_train_neg = 400;
  std::size_t n_val_pos = 100;
  std::size_t n_val_neg = 100;
  std::size_t n_test_pos = 100;
  std::size_t n_test_neg = 10;
  std::size_t bag_size = 32;
  double min_negative_fraction = 0.2;
  double max_negative_fraction = 0.7;
  std::uint64_t seed = 0;
};

/// Mean of class `label`: a scaled basis vector, so every pair of class means
/// is `separation` apart.
inline std::vector<double> class_mean(int label, std::size_t dim, double separation) {
  std::vector<double> mean(dim, 0.0);
  mean.at(static_cast<std::size_t>(label)) = separation / std::sqrt(2.0);
  return mean;
}

/// Gaussian blobs (unit variance) around the vertices of a regular simplex,
/// bagged with compose_bag / compose_negative_bag.
inline DatasetSplit synth_gaussian_dataset(const SynthConfig& cfg) {
  if (cfg.num_positive_classes < 2) throw ConfigError("synth: need at least 2 positive classes");
  if (cfg.feature_dim < static_cast<std::size_t>(cfg.num_positive_classes) + 1)
    throw ConfigError("synth: feature dimension must be at least C + 1 to place the class means");
  if (!(cfg.class_separation >= 0.0)) throw ConfigError("synth: class separation must be non-negative");
  for (std::size_t n : {cfg.n_train_pos, cfg.n_train_neg, cfg.n_val_pos, cfg.n_val_neg, cfg.n_test_pos,
                        cfg.n_test_neg, cfg.bag_size})
    if (n < 1) throw ConfigError("synth: bag counts and bag size must be at least 1");
  if (!(cfg.min_negative_fraction >= 0.0 && cfg.min_negative_fraction <= cfg.max_negative_fraction &&
        cfg.max_negative_fraction < 1.0))
    throw ConfigError("synth: negative fraction range must satisfy 0 <= min <= max < 1");

  const int num_classes = cfg.num_positive_classes;
  DatasetSplit data;
  data.num_positive_classes = num_classes;
  data.feature_dim = cfg.feature_dim;
  data.seed = cfg.seed;

  std::vector<std::vector<double>> means;
  for (int c = 0; c <= num_classes; ++c) means.push_back(class_mean(c, cfg.feature_dim, cfg.class_separation));

  std::uint64_t next_instance_id = 0;
  std::uint64_t next_bag_id = 0;
  const struct {
    SplitTag tag;
    std::size_t pos, neg;
  } plan[] = {{SplitTag::train, cfg.n_train_pos, cfg.n_train_neg},
              {SplitTag::validation, cfg.n_val_pos, cfg.n_val_neg},
              {SplitTag::test, cfg.n_test_pos, cfg.n_test_neg}};

  for (const auto& part : plan) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(part.tag)));
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> neg_fraction(cfg.min_negative_fraction, cfg.max_negative_fraction);

    // Worst-case demand: every positive slot could go to one class.
    InstancePool pool(num_classes);
    const std::size_t negatives_needed = (part.neg + part.pos) * cfg.bag_size;
    const std::size_t per_class_needed = part.pos * cfg.bag_size;
    for (int c = 0; c <= num_classes; ++c) {
      const std::size_t n = c == 0 ? negatives_needed : per_class_needed;
      for (std::size_t k = 0; k < n; ++k) {
        Instance x;
        x.id = next_instance_id++;
        x.true_label = c;
        x.features.resize(cfg.feature_dim);
        for (std::size_t j = 0; j < cfg.feature_dim; ++j)
          x.features[j] = means[static_cast<std::size_t>(c)][j] + noise(rng);
        pool.add(std::move(x));
      }
    }

    auto& bags = data.bags(part.tag);
    for (std::size_t b = 0; b < part.pos; ++b) {
      const std::vector<double> p = sample_partial_proportions(num_classes, rng);
      const double frac = neg_fraction(rng);
      const std::uint64_t id = next_bag_id++;
      bags.push_back(compose_bag(pool, cfg.bag_size, p, frac, derive_seed(rng(), id), id));
    }
    for (std::size_t b = 0; b < part.neg; ++b) {
      const std::uint64_t id = next_bag_id++;
      bags.push_back(compose_negative_bag(pool, cfg.bag_size, derive_seed(rng(), id), id));
    }
  }
  return data;
}

}  // namespace lplp
