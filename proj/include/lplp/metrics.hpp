#pragma once

// Instance-level accuracy, per-class IoU and mIoU over C+1 classes.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lplp/bagdata.hpp"
#include "lplp/error.hpp"
#include "lplp/nets.hpp"
#include "lplp/trainer.hpp"

namespace lplp {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t num_labels) : n_(num_labels), counts_(num_labels * num_labels, 0) {}

  void add(int truth, int predicted) {
    if (truth < 0 || predicted < 0 || static_cast<std::size_t>(truth) >= n_ || static_cast<std::size_t>(predicted) >= n_)
      throw UsageError("ConfusionMatrix: label out of range");
    ++counts_[static_cast<std::size_t>(truth) * n_ + static_cast<std::size_t>(predicted)];
  }

  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * n_ + predicted); }
  std::size_t num_labels() const noexcept { return n_; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < n_; ++i) t += at(i, i);
    return t;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_from_labels(std::span<const int> truths, std::span<const int> preds,
                                             std::size_t num_labels) {
  if (truths.size() != preds.size()) throw UsageError("confusion: truths and predictions differ in length");
  ConfusionMatrix cm(num_labels);
  for (std::size_t i = 0; i < truths.size(); ++i) cm.add(truths[i], preds[i]);
  return cm;
}

inline double accuracy(std::span<const int> preds, std::span<const int> truths) {
  if (preds.size() != truths.size())
    throw UsageError("accuracy: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(truths.size()) + " labels");
  if (preds.empty()) throw UsageError("accuracy: no labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == truths[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

struct IouResult {
  /// TP / (TP + FP + FN) per class; 0 for excluded classes.
  std::vector<double> per_class;
  /// False for classes absent from both truth and prediction.
  std::vector<bool> included;
  double miou = 0.0;
};

/// mIoU = unweighted mean of IoU over classes that occur in truth or prediction.
inline IouResult miou(const ConfusionMatrix& cm) {
  const std::size_t n = cm.num_labels();
  if (n == 0) throw UsageError("miou: empty confusion matrix");
  IouResult r;
  r.per_class.assign(n, 0.0);
  r.included.assign(n, false);
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == c) continue;
      fp += cm.at(k, c);
      fn += cm.at(c, k);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    r.included[c] = true;
    acc += r.per_class[c];
    ++used;
  }
  if (used == 0) throw UsageError("miou: undefined, every class is empty");
  r.miou = acc / static_cast<double>(used);
  return r;
}

struct EvalReport {
  double accuracy = 0.0;
  /// Positive-vs-negative instance accuracy (label > 0 against truth > 0).
  double binary_accuracy = 0.0;
  std::vector<double> per_class_iou;
  std::vector<bool> iou_included;
  double miou = 0.0;
  ConfusionMatrix confusion;
  std::string method;
  std::uint64_t seed = 0;
  std::string dataset_fingerprint;
};

/// Scores every instance of every bag with infer_instance.
inline EvalReport evaluate(const ModelTriple& model, std::span<const Bag> bags, double threshold) {
  std::vector<int> truths, preds;
  for (const Bag& bag : bags) {
    for (const Instance& x : bag.instances) {
      if (x.features.size() != model.feature_dim)
        throw ValidationError("evaluate: instance " + std::to_string(x.id) + " has " +
                              std::to_string(x.features.size()) + " features, model expects " +
                              std::to_string(model.feature_dim));
      truths.push_back(x.true_label);
      preds.push_back(infer_instance(model, x, threshold).label);
    }
  }
  if (truths.empty()) throw UsageError("evaluate: no instances");
  EvalReport r;
  r.confusion = confusion_from_labels(truths, preds, static_cast<std::size_t>(model.num_classes) + 1);
  r.accuracy = accuracy(preds, truths);
  std::size_t binary_hits = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) binary_hits += (truths[i] > 0) == (preds[i] > 0);
  r.binary_accuracy = static_cast<double>(binary_hits) / static_cast<double>(truths.size());
  IouResult iou = miou(r.confusion);
  r.per_class_iou = std::move(iou.per_class);
  r.iou_included = std::move(iou.included);
  r.miou = iou.miou;
  return r;
}

}  // namespace lplp
