#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "lplp/checkpoint.hpp"
#include "lplp/metrics.hpp"
#include "test_support.hpp"

using namespace lplp;
using lplp::testing::Gen;

TEST(Accuracy, Examples) {
  const std::vector<int> a = {0, 1, 2, 1};
  EXPECT_EQ(accuracy(a, a), 1.0);
  EXPECT_EQ(accuracy(std::vector<int>{0, 0, 1}, std::vector<int>{1, 2, 0}), 0.0);
  EXPECT_EQ(accuracy(std::vector<int>{0, 1, 1, 2}, std::vector<int>{0, 0, 1, 2}), 0.75);
  EXPECT_THROW(accuracy(std::vector<int>{0, 1}, std::vector<int>{0}), UsageError);
}

TEST(Miou, HandWorkedExample) {
  const auto cm = confusion_from_labels(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 1, 1, 1}, 2);
  const IouResult r = miou(cm);
  EXPECT_EQ(r.per_class[0], 1.0 / 2.0);
  EXPECT_EQ(r.per_class[1], 2.0 / 3.0);
  EXPECT_EQ(r.miou, (1.0 / 2.0 + 2.0 / 3.0) / 2.0);
  EXPECT_NEAR(r.miou, 7.0 / 12.0, 1e-15);
}

TEST(Miou, DiagonalAndExclusion) {
  const auto cm = confusion_from_labels(std::vector<int>{0, 2, 2}, std::vector<int>{0, 2, 2}, 3);
  const IouResult r = miou(cm);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_TRUE(r.included[0]);
  EXPECT_FALSE(r.included[1]);
  EXPECT_TRUE(r.included[2]);
  EXPECT_THROW(miou(ConfusionMatrix(3)), UsageError);
}

TEST(MetricsProperty, AccuracyIsTraceOverTotalAndMiouIsPermutationInvariant) {
  Gen g(61);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = 2 + g() % 4, n = 1 + g() % 60;
    std::vector<int> t(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = static_cast<int>(g() % k);
      p[i] = g() % 3 ? t[i] : static_cast<int>(g() % k);
    }
    const auto cm = confusion_from_labels(t, p, k);
    EXPECT_EQ(cm.total(), n);
    EXPECT_EQ(accuracy(p, t), static_cast<double>(cm.trace()) / static_cast<double>(cm.total()));

    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g);
    std::vector<int> t2(n), p2(n);
    for (std::size_t i = 0; i < n; ++i) {
      t2[i] = perm[static_cast<std::size_t>(t[i])];
      p2[i] = perm[static_cast<std::size_t>(p[i])];
    }
    EXPECT_NEAR(miou(confusion_from_labels(t2, p2, k)).miou, miou(cm).miou, 1e-12);
  }
}

namespace {

/// Model whose features spell out the label: x = (+-1, y) with positives at x_0 = +1
/// and class 1 vs 2 decided by the sign of x_1.
ModelTriple oracle_model() {
  ModelTriple m;
  m.num_classes = 2;
  m.feature_dim = 2;
  m.extractor = Mlp{MlpSpec{{2, 2}}, {1, 0, 0, 1, 0, 0}};
  m.score_head = Mlp{MlpSpec{{2, 1}}, {20, 0, 0}};
  m.class_head = Mlp{MlpSpec{{2, 2}}, {0, 20, 0, -20, 0, 0}};
  m.validate();
  return m;
}

std::vector<Bag> labelled_bags() {
  std::vector<Bag> bags(3);
  std::uint64_t id = 0;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    for (int label = 0; label <= 2; ++label)
      for (int k = 0; k < 4; ++k) {
        const double x0 = label == 0 ? -1.0 : 1.0;
        const double x1 = label == 2 ? -1.0 : 1.0;
        bags[b].instances.push_back({{x0, x1}, label, id++});
      }
  }
  return bags;
}

}  // namespace

TEST(Evaluate, OracleModelIsPerfect) {
  const EvalReport r = evaluate(oracle_model(), labelled_bags(), 0.5);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_EQ(r.binary_accuracy, 1.0);
  EXPECT_EQ(r.confusion.total(), 36u);
}

TEST(Evaluate, ConstantModelScoresLabelFrequency) {
  // Flat model that always predicts class 1 on balanced three-class data.
  ModelTriple m;
  m.num_classes = 2;
  m.feature_dim = 2;
  m.extractor = Mlp{MlpSpec{{2, 2}}, std::vector<double>(6, 0.0)};
  m.class_head = Mlp{MlpSpec{{2, 3}}, {0, 0, 0, 0, 0, 0, 5, 0, 0}};
  m.validate();
  const EvalReport r = evaluate(m, labelled_bags(), 0.5);
  EXPECT_NEAR(r.accuracy, 1.0 / 3.0, 1e-15);
}

TEST(Evaluate, DimensionMismatchIsAUsageError) {
  std::vector<Bag> bags = labelled_bags();
  bags[0].instances[0].features.push_back(0.0);
  EXPECT_THROW(evaluate(oracle_model(), bags, 0.5), ValidationError);
}

TEST(Evaluate, IsReadOnly) {
  const ModelTriple m = make_masked_model(2, 2, 4);
  Checkpoint ck{Method::ours, m, 5, 0.25, Aggregation::lse(4), 0.5};
  const std::string before = checkpoint_to_string(ck);
  evaluate(ck.model, labelled_bags(), ck.threshold);
  EXPECT_EQ(checkpoint_to_string(ck), before);
}

TEST(Checkpoint, RoundTrip) {
  for (const ModelTriple& m : {make_masked_model(3, 5, 1), make_flat_model(2, 4, 2)}) {
    Checkpoint ck{Method::ours, m, 17, 0.123456789, std::nullopt, 0.4};
    ModelTriple two_stage = make_masked_model(2, 4, 3);
    two_stage.class_extractor = make_mlp(extractor_spec(4, {}), 9);
    for (const Checkpoint& c : {ck, Checkpoint{Method::two_stage, two_stage, 3, 1.5, Aggregation::lse(2.5), 0.5}}) {
      const std::string text = checkpoint_to_string(c);
      const Checkpoint back = checkpoint_from_string(text);
      EXPECT_EQ(back, c);
      EXPECT_EQ(checkpoint_to_string(back), text);
    }
  }
}

TEST(Checkpoint, MalformedInputs) {
  const std::string text = checkpoint_to_string(Checkpoint{Method::ce, make_flat_model(2, 4, 2), 1, 0.5, std::nullopt, 0.5});
  EXPECT_THROW(checkpoint_from_string(text.substr(0, text.size() / 2)), ParseError);
  std::string bad_method = text;
  bad_method.replace(bad_method.find("method ce"), 9, "method xx");
  try {
    checkpoint_from_string(bad_method);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}
