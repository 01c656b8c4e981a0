#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lplp/llp.hpp"
#include "lplp/trainer.hpp"
#include "test_support.hpp"

using namespace lplp;
using lplp::testing::Gen;

namespace {

struct Estimate {
  std::vector<double> p_hat;
  bool degenerate;
};

Estimate masked_values(const std::vector<double>& s, const std::vector<std::vector<double>>& z) {
  ad::Tape t;
  const auto scores = t.variables(s);
  std::vector<std::vector<ad::Var>> probs;
  for (const auto& row : z) probs.push_back(t.variables(row));
  const auto est = masked_proportion(scores, probs);
  return {ad::values(est.p_hat), est.degenerate_mask};
}

double loss_values(const std::vector<double>& p, const std::vector<double>& p_hat) {
  ad::Tape t;
  return proportion_loss(p, t.variables(p_hat)).value();
}

const std::vector<std::vector<double>> kZ = {{0.6, 0.4}, {0.2, 0.8}};

}  // namespace

TEST(MaskedProportion, WorkedExamples) {
  const auto a = masked_values({1, 1}, kZ).p_hat;
  EXPECT_NEAR(a[0], 0.4, 1e-12);
  EXPECT_NEAR(a[1], 0.6, 1e-12);
  const auto b = masked_values({1, 0}, kZ).p_hat;
  EXPECT_NEAR(b[0], 0.6, 1e-12);
  EXPECT_NEAR(b[1], 0.4, 1e-12);
  const auto c = masked_values({0.75, 0.25}, kZ).p_hat;
  EXPECT_NEAR(c[0], 0.75 * 0.6 + 0.25 * 0.2, 1e-12);
  EXPECT_NEAR(c[1], 0.75 * 0.4 + 0.25 * 0.8, 1e-12);
  EXPECT_NEAR(c[0], 0.5, 1e-12);
}

TEST(MaskedProportion, AllZeroMaskIsFlaggedAndFinite) {
  const auto e = masked_values({0, 0}, kZ);
  EXPECT_TRUE(e.degenerate);
  for (double v : e.p_hat) EXPECT_TRUE(std::isfinite(v));
  EXPECT_FALSE(masked_values({0.5, 0.5}, kZ).degenerate);
}

TEST(MaskedProportion, LengthMismatchIsAUsageError) {
  ad::Tape t;
  const auto scores = t.variables(std::vector<double>{1.0});
  std::vector<std::vector<ad::Var>> probs = {t.variables(kZ[0]), t.variables(kZ[1])};
  EXPECT_THROW(masked_proportion(scores, probs), UsageError);
}

TEST(MaskedProportionProperty, OnSimplexScaleAndPermutationInvariant) {
  Gen g(101);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + g() % 32, c = 2 + g() % 4;
    const auto s = lplp::testing::uniform_vector(g, n, 0.01, 1.0);
    std::vector<std::vector<double>> z;
    for (std::size_t j = 0; j < n; ++j) z.push_back(lplp::testing::simplex_point(g, c));
    const auto base = masked_values(s, z).p_hat;
    EXPECT_NEAR(std::accumulate(base.begin(), base.end(), 0.0), 1.0, 1e-9);
    for (double v : base) EXPECT_GE(v, 0.0);
    for (double lambda : {1.0, 0.5, 0.01}) {
      auto scaled = s;
      for (double& v : scaled) v *= lambda;
      const auto p = masked_values(scaled, z).p_hat;
      for (std::size_t k = 0; k < c; ++k) EXPECT_NEAR(p[k], base[k], 1e-9);
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g);
    std::vector<double> s2;
    std::vector<std::vector<double>> z2;
    for (std::size_t j : perm) {
      s2.push_back(s[j]);
      z2.push_back(z[j]);
    }
    const auto p = masked_values(s2, z2).p_hat;
    for (std::size_t k = 0; k < c; ++k) EXPECT_NEAR(p[k], base[k], 1e-12);
  }
}

TEST(ProportionLoss, Examples) {
  EXPECT_EQ(loss_values({1, 0}, {1, 0}), 0.0);
  EXPECT_NEAR(loss_values({0.8, 0.2}, {0.8, 0.2}), -(0.8 * std::log(0.8) + 0.2 * std::log(0.2)), 1e-15);
  EXPECT_NEAR(loss_values({0.8, 0.2}, {0.8, 0.2}), 0.500402, 1e-6);
  EXPECT_NEAR(loss_values({0.8, 0.2}, {0.2, 0.8}), -(0.8 * std::log(0.2) + 0.2 * std::log(0.8)), 1e-15);
  EXPECT_NEAR(loss_values({0.8, 0.2}, {0.2, 0.8}), 1.332179, 1e-6);
  // A zero estimate is floored, not fatal.
  EXPECT_NEAR(loss_values({1, 0}, {0, 1}), -std::log(1e-12), 1e-9);
}

TEST(ProportionLossProperty, GibbsInequality) {
  Gen g(55);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 2 + g() % 6;
    const auto p = lplp::testing::simplex_point(g, c);
    const auto q = lplp::testing::simplex_point(g, c);
    const double h = lplp::testing::entropy(p);
    EXPECT_GE(loss_values(p, q), h - 1e-9);
    EXPECT_NEAR(loss_values(p, p), h, 1e-9);
  }
}

TEST(Ppl, Examples) {
  ad::Tape t;
  Bag neg;
  neg.bag_label = 0;
  neg.instances.resize(2);
  std::vector<std::vector<ad::Var>> one_hot = {t.variables(std::vector<double>{0, 0, 1}),
                                               t.variables(std::vector<double>{0, 0, 1})};
  EXPECT_NEAR(ppl_loss(neg, one_hot).value(), 0.0, 1e-15);

  Bag pos;
  pos.bag_label = 1;
  pos.instances.resize(1);
  pos.partial_proportions = std::vector<double>{1.0, 0.0};
  std::vector<std::vector<ad::Var>> avg1 = {t.variables(std::vector<double>{0.3, 0.0, 0.7})};
  EXPECT_NEAR(ppl_loss(pos, avg1).value(), 0.0, 1e-15);

  pos.partial_proportions = std::vector<double>{0.5, 0.5};
  std::vector<std::vector<ad::Var>> avg2 = {t.variables(std::vector<double>{0.2, 0.2, 0.6})};
  EXPECT_NEAR(ppl_loss(pos, avg2).value(), std::log(2.0), 1e-15);
  // Without renormalization the positive block (0.2, 0.2) is used directly.
  EXPECT_NEAR(ppl_loss(pos, avg2, PplMode::ignore).value(), -std::log(0.2), 1e-15);
}

TEST(LlpGradientFlow, ProportionLossReachesAllThreeNetworks) {
  Gen g(3);
  const ModelTriple m = make_masked_model(2, 4, 8);
  Bag bag;
  bag.bag_label = 1;
  bag.partial_proportions = std::vector<double>{0.7, 0.3};
  for (std::size_t j = 0; j < 8; ++j) bag.instances.push_back({lplp::testing::uniform_vector(g, 4, -2, 2), 1, j});
  ad::Tape t;
  const BoundModel b = bind(m, t);
  const MilForward mil = mil_bag_forward(b, bag, Aggregation::mean(), t);
  std::vector<std::vector<ad::Var>> probs;
  for (const auto& f : mil.features) probs.push_back(instance_class_probs(b.class_head, f));
  const ad::Var loss = proportion_loss(*bag.partial_proportions, masked_proportion(mil.scores, probs));
  t.backward(loss);
  auto norm = [](const BoundMlp& net) {
    double n = 0.0;
    for (const auto& v : net.leaves) n += v.adjoint() * v.adjoint();
    return n;
  };
  EXPECT_GT(norm(b.extractor), 0.0);
  EXPECT_GT(norm(*b.score_head), 0.0);
  EXPECT_GT(norm(b.class_head), 0.0);
}
