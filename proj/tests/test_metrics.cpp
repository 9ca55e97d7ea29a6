#include <gtest/gtest.h>

#include "metric_oracles.hpp"
#include "support.hpp"

namespace mmf {
namespace {

using V = std::vector<double>;

struct Case {
  V scores, labels;
};

// Random case with both classes; half the cases quantize scores to force ties.
Case random_case(Rng& rng, std::size_t max_n = 100) {
  Case c;
  const std::size_t n = 2 + rng.uniform_int(max_n - 1);
  const bool ties = rng.bernoulli(0.5);
  const double prevalence = rng.uniform(0.05, 0.95);
  for (std::size_t i = 0; i < n; ++i) {
    double s = rng.uniform();
    if (ties) s = std::round(s * 10.0) / 10.0;
    c.scores.push_back(s);
    c.labels.push_back(rng.bernoulli(prevalence) ? 1.0 : 0.0);
  }
  c.labels[0] = 1.0;
  c.labels[1] = 0.0;
  return c;
}

TEST(AurocTest, Examples) {
  EXPECT_EQ(metrics::auroc(V{0.9, 0.8, 0.2, 0.1}, V{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(metrics::auroc(V{0.4, 0.4, 0.4}, V{1, 0, 1}), 0.5);
  EXPECT_EQ(metrics::auroc(V{0.9, 0.8, 0.3, 0.2}, V{1, 0, 1, 0}), 0.75);
}

TEST(AurocTest, Errors) {
  EXPECT_THROW(metrics::auroc(V{0.1, 0.2}, V{1, 1}), UndefinedMetricError);
  EXPECT_THROW(metrics::auroc(V{0.1, 0.2}, V{1}), DimensionError);
  EXPECT_THROW(metrics::auroc(V{0.1, 0.2}, V{1, 0.5}), DataError);
}

TEST(AurocTest, MatchesAllPairsOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const Case c = random_case(rng);
    EXPECT_EQ(metrics::auroc(c.scores, c.labels), testing::auroc_all_pairs(c.scores, c.labels)) << trial;
  }
}

TEST(AurocTest, InvariantToIncreasingTransforms) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Case c = random_case(rng);
    V transformed;
    for (double s : c.scores) transformed.push_back(std::exp(3.0 * s) - 7.0);
    EXPECT_EQ(metrics::auroc(c.scores, c.labels), metrics::auroc(transformed, c.labels));
  }
}

TEST(AurocTest, NegatedScoresComplement) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Case c = random_case(rng);
    for (double& s : c.scores) s = rng.uniform();  // continuous, so tie-free
    V neg;
    for (double s : c.scores) neg.push_back(-s);
    EXPECT_NEAR(metrics::auroc(c.scores, c.labels) + metrics::auroc(neg, c.labels), 1.0, 1e-12);
  }
}

TEST(AuprcTest, Examples) {
  EXPECT_EQ(metrics::auprc(V{0.9, 0.8, 0.2, 0.1}, V{1, 1, 0, 0}), 1.0);
  for (std::size_t n : {2u, 5u, 20u}) {
    V s, y(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) s.push_back(1.0 - static_cast<double>(i) / n);
    y[n - 1] = 1.0;
    EXPECT_DOUBLE_EQ(metrics::auprc(s, y), 1.0 / static_cast<double>(n));
  }
  EXPECT_THROW(metrics::auprc(V{0.1, 0.2}, V{0, 0}), UndefinedMetricError);
}

TEST(AuprcTest, MatchesThresholdSweepOracle) {
  Rng rng(4);
  const Case twenty = random_case(rng, 20);
  EXPECT_EQ(metrics::auprc(twenty.scores, twenty.labels), testing::auprc_threshold_sweep(twenty.scores, twenty.labels));
  for (int trial = 0; trial < 100; ++trial) {
    const Case c = random_case(rng);
    EXPECT_EQ(metrics::auprc(c.scores, c.labels), testing::auprc_threshold_sweep(c.scores, c.labels)) << trial;
  }
}

TEST(F1AccuracyTest, Examples) {
  const auto perfect = metrics::f1_accuracy(V{0.9, 0.1, 0.7}, V{1, 0, 1});
  EXPECT_EQ(perfect.f1, 1.0);
  EXPECT_EQ(perfect.accuracy, 1.0);
  const auto none = metrics::f1_accuracy(V{0.1, 0.2, 0.3}, V{1, 0, 1});
  EXPECT_EQ(none.f1, 0.0);
  EXPECT_NEAR(none.accuracy, 1.0 / 3.0, 1e-15);
  // TP = 2, FP = 1, FN = 1, TN = 1.
  const auto hand = metrics::f1_accuracy(V{0.9, 0.8, 0.7, 0.2, 0.1}, V{1, 1, 0, 1, 0});
  EXPECT_NEAR(hand.f1, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(hand.accuracy, 3.0 / 5.0, 1e-15);
  EXPECT_EQ(metrics::f1_accuracy(V{0.5}, V{1}).f1, 1.0);  // threshold inclusive
}

TEST(EceTest, Examples) {
  // Each bin's confidence equals its empirical accuracy.
  EXPECT_NEAR(metrics::ece(V{0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75}, V{1, 0, 0, 0, 1, 1, 1, 0}), 0.0, 1e-15);
  EXPECT_EQ(metrics::ece(V{1.0, 1.0, 1.0}, V{0, 0, 0}), 1.0);
  EXPECT_EQ(metrics::bin_of(1.0, 10), 9u);
  EXPECT_EQ(metrics::bin_of(0.0, 10), 0u);
  EXPECT_THROW(metrics::ece(V{1.5}, V{1}), DataError);
  EXPECT_THROW(metrics::ece(V{0.5}, V{1}, 0), ParameterError);
}

TEST(EceTest, MatchesDirectBinningOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Case c = random_case(rng);
    for (std::size_t bins : {1u, 10u, 7u})
      EXPECT_EQ(metrics::ece(c.scores, c.labels, bins), testing::ece_direct(c.scores, c.labels, bins)) << trial;
  }
}

TEST(MetricsTest, AllValuesInUnitInterval) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Case c = random_case(rng);
    const auto fa = metrics::f1_accuracy(c.scores, c.labels);
    for (double v : {metrics::auroc(c.scores, c.labels), metrics::auprc(c.scores, c.labels), fa.f1, fa.accuracy,
                     metrics::ece(c.scores, c.labels)}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

}  // namespace
}  // namespace mmf
