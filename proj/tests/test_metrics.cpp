#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "segprompt/segprompt.hpp"

using namespace segprompt;
using namespace segprompt::testing;

TEST(Metrics, PerfectPredictionsScoreOne) {
  const std::vector<int> y{1, 0, 1, 0, 0};
  const std::vector<double> s{0.9, 0.2, 0.7, 0.1, 0.3};
  const auto r = compute_metrics(y, s, y);
  for (double v : {r.accuracy, r.precision, r.recall, r.f1, r.auc}) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(r.n, 5u);
}

TEST(Metrics, PerfectRankingAuc) {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  EXPECT_EQ(roc_auc(s, y), 1.0);
}

TEST(Metrics, ThreeOfFourPairsConcordant) {
  const std::vector<double> s{0.9, 0.4, 0.6, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(roc_auc(s, y), 0.75);
}

TEST(Metrics, ZeroDenominatorContributesZero) {
  // Every prediction is class 0, so class-1 precision is 0/0.
  const std::vector<int> preds{0, 0, 0, 0}, labels{0, 0, 1, 1};
  const std::vector<double> s{0.1, 0.2, 0.3, 0.4};
  const auto r = compute_metrics(preds, s, labels);
  EXPECT_DOUBLE_EQ(r.precision, 0.25);  // (0.5 + 0) / 2
  EXPECT_DOUBLE_EQ(r.recall, 0.5);      // (1 + 0) / 2
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
}

TEST(Metrics, SingleClassAucIsHalf) {
  const std::vector<int> y{1, 1};
  const std::vector<double> s{0.2, 0.9};
  EXPECT_EQ(roc_auc(s, y), 0.5);
}

TEST(Metrics, ErrorsOnBadInput) {
  const std::vector<int> two{0, 1}, one{0};
  const std::vector<double> s2{0.1, 0.2};
  const std::vector<int> none;
  const std::vector<double> no_scores;
  EXPECT_THROW(compute_metrics(one, s2, two), DimensionError);
  EXPECT_THROW(compute_metrics(none, no_scores, none), ConfigError);
  const std::vector<double> out_of_range{0.1, 1.5};
  EXPECT_THROW(compute_metrics(two, out_of_range, two), ConfigError);
}

TEST(Metrics, MatchesExhaustiveOracleOnHundredInstances) {
  Rng rng(2024);
  for (int t = 0; t < 100; ++t) {
    const auto m = random_metrics_instance(rng);
    const auto got = compute_metrics(m.preds, m.scores, m.labels);
    const auto want = oracle_metrics(m.preds, m.scores, m.labels);
    ASSERT_LE(metrics_distance(got, want), 1e-12) << "instance " << t << " n=" << m.labels.size();
  }
}

TEST(Metrics, ValuesStayInUnitIntervalAndConfusionSumsToN) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const auto m = random_metrics_instance(rng);
    const auto r = compute_metrics(m.preds, m.scores, m.labels);
    std::size_t total = 0;
    for (const auto& row : r.confusion)
      for (auto c : row) total += c;
    EXPECT_EQ(total, r.n);
    for (double v : {r.accuracy, r.precision, r.recall, r.f1, r.auc}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Metrics, AucInvariantUnderMonotoneTransform) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const auto m = random_metrics_instance(rng);
    std::vector<double> warped;
    for (double s : m.scores) warped.push_back(std::pow(s, 3.0) * 0.5 + 0.1);
    EXPECT_DOUBLE_EQ(roc_auc(m.scores, m.labels), roc_auc(warped, m.labels));
  }
}

TEST(Metrics, MacroF1SymmetricUnderClassSwap) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    auto m = random_metrics_instance(rng);
    const auto a = compute_metrics(m.preds, m.scores, m.labels);
    for (auto& p : m.preds) p = 1 - p;
    for (auto& l : m.labels) l = 1 - l;
    for (auto& s : m.scores) s = 1 - s;
    const auto b = compute_metrics(m.preds, m.scores, m.labels);
    EXPECT_NEAR(a.f1, b.f1, 1e-15);
    EXPECT_NEAR(a.accuracy, b.accuracy, 1e-15);
  }
}

TEST(Dice, Examples) {
  SegMap a = SegMap::background(4, 4), b = SegMap::background(4, 4);
  for (std::size_t x = 0; x < 4; ++x) a.set(0, x, true), a.set(1, x, true);  // rows 0-1
  EXPECT_EQ(dice(a, a), 1.0);
  for (std::size_t x = 0; x < 4; ++x) b.set(2, x, true), b.set(3, x, true);  // rows 2-3
  EXPECT_EQ(dice(a, b), 0.0);
  SegMap c = SegMap::background(4, 4);
  for (std::size_t x = 0; x < 4; ++x) c.set(1, x, true), c.set(2, x, true);  // rows 1-2
  EXPECT_DOUBLE_EQ(dice(a, c), 0.5);
  EXPECT_EQ(dice(SegMap::background(3, 3), SegMap::background(3, 3)), 1.0);
  EXPECT_THROW(dice(a, SegMap::background(3, 4)), DimensionError);
}

TEST(Aggregate, IdenticalValuesHaveZeroStd) {
  MetricsReport r;
  r.accuracy = 0.8125;
  const std::vector<MetricsReport> reports(6, r);
  const auto a = aggregate(reports);
  EXPECT_EQ(a.accuracy.mean, 0.8125);
  EXPECT_EQ(a.accuracy.std, 0.0);
  EXPECT_EQ(a.folds, 6u);
}

TEST(Aggregate, StdMatchesTwoPassOracle) {
  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> xs(1 + rng.below(12));
    for (auto& x : xs) x = rng.uniform();
    EXPECT_NEAR(mean_std(xs).std, two_pass_std(xs), 1e-12);
  }
}

TEST(Aggregate, FormatsMeanStd) {
  EXPECT_EQ(format_mean_std({0.9956, 0.003}), "99.56 ± 0.3");
  EXPECT_EQ(format_mean_std({0.9687, 0.011}), "96.87 ± 1.1");
}
