#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "segprompt/errors.hpp"
#include "segprompt/segmap.hpp"

namespace segprompt {

/// Two-class metrics. Precision, recall and F1 are macro averages over
/// both classes; a zero denominator contributes 0 to the average.
struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
  std::array<std::array<std::size_t, 2>, 2> confusion{};  // [label][prediction]
  std::size_t n = 0;
};

/// Mann-Whitney AUC for scores of the positive class (label 1). Ties count
/// one half. With a single class present the ranking is uninformative and
/// 0.5 is returned.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based mean rank of the tie run
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1) {
        rank_sum += avg_rank;
        pos += 1;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) return 0.5;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

inline MetricsReport compute_metrics(std::span<const int> preds, std::span<const double> scores,
                                     std::span<const int> labels) {
  if (preds.size() != labels.size() || scores.size() != labels.size()) {
    throw DimensionError("metrics: " + std::to_string(preds.size()) + " predictions, " +
                         std::to_string(scores.size()) + " scores, " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ConfigError("metrics: empty input");
  MetricsReport r;
  r.n = labels.size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if ((labels[i] != 0 && labels[i] != 1) || (preds[i] != 0 && preds[i] != 1)) {
      throw ConfigError("metrics: classes must be 0 or 1");
    }
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) {
      throw ConfigError("metrics: score " + std::to_string(scores[i]) + " outside [0, 1]");
    }
    ++r.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  }
  const auto& c = r.confusion;
  r.accuracy = static_cast<double>(c[0][0] + c[1][1]) / static_cast<double>(r.n);
  auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  double p_sum = 0, r_sum = 0, f_sum = 0;
  for (std::size_t k = 0; k < 2; ++k) {
    const double p = ratio(c[k][k], c[0][k] + c[1][k]);
    const double rc = ratio(c[k][k], c[k][0] + c[k][1]);
    p_sum += p;
    r_sum += rc;
    f_sum += (p + rc) == 0.0 ? 0.0 : 2.0 * p * rc / (p + rc);
  }
  r.precision = p_sum / 2.0;
  r.recall = r_sum / 2.0;
  r.f1 = f_sum / 2.0;
  r.auc = roc_auc(scores, labels);
  return r;
}

/// Dice overlap of the foreground sets; two empty maps score 1.
inline double dice(const SegMap& a, const SegMap& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw DimensionError("dice: maps " + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " and " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()) + " differ in size");
  }
  std::size_t inter = 0, na = 0, nb = 0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const bool fa = av[i] > 0, fb = bv[i] > 0;
    na += fa;
    nb += fb;
    inter += fa && fb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// ---------------------------------------------------------------------------
// Aggregation across folds

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

/// Welford accumulation.
inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  if (xs.empty()) return r;
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  for (double x : xs) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }
  r.mean = mean;
  r.std = std::sqrt(std::max(0.0, m2 / static_cast<double>(n)));
  return r;
}

struct AggregateReport {
  MeanStd accuracy, precision, recall, f1, auc;
  std::size_t folds = 0;
};

inline AggregateReport aggregate(std::span<const MetricsReport> reports) {
  auto collect = [&](double MetricsReport::*field) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.*field);
    return mean_std(v);
  };
  AggregateReport a;
  a.folds = reports.size();
  a.accuracy = collect(&MetricsReport::accuracy);
  a.precision = collect(&MetricsReport::precision);
  a.recall = collect(&MetricsReport::recall);
  a.f1 = collect(&MetricsReport::f1);
  a.auc = collect(&MetricsReport::auc);
  return a;
}

/// "99.56 ± 0.3": percentage mean with two decimals, std with one.
inline std::string format_mean_std(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.1f", 100.0 * m.mean, 100.0 * m.std);
  return buf;
}

}  // namespace segprompt
