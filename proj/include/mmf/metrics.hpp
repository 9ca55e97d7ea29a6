#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mmf/error.hpp"

namespace mmf::metrics {

namespace detail {

inline void check_inputs(std::span<const double> scores, std::span<const double> labels, const char* what) {
  if (scores.size() != labels.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
  }
  for (double y : labels)
    if (y != 0.0 && y != 1.0) throw DataError(std::string(what) + ": labels must be 0 or 1");
}

inline std::size_t count_positive(std::span<const double> labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1.0));
}

inline void require_both_classes(std::size_t pos, std::size_t n, const char* what) {
  if (pos == 0 || pos == n) throw UndefinedMetricError(std::string(what) + " needs both classes present");
}

}  // namespace detail

// Mann-Whitney statistic: P(random positive outscores random negative), ties
// credited 0.5, via average ranks.
inline double auroc(std::span<const double> scores, std::span<const double> labels) {
  detail::check_inputs(scores, labels, "auroc");
  const std::size_t n = scores.size(), pos = detail::count_positive(labels);
  detail::require_both_classes(pos, n, "auroc");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum of positives keeps every term an integer.
  double rank_sum2 = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank2 = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1.0) rank_sum2 += avg_rank2;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(n - pos);
  const double u2 = rank_sum2 - p * (p + 1.0);
  return u2 / 2.0 / (p * q);
}

// Step-wise average precision: sum of precision * recall gain at each
// distinct score threshold, scanning scores in descending order.
inline double auprc(std::span<const double> scores, std::span<const double> labels) {
  detail::check_inputs(scores, labels, "auprc");
  const std::size_t n = scores.size(), pos = detail::count_positive(labels);
  if (pos == 0) throw UndefinedMetricError("auprc needs at least one positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i, gained = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1.0) ++gained;
      else ++fp;
      ++j;
    }
    tp += gained;
    if (gained > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      ap += precision * (static_cast<double>(gained) / static_cast<double>(pos));
    }
    i = j;
  }
  return ap;
}

struct F1Accuracy {
  double f1 = 0.0;
  double accuracy = 0.0;
};

// Positive prediction iff score >= threshold.
inline F1Accuracy f1_accuracy(std::span<const double> scores, std::span<const double> labels, double threshold = 0.5) {
  detail::check_inputs(scores, labels, "f1_accuracy");
  if (scores.empty()) throw UndefinedMetricError("f1_accuracy on an empty set");
  std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold, truth = labels[i] == 1.0;
    tp += pred && truth;
    fp += pred && !truth;
    fn += !pred && truth;
    correct += pred == truth;
  }
  F1Accuracy r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(scores.size());
  const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return r;
}

// Lower edge of calibration bin b out of `bins`.
inline double bin_edge(std::size_t b, std::size_t bins) { return static_cast<double>(b) / static_cast<double>(bins); }

// Bin of a score in [0, 1]: the last bin whose lower edge it reaches, so 1.0
// falls in the top bin.
inline std::size_t bin_of(double score, std::size_t bins) {
  std::size_t b = 0;
  while (b + 1 < bins && score >= bin_edge(b + 1, bins)) ++b;
  return b;
}

// Expected calibration error over equal-width bins; empty bins are skipped.
inline double ece(std::span<const double> scores, std::span<const double> labels, std::size_t bins = 10) {
  detail::check_inputs(scores, labels, "ece");
  if (bins < 1) throw ParameterError("ece needs at least one bin");
  if (scores.empty()) throw UndefinedMetricError("ece on an empty set");
  for (double s : scores)
    if (!(s >= 0.0 && s <= 1.0)) throw DataError("ece scores must lie in [0, 1]");
  std::vector<double> conf(bins, 0.0), acc(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const std::size_t b = bin_of(scores[i], bins);
    conf[b] += scores[i];
    acc[b] += labels[i];
    ++count[b];
  }
  const double n = static_cast<double>(scores.size());
  double e = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double c = static_cast<double>(count[b]);
    e += (c / n) * std::abs(conf[b] / c - acc[b] / c);
  }
  return e;
}

}  // namespace mmf::metrics
