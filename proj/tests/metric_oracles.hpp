#pragma once

// Brute-force reference implementations of the ranking and calibration
// metrics, written to reproduce the library's floating-point results exactly.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace mmf::testing {

// All positive/negative pairs: a win counts 2, a tie 1, so the sum stays an
// integer.
inline double auroc_all_pairs(std::span<const double> s, std::span<const double> y) {
  double wins2 = 0.0, p = 0.0, q = 0.0;
  for (double v : y) (v == 1.0 ? p : q) += 1.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1.0) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] == 1.0) continue;
      wins2 += s[i] > s[j] ? 2.0 : s[i] == s[j] ? 1.0 : 0.0;
    }
  }
  return wins2 / 2.0 / (p * q);
}

// Sweeps every distinct score as a threshold (descending) and recounts the
// confusion matrix from scratch at each step.
inline double auprc_threshold_sweep(std::span<const double> s, std::span<const double> y) {
  std::vector<double> thresholds(s.begin(), s.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::size_t pos = 0;
  for (double v : y) pos += v == 1.0;
  double ap = 0.0;
  std::size_t prev_tp = 0;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < t) continue;
      (y[i] == 1.0 ? tp : fp) += 1;
    }
    if (tp > prev_tp) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      ap += precision * (static_cast<double>(tp - prev_tp) / static_cast<double>(pos));
    }
    prev_tp = tp;
  }
  return ap;
}

// One pass per bin over the whole sample; bin b holds b/B <= s < (b+1)/B and
// the top bin also holds 1.0.
inline double ece_direct(std::span<const double> s, std::span<const double> y, std::size_t bins) {
  const double n = static_cast<double>(s.size());
  double e = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / static_cast<double>(bins);
    const double hi = static_cast<double>(b + 1) / static_cast<double>(bins);
    double conf = 0.0, acc = 0.0, count = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const bool in = s[i] >= lo && (s[i] < hi || b + 1 == bins);
      if (!in) continue;
      conf += s[i];
      acc += y[i];
      count += 1.0;
    }
    if (count == 0.0) continue;
    e += (count / n) * std::abs(conf / count - acc / count);
  }
  return e;
}

}  // namespace mmf::testing
