#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "mmf/config.hpp"
#include "mmf/record.hpp"
#include "mmf/rng.hpp"

namespace mmf {

// Latent factors behind one synthetic record.
struct GroundTruth {
  bool f_a = false;  // carried by ehr and gen
  bool f_b = false;  // carried by img and sens
  double severity = 1.0;

  bool y1() const { return f_a != f_b; }
  bool y2() const { return f_a && severity > 1.0; }
};

struct Cohort {
  CohortConfig config;
  std::vector<PatientRecord> records;
  std::vector<GroundTruth> truth;
};

namespace synth {

inline constexpr std::size_t kLociBegin = 5;  // informative gen loci [5, 10)
inline constexpr std::size_t kLociEnd = 10;
inline constexpr double kDriftSlope = 0.1;
inline constexpr double kBlobStd = 2.0;
inline constexpr double kPeriod = 24.0;
inline constexpr double kHighCarrier = 0.9;
inline constexpr double kLowCarrier = 0.1;

// Noise-free ehr feature 0 at visit t.
inline double ehr_mean(bool f_a, double s, std::size_t t) { return f_a ? kDriftSlope * s * static_cast<double>(t) : 0.0; }

// Unit-amplitude blob at pixel (r, c); left-half center iff f_b.
inline double blob(bool f_b, const InputDims& d, std::size_t r, std::size_t c) {
  const double cr = (static_cast<double>(d.img_height) - 1.0) / 2.0;
  const double cc = f_b ? static_cast<double>(d.img_width) / 4.0 - 0.5 : 3.0 * static_cast<double>(d.img_width) / 4.0 - 0.5;
  const double dr = static_cast<double>(r) - cr, dc = static_cast<double>(c) - cc;
  return std::exp(-(dr * dr + dc * dc) / (2.0 * kBlobStd * kBlobStd));
}

inline double sens_amplitude(bool f_b, double s) { return f_b ? 1.0 + s : 1.0; }
inline double sens_wave(std::size_t t) { return std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / kPeriod); }

inline bool informative_locus(std::size_t locus) { return locus >= kLociBegin && locus < kLociEnd; }

inline Tensor labels_of(const GroundTruth& g) { return Tensor::vector({g.y1() ? 1.0 : 0.0, g.y2() ? 1.0 : 0.0}); }

// Record i of the cohort, drawn from its own stream mix_seed(seed, i).
inline std::pair<PatientRecord, GroundTruth> generate_record(const CohortConfig& cfg, std::size_t index) {
  const InputDims& d = cfg.dims;
  const double sigma = cfg.noise;
  Rng rng(mix_seed(cfg.seed, index));
  GroundTruth gt;
  gt.f_a = rng.bernoulli(0.5);
  gt.f_b = rng.bernoulli(0.5);
  gt.severity = rng.uniform(0.5, 1.5);
  const double s = gt.severity;

  PatientRecord r;
  Tensor ehr({d.ehr_visits, d.d_ehr});
  for (std::size_t t = 0; t < d.ehr_visits; ++t)
    for (std::size_t j = 0; j < d.d_ehr; ++j) ehr.at(t, j) = (j == 0 ? ehr_mean(gt.f_a, s, t) : 0.0) + sigma * rng.normal();

  Tensor img({d.img_height, d.img_width, d.img_channels});
  for (std::size_t y = 0; y < d.img_height; ++y)
    for (std::size_t x = 0; x < d.img_width; ++x)
      for (std::size_t ch = 0; ch < d.img_channels; ++ch)
        img[(y * d.img_width + x) * d.img_channels + ch] = s * blob(gt.f_b, d, y, x) + sigma * rng.normal();

  Tensor gen({d.gen_loci, d.d_gen});
  for (std::size_t l = 0; l < d.gen_loci; ++l) {
    const double p = informative_locus(l) && gt.f_a ? kHighCarrier : kLowCarrier;
    for (std::size_t j = 0; j < d.d_gen; ++j) gen.at(l, j) = rng.bernoulli(p) ? 1.0 : 0.0;
  }

  Tensor sens({d.sens_steps, d.d_sens});
  const double amp = sens_amplitude(gt.f_b, s);
  for (std::size_t t = 0; t < d.sens_steps; ++t)
    for (std::size_t j = 0; j < d.d_sens; ++j) sens.at(t, j) = (j == 0 ? amp * sens_wave(t) : 0.0) + sigma * rng.normal();

  do {
    for (Modality m : kAllModalities) r.mask.set(m, !rng.bernoulli(cfg.missing_rates[index_of(m)]));
  } while (!r.mask.any());

  const std::array<Tensor*, kNumModalities> all = {&ehr, &img, &gen, &sens};
  for (Modality m : kAllModalities)
    if (r.mask.has(m)) r.inputs[index_of(m)] = std::move(*all[index_of(m)]);
  r.label = labels_of(gt);
  return {std::move(r), gt};
}

// Grid resolution of the severity marginalisation in the Bayes oracle.
inline constexpr std::size_t kSeverityCells = 400;

// Gaussian log-likelihood of y = a * s * w + noise summed over elements, kept
// as sufficient statistics: -(yy - 2 a s yw + a^2 s^2 ww) / (2 sigma^2).
struct GaussianStats {
  double yy = 0.0, yw = 0.0, ww = 0.0;
  void add(double y, double w) {
    yy += y * y;
    yw += y * w;
    ww += w * w;
  }
  double sse(double scale) const { return yy - 2.0 * scale * yw + scale * scale * ww; }
};

}  // namespace synth

inline Cohort generate_cohort(const CohortConfig& cfg) {
  cfg.validate();
  Cohort c;
  c.config = cfg;
  c.records.reserve(cfg.num_records);
  c.truth.reserve(cfg.num_records);
  for (std::size_t i = 0; i < cfg.num_records; ++i) {
    auto [r, gt] = synth::generate_record(cfg, i);
    c.records.push_back(std::move(r));
    c.truth.push_back(gt);
  }
  return c;
}

// Exact posterior [P(y1 = 1), P(y2 = 1)] for a raw record under the
// generative model, marginalising s over kSeverityCells midpoint cells.
// sigma = 0 is treated as a vanishing noise floor.
inline Tensor bayes_oracle_score(const PatientRecord& r, const CohortConfig& cfg) {
  using namespace synth;
  const InputDims& d = cfg.dims;
  const double sigma = std::max(cfg.noise, 1e-6);
  const double inv2v = 1.0 / (2.0 * sigma * sigma);

  // ehr feature 0: y_t = f_a * s * (0.1 t) + noise.
  std::optional<GaussianStats> ehr;
  if (r.mask.has(Modality::kEhr)) {
    const Tensor& x = r.input(Modality::kEhr);
    ehr.emplace();
    for (std::size_t t = 0; t < x.dim(0); ++t) ehr->add(x.at(t, 0), kDriftSlope * static_cast<double>(t));
  }
  // img: y = s * blob_fb + noise; stats per f_b.
  std::array<std::optional<GaussianStats>, 2> img;
  if (r.mask.has(Modality::kImg)) {
    const Tensor& x = r.input(Modality::kImg);
    for (int fb = 0; fb < 2; ++fb) {
      img[fb].emplace();
      for (std::size_t y = 0; y < d.img_height; ++y)
        for (std::size_t c = 0; c < d.img_width; ++c)
          for (std::size_t ch = 0; ch < d.img_channels; ++ch)
            img[fb]->add(x[(y * d.img_width + c) * d.img_channels + ch], blob(fb == 1, d, y, c));
    }
  }
  // gen: Bernoulli log-likelihood of the informative loci, per f_a.
  std::array<double, 2> gen_ll = {0.0, 0.0};
  if (r.mask.has(Modality::kGen)) {
    const Tensor& x = r.input(Modality::kGen);
    for (std::size_t l = kLociBegin; l < std::min(kLociEnd, x.dim(0)); ++l) {
      for (std::size_t j = 0; j < x.dim(1); ++j) {
        const bool one = x.at(l, j) > 0.5;
        gen_ll[0] += std::log(one ? kLowCarrier : 1.0 - kLowCarrier);
        gen_ll[1] += std::log(one ? kHighCarrier : 1.0 - kHighCarrier);
      }
    }
  }
  // sens channel 0: y_t = amp * sin(2 pi t / 24) + noise.
  std::optional<GaussianStats> sens;
  if (r.mask.has(Modality::kSens)) {
    const Tensor& x = r.input(Modality::kSens);
    sens.emplace();
    for (std::size_t t = 0; t < x.dim(0); ++t) sens->add(x.at(t, 0), sens_wave(t));
  }

  // Log joint per (f_a, f_b, cell).
  constexpr std::size_t G = kSeverityCells;
  std::vector<double> ll(4 * G);
  double mx = -std::numeric_limits<double>::infinity();
  for (int fa = 0; fa < 2; ++fa) {
    for (int fb = 0; fb < 2; ++fb) {
      for (std::size_t k = 0; k < G; ++k) {
        const double s = 0.5 + (static_cast<double>(k) + 0.5) / static_cast<double>(G);
        double v = gen_ll[fa];
        if (ehr) v -= ehr->sse(fa ? s : 0.0) * inv2v;
        if (img[fb]) v -= img[fb]->sse(s) * inv2v;
        if (sens) v -= sens->sse(sens_amplitude(fb == 1, s)) * inv2v;
        ll[(fa * 2 + fb) * G + k] = v;
        mx = std::max(mx, v);
      }
    }
  }
  std::array<double, 4> w{};  // index fa * 2 + fb
  double y2_mass = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t k = 0; k < G; ++k) {
      const double e = std::exp(ll[c * G + k] - mx);
      w[c] += e;
      if (c >= 2 && k >= G / 2) y2_mass += e;
    }
  }
  // Grouped so that a factor the record says nothing about cancels exactly.
  const double total = (w[0] + w[1]) + (w[2] + w[3]);
  return Tensor::vector({(w[2] + w[1]) / total, y2_mass / total});
}

}  // namespace mmf
