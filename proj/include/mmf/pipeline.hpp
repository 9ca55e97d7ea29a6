#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mmf/network.hpp"
#include "mmf/objectives.hpp"
#include "mmf/optimizer.hpp"

namespace mmf {

// Per-feature affine normalisation fitted on training records: z-scores for
// ehr, gen and sens features, min-max per channel for images.
struct Standardizer {
  std::array<Tensor, kNumModalities> offset;  // mean, or min for img
  std::array<Tensor, kNumModalities> scale;   // std, or max - min for img

  static Standardizer identity(const InputDims& dims) {
    Standardizer s;
    for (Modality m : kAllModalities) {
      const std::size_t width = expected_shape(m, dims).back();
      s.offset[index_of(m)] = Tensor({width}, 0.0);
      s.scale[index_of(m)] = Tensor({width}, 1.0);
    }
    return s;
  }

  // Statistics over every row of every present tensor. Constant features get
  // scale 1; a modality absent from all records keeps the identity map.
  static Standardizer fit(std::span<const PatientRecord> records, const InputDims& dims) {
    Standardizer s = identity(dims);
    for (Modality m : kAllModalities) {
      const std::size_t k = index_of(m);
      const std::size_t width = s.offset[k].size();
      std::vector<double> sum(width, 0.0), lo(width, 0.0), hi(width, 0.0);
      double n = 0.0;
      bool first = true;
      for (const PatientRecord& r : records) {
        if (!r.mask.has(m)) continue;
        const Tensor& x = r.input(m);
        for (std::size_t row = 0; row < x.rows(); ++row) {
          for (std::size_t j = 0; j < width; ++j) {
            const double v = x.at(row, j);
            sum[j] += v;
            lo[j] = first ? v : std::min(lo[j], v);
            hi[j] = first ? v : std::max(hi[j], v);
          }
          first = false;
          n += 1.0;
        }
      }
      if (n == 0.0) continue;
      if (m == Modality::kImg) {
        for (std::size_t j = 0; j < width; ++j) {
          s.offset[k][j] = lo[j];
          s.scale[k][j] = hi[j] > lo[j] ? hi[j] - lo[j] : 1.0;
        }
        continue;
      }
      std::vector<double> mean(width), ss(width, 0.0);
      for (std::size_t j = 0; j < width; ++j) mean[j] = sum[j] / n;
      for (const PatientRecord& r : records) {
        if (!r.mask.has(m)) continue;
        const Tensor& x = r.input(m);
        for (std::size_t row = 0; row < x.rows(); ++row)
          for (std::size_t j = 0; j < width; ++j) ss[j] += (x.at(row, j) - mean[j]) * (x.at(row, j) - mean[j]);
      }
      for (std::size_t j = 0; j < width; ++j) {
        const double sd = std::sqrt(ss[j] / n);
        s.offset[k][j] = mean[j];
        s.scale[k][j] = sd > 0.0 ? sd : 1.0;
      }
    }
    return s;
  }
};

inline PatientRecord preprocess(const PatientRecord& r, const Standardizer& s) {
  PatientRecord out = r;
  for (Modality m : kAllModalities) {
    auto& t = out.inputs[index_of(m)];
    if (!t) continue;
    const Tensor& off = s.offset[index_of(m)];
    const Tensor& sc = s.scale[index_of(m)];
    if (t->cols() != off.size()) {
      throw DimensionError(std::string(modality_name(m)) + " tensor " + shape_str(t->shape()) +
                           " has a different feature width than the standardizer (" + std::to_string(off.size()) +
                           ")");
    }
    for (std::size_t row = 0; row < t->rows(); ++row)
      for (std::size_t j = 0; j < off.size(); ++j) t->at(row, j) = (t->at(row, j) - off[j]) / sc[j];
  }
  return out;
}

inline std::vector<PatientRecord> preprocess_all(std::span<const PatientRecord> records, const Standardizer& s) {
  std::vector<PatientRecord> out;
  out.reserve(records.size());
  for (const PatientRecord& r : records) out.push_back(preprocess(r, s));
  return out;
}

// A model together with the preprocessing it was trained with.
struct TrainedModel {
  Model model;
  Standardizer standardizer;
};

// Deterministic class probabilities (dropout off) for a raw record.
inline Tensor predict(const TrainedModel& tm, const PatientRecord& raw) {
  const PatientRecord r = preprocess(raw, tm.standardizer);
  Tape tape;
  Rng rng(0);
  Graph g(tape, tm.model, rng, false);
  return probabilities(forward(g, r).logits.value(), tm.model.config.head);
}

// Sum over classes of the binary entropy of each probability.
inline double binary_entropy_sum(const Tensor& p) {
  double h = 0.0;
  for (double v : p.data()) {
    if (v > 0.0) h -= v * std::log(v);
    if (v < 1.0) h -= (1.0 - v) * std::log(1.0 - v);
  }
  return h;
}

struct Uncertainty {
  Tensor mean;  // [K]
  Tensor std;   // [K]
  double entropy = 0.0;
};

// Monte-Carlo dropout: `samples` stochastic forward passes. With dropout rate
// 0 every pass equals predict() and the spread is exactly zero.
inline Uncertainty estimate_uncertainty(const TrainedModel& tm, const PatientRecord& raw, std::size_t samples,
                                        std::uint64_t seed) {
  if (samples < 1) throw ParameterError("uncertainty needs at least one sample");
  const PatientRecord r = preprocess(raw, tm.standardizer);
  const std::size_t k = tm.model.config.num_classes;
  Tensor mean({k}, 0.0), m2({k}, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    Tape tape;
    Rng rng(mix_seed(seed, s));
    Graph g(tape, tm.model, rng, true);
    const Tensor p = probabilities(forward(g, r).logits.value(), tm.model.config.head);
    for (std::size_t c = 0; c < k; ++c) {
      const double delta = p[c] - mean[c];
      mean[c] += delta / static_cast<double>(s + 1);
      m2[c] += delta * (p[c] - mean[c]);
    }
  }
  Uncertainty u;
  u.std = Tensor({k});
  for (std::size_t c = 0; c < k; ++c) u.std[c] = std::sqrt(m2[c] / static_cast<double>(samples));
  u.entropy = binary_entropy_sum(mean);
  u.mean = std::move(mean);
  return u;
}

struct Explanation {
  std::array<double, kNumModalities> attribution{};  // sums to 1 over present modalities
  FusionTrace trace;
};

// Attention the FUSE query pays to each modality's tokens, with its own
// self-weight removed and renormalised, averaged over layers and heads.
inline std::array<double, kNumModalities> modality_attribution(const FusionTrace& trace) {
  std::array<double, kNumModalities> e{};
  std::size_t count = 0;
  for (const auto& layer : trace.weights) {
    for (const Tensor& w : layer) {
      std::array<double, kNumModalities> part{};
      double total = 0.0;
      for (std::size_t j = 0; j < trace.token_modality.size(); ++j) {
        const int tag = trace.token_modality[j];
        if (tag == kFuseToken) continue;
        part[static_cast<std::size_t>(tag)] += w.at(0, j);
        total += w.at(0, j);
      }
      if (total <= 0.0) continue;
      for (std::size_t m = 0; m < kNumModalities; ++m) e[m] += part[m] / total;
      ++count;
    }
  }
  if (count == 0) throw ContractError("attention trace carries no weight on modality tokens");
  for (double& v : e) v /= static_cast<double>(count);
  return e;
}

inline Explanation explain(const TrainedModel& tm, const PatientRecord& raw) {
  if (tm.model.config.variant != ModelVariant::kFusion) {
    throw ContractError("explanations need the fusion model");
  }
  const PatientRecord r = preprocess(raw, tm.standardizer);
  Tape tape;
  Rng rng(0);
  Graph g(tape, tm.model, rng, false);
  ForwardResult f = forward(g, r);
  Explanation ex;
  ex.trace = std::move(f.fusion->trace);
  ex.attribution = modality_attribution(ex.trace);
  return ex;
}

// One supervised Adam update on a single clinician-labelled record, with
// dropout off so the step is deterministic. Returns the loss before the step.
inline double apply_feedback(TrainedModel& tm, const PatientRecord& raw, const std::optional<Tensor>& label,
                             AdamState& opt) {
  if (!label || label->empty()) throw ContractError("feedback needs a labelled record");
  PatientRecord r = preprocess(raw, tm.standardizer);
  r.label = label;
  validate_record(r, tm.model.config.dims, tm.model.config.num_classes);
  ObjectiveValue v = objectives::supervised_loss(tm.model, std::span<const PatientRecord>(&r, 1), 0, false, true);
  adam_step(tm.model.params, v.grads, opt);
  return v.total;
}

}  // namespace mmf
