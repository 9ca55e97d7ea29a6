#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmf/metrics.hpp"
#include "mmf/network.hpp"
#include "mmf/pipeline.hpp"
#include "mmf/training.hpp"

namespace mmf {

struct MetricSet {
  double auroc = 0.0;
  double auprc = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  double ece = 0.0;
};

struct EvalReport {
  std::string variant;
  ModalityMask subset = ModalityMask::all();
  std::uint64_t seed = 0;
  std::size_t records = 0;
  std::vector<MetricSet> per_class;
  MetricSet macro;
};

inline nlohmann::json to_json(const MetricSet& m) {
  return {{"auroc", m.auroc}, {"auprc", m.auprc}, {"f1", m.f1}, {"accuracy", m.accuracy}, {"ece", m.ece}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const MetricSet& m : r.per_class) classes.push_back(to_json(m));
  return {{"variant", r.variant}, {"subset", r.subset.to_string()}, {"seed", r.seed},
          {"records", r.records}, {"per_class", classes},           {"macro", to_json(r.macro)}};
}

// Metrics per class and their unweighted mean from [K] probability and label
// vectors.
inline EvalReport evaluate_scores(const std::vector<Tensor>& probs, const std::vector<Tensor>& labels,
                                  const EvalConfig& cfg) {
  if (probs.size() != labels.size()) throw DimensionError("evaluate_scores: prediction and label counts differ");
  if (probs.empty()) throw UndefinedMetricError("evaluation set is empty");
  const std::size_t k = probs[0].size();
  EvalReport r;
  r.records = probs.size();
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s, y;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s.push_back(probs[i][c]);
      y.push_back(labels[i][c]);
    }
    MetricSet m;
    m.auroc = metrics::auroc(s, y);
    m.auprc = metrics::auprc(s, y);
    const auto fa = metrics::f1_accuracy(s, y, cfg.threshold);
    m.f1 = fa.f1;
    m.accuracy = fa.accuracy;
    m.ece = metrics::ece(s, y, cfg.calibration_bins);
    r.per_class.push_back(m);
  }
  const double inv = 1.0 / static_cast<double>(k);
  for (const MetricSet& m : r.per_class) {
    r.macro.auroc += m.auroc * inv;
    r.macro.auprc += m.auprc * inv;
    r.macro.f1 += m.f1 * inv;
    r.macro.accuracy += m.accuracy * inv;
    r.macro.ece += m.ece * inv;
  }
  return r;
}

inline std::string variant_name(const ModelConfig& c) {
  switch (c.variant) {
    case ModelVariant::kFusion: return "fusion";
    case ModelVariant::kConcat: return "concat";
    case ModelVariant::kUnimodal: return std::string("unimodal_") + modality_name(c.unimodal);
  }
  return "unknown";
}

// Deterministic predictions on each record restricted to `subset`. Records
// left with no modality are skipped; a unimodal model facing a record without
// its modality scores the uninformed 0.5.
inline EvalReport eval_model(const TrainedModel& tm, std::span<const PatientRecord> records, const EvalConfig& cfg,
                             const ModalityMask& subset = ModalityMask::all()) {
  const ModelConfig& mc = tm.model.config;
  std::vector<Tensor> probs, labels;
  for (const PatientRecord& raw : records) {
    if (!raw.label) throw DataError("evaluation record has no label");
    const PatientRecord r = raw.restricted(subset);
    if (!r.mask.any()) continue;
    if (mc.variant == ModelVariant::kUnimodal && !r.mask.has(mc.unimodal)) {
      probs.push_back(Tensor({mc.num_classes}, 0.5));
    } else {
      probs.push_back(predict(tm, r));
    }
    labels.push_back(*r.label);
  }
  EvalReport rep = evaluate_scores(probs, labels, cfg);
  rep.variant = variant_name(mc);
  rep.subset = subset;
  return rep;
}

// Runs task(i) for i in [0, n) on up to `threads` workers; the first failure
// is rethrown after all workers stop.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& task) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// All 15 non-empty modality subsets, in mask-code order.
inline std::vector<EvalReport> ablate_modalities(const TrainedModel& tm, std::span<const PatientRecord> records,
                                                 const EvalConfig& cfg, std::size_t threads = 1) {
  std::vector<EvalReport> out(15);
  parallel_for(15, threads, [&](std::size_t i) {
    out[i] = eval_model(tm, records, cfg, ModalityMask::from_bits(static_cast<unsigned>(i + 1)));
  });
  return out;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

// 70/15/15 assignment from a hash of (seed, index).
inline Split split_indices(std::size_t n, std::uint64_t seed) {
  Split s;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(mix_seed(seed, i) >> 11) * 0x1.0p-53;
    (u < 0.70 ? s.train : u < 0.85 ? s.val : s.test).push_back(i);
  }
  return s;
}

inline std::vector<PatientRecord> select(std::span<const PatientRecord> records, const std::vector<std::size_t>& idx) {
  std::vector<PatientRecord> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(records[i]);
  return out;
}

// Supervised training from `init` (or a fresh model from `seed`) on raw
// records. The standardizer is fitted on `train` unless one is supplied.
// Unimodal models only see records that carry their modality.
inline TrainedModel train_model(const ModelConfig& mc, std::span<const PatientRecord> train, const FinetuneConfig& fc,
                                std::uint64_t seed, const Standardizer* standardizer = nullptr,
                                const Model* init = nullptr, const EventSink& sink = {}) {
  std::vector<PatientRecord> usable;
  for (const PatientRecord& r : train)
    if (mc.variant != ModelVariant::kUnimodal || r.mask.has(mc.unimodal)) usable.push_back(r);
  TrainedModel tm;
  tm.standardizer = standardizer ? *standardizer : Standardizer::fit(usable, mc.dims);
  tm.model = init ? *init : init_model(mc, mix_seed(seed, 1));
  if (!(tm.model.config == mc)) throw ConfigError("initial model configuration differs from the requested one");
  const std::vector<PatientRecord> prepared = preprocess_all(usable, tm.standardizer);
  finetune(tm.model, prepared, fc, mix_seed(seed, 2), sink);
  return tm;
}

inline ModelConfig baseline_config(const ModelConfig& base, ModelVariant v, Modality m = Modality::kEhr) {
  ModelConfig c = base;
  c.variant = v;
  c.unimodal = m;
  return c;
}

// Four unimodal models, the concatenation baseline and the fusion model, all
// trained on the same train split with the same seed and evaluated on the
// test split. Unimodal models train without modality dropout.
inline std::vector<EvalReport> run_baselines(std::span<const PatientRecord> records, std::uint64_t split_seed,
                                             const RunConfig& rc, std::uint64_t seed, std::size_t threads = 1) {
  const Split split = split_indices(records.size(), split_seed);
  const std::vector<PatientRecord> train = select(records, split.train), test = select(records, split.test);
  std::vector<ModelConfig> configs;
  for (Modality m : kAllModalities) configs.push_back(baseline_config(rc.model, ModelVariant::kUnimodal, m));
  configs.push_back(baseline_config(rc.model, ModelVariant::kConcat));
  configs.push_back(baseline_config(rc.model, ModelVariant::kFusion));
  std::vector<EvalReport> out(configs.size());
  parallel_for(configs.size(), threads, [&](std::size_t i) {
    FinetuneConfig fc = rc.finetune;
    if (configs[i].variant == ModelVariant::kUnimodal) fc.modality_dropout = 0.0;
    const TrainedModel tm = train_model(configs[i], train, fc, seed);
    out[i] = eval_model(tm, test, rc.eval);
    out[i].seed = seed;
  });
  return out;
}

struct TransferReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> pretrained_auroc;  // macro AUROC per seed
  std::vector<double> scratch_auroc;
  double pretrained_mean = 0.0;
  double scratch_mean = 0.0;
  double margin = 0.0;  // pretrained_mean - scratch_mean
};

inline nlohmann::json to_json(const TransferReport& t) {
  return {{"seeds", t.seeds},
          {"pretrained_macro_auroc", t.pretrained_auroc},
          {"scratch_macro_auroc", t.scratch_auroc},
          {"pretrained_mean", t.pretrained_mean},
          {"scratch_mean", t.scratch_mean},
          {"margin", t.margin}};
}

// Per seed: draws rc.eval.transfer_labeled records from the train split, then
// fine-tunes once from the pretrained weights and once from a fresh
// initialisation with identical data, standardizer and training stream.
// Both arms are scored on the test split.
inline TransferReport transfer_experiment(const TrainedModel& pretrained, std::span<const PatientRecord> records,
                                          std::uint64_t split_seed, const RunConfig& rc,
                                          const std::vector<std::uint64_t>& seeds, std::size_t threads = 1) {
  const Split split = split_indices(records.size(), split_seed);
  if (split.train.size() < rc.eval.transfer_labeled) {
    throw DataError("train split has " + std::to_string(split.train.size()) + " records, fewer than " +
                    std::to_string(rc.eval.transfer_labeled) + " labeled ones requested");
  }
  const std::vector<PatientRecord> test = select(records, split.test);
  const ModelConfig& mc = pretrained.model.config;
  TransferReport rep;
  rep.seeds = seeds;
  rep.pretrained_auroc.resize(seeds.size());
  rep.scratch_auroc.resize(seeds.size());
  parallel_for(2 * seeds.size(), threads, [&](std::size_t job) {
    const std::size_t i = job / 2;
    const bool from_pretrained = job % 2 == 0;
    Rng pick(mix_seed(seeds[i], 0x7ab));
    std::vector<std::size_t> idx = split.train;
    for (std::size_t j = 0; j < rc.eval.transfer_labeled; ++j) std::swap(idx[j], idx[j + pick.uniform_int(idx.size() - j)]);
    idx.resize(rc.eval.transfer_labeled);
    const std::vector<PatientRecord> labeled = select(records, idx);
    const TrainedModel tm = train_model(mc, labeled, rc.finetune, seeds[i], &pretrained.standardizer,
                                        from_pretrained ? &pretrained.model : nullptr);
    (from_pretrained ? rep.pretrained_auroc : rep.scratch_auroc)[i] = eval_model(tm, test, rc.eval).macro.auroc;
  });
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    rep.pretrained_mean += rep.pretrained_auroc[i] / static_cast<double>(seeds.size());
    rep.scratch_mean += rep.scratch_auroc[i] / static_cast<double>(seeds.size());
  }
  rep.margin = rep.pretrained_mean - rep.scratch_mean;
  return rep;
}

}  // namespace mmf
