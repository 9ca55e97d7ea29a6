#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmf/fusion.hpp"
#include "mmf/objectives.hpp"
#include "mmf/optimizer.hpp"

namespace mmf {

// Receives one JSON object per training event (step or epoch).
using EventSink = std::function<void(const nlohmann::json&)>;

struct PretrainStepResult {
  double reconstruction = 0.0;
  double contrastive = 0.0;
  double total = 0.0;
};

inline ObjectiveSpec pretrain_spec(const PretrainConfig& c, bool detach_contrast) {
  ObjectiveSpec s;
  s.reconstruction = true;
  s.alpha = c.alpha;
  s.detach_contrast = detach_contrast;
  s.temperature = c.temperature;
  s.mask_ratio = c.mask_ratio;
  s.training = true;
  return s;
}

inline void check_finite_loss(double loss, std::uint64_t step) {
  if (!std::isfinite(loss)) {
    throw DivergenceError("loss became non-finite (" + std::to_string(loss) + ") at step " + std::to_string(step));
  }
}

// One self-supervised update: L_mask + alpha * L_contrast over the batch.
inline PretrainStepResult pretrain_step(Model& model, AdamState& opt, std::span<const PatientRecord> batch,
                                        const PretrainConfig& c, std::uint64_t seed, bool detach_contrast = false) {
  ObjectiveValue v = objectives::evaluate_objective(model, batch, pretrain_spec(c, detach_contrast), seed, true);
  check_finite_loss(v.total, opt.step + 1);
  adam_step(model.params, v.grads, opt);
  return {v.reconstruction, v.contrastive, v.total};
}

// Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
  return idx;
}

// Runs `c.steps` pretraining updates, drawing batches from reshuffled passes
// over `records`.
inline std::vector<PretrainStepResult> pretrain(Model& model, std::span<const PatientRecord> records,
                                                const PretrainConfig& c, std::uint64_t seed,
                                                const EventSink& sink = {}, bool detach_contrast = false) {
  c.validate();
  if (records.empty()) throw DataError("pretraining set is empty");
  Rng rng(seed);
  AdamState opt = make_adam(model.params, c.learning_rate);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::vector<PretrainStepResult> history;
  const std::size_t b = std::min(c.batch_size, records.size());
  for (std::size_t step = 0; step < c.steps; ++step) {
    std::vector<PatientRecord> batch;
    while (batch.size() < b) {
      if (cursor == order.size()) {
        order = shuffled_indices(records.size(), rng);
        cursor = 0;
      }
      batch.push_back(records[order[cursor++]]);
    }
    history.push_back(pretrain_step(model, opt, batch, c, rng.next_u64(), detach_contrast));
    if (sink) {
      sink({{"event", "pretrain_step"},
            {"step", step + 1},
            {"loss_mask", history.back().reconstruction},
            {"loss_contrast", history.back().contrastive},
            {"loss", history.back().total}});
    }
  }
  return history;
}

struct FinetuneResult {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::size_t steps = 0;
};

// Supervised training of every parameter with per-record modality dropout.
inline FinetuneResult finetune(Model& model, std::span<const PatientRecord> train, const FinetuneConfig& c,
                               std::uint64_t seed, const EventSink& sink = {}) {
  c.validate();
  if (train.empty()) throw DataError("training set is empty");
  Rng rng(seed);
  AdamState opt = make_adam(model.params, c.learning_rate);
  FinetuneResult result;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    const std::vector<std::size_t> order = shuffled_indices(train.size(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += c.batch_size) {
      if (c.max_steps && result.steps >= c.max_steps) break;
      std::vector<PatientRecord> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + c.batch_size); ++i) {
        const PatientRecord& r = train[order[i]];
        batch.push_back(r.restricted(fusion::modality_dropout(r.mask, c.modality_dropout, rng)));
      }
      ObjectiveValue v = objectives::supervised_loss(model, batch, rng.next_u64(), true, true);
      check_finite_loss(v.total, result.steps + 1);
      adam_step(model.params, v.grads, opt);
      ++result.steps;
      loss_sum += v.total;
      ++batches;
    }
    if (batches == 0) break;
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    if (sink) {
      sink({{"event", "finetune_epoch"},
            {"epoch", epoch + 1},
            {"steps", result.steps},
            {"loss", result.epoch_loss.back()}});
    }
  }
  return result;
}

}  // namespace mmf
