#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmf/encoders.hpp"
#include "mmf/layers.hpp"
#include "mmf/network.hpp"
#include "mmf/record.hpp"

namespace mmf::objectives {

// Mean per-class loss for one record: binary cross-entropy from logits for the
// multi-label head, categorical cross-entropy for the softmax head.
inline Var record_task_loss(Graph& g, Var logits, const std::optional<Tensor>& label) {
  if (!label) throw ContractError("supervised loss needs a labeled record");
  if (label->size() != logits.value().size()) {
    throw DimensionError("label of length " + std::to_string(label->size()) + " for " +
                         std::to_string(logits.value().size()) + " logits");
  }
  if (g.config().head == HeadKind::kMultiLabel) return ops::mean(ops::bce_with_logits(logits, *label));
  const std::size_t k = label->size();
  Var logp = ops::log_softmax_lastdim(ops::reshape(logits, {1, k}));
  Var target = g.constant(label->reshaped({1, k}));
  return ops::scale(ops::sum(ops::mul(logp, target)), -1.0);
}

// Chooses ceil(ratio * n_m) token positions per present modality, uniformly
// without replacement. Every present modality must keep at least one token.
inline TokenMaskPlan sample_mask_plan(const PatientRecord& r, const ModelConfig& c, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ConfigError("pretrain.mask_ratio must lie in (0, 1), got " + std::to_string(ratio));
  }
  TokenMaskPlan plan;
  for (Modality m : kAllModalities) {
    if (!r.mask.has(m)) continue;
    const std::size_t n = encoders::token_count(m, r.input(m).shape(), c);
    const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n)));
    if (k < 1 || k >= n) {
      throw ConfigError("pretrain.mask_ratio " + std::to_string(ratio) + " masks " + std::to_string(k) + " of " +
                        std::to_string(n) + " " + modality_name(m) + " tokens; need at least one masked and one kept");
    }
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.uniform_int(n - i)]);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    plan[index_of(m)] = std::move(idx);
  }
  return plan;
}

// Positional encoding the encoder used for token slot j.
inline Tensor slot_position(Modality m, const Shape& input, const ModelConfig& c, std::size_t j) {
  if (m == Modality::kImg) {
    const std::size_t p = c.encoders.patch_size;
    const std::size_t gw = input[1] / p;
    const Tensor grid = layers::sinusoidal_positions_2d(input[0] / p, gw, c.d_model);
    return Tensor({c.d_model}, std::vector<double>(grid.ptr() + j * c.d_model, grid.ptr() + (j + 1) * c.d_model));
  }
  return layers::sinusoidal_position(j, c.d_model);
}

// Decoder output for the masked slots of one modality: [h ; pos(slot)] through
// a two-layer MLP, one row per slot.
inline Var decode_slots(Graph& g, Modality m, Var fused, const Shape& input, const std::vector<std::size_t>& slots) {
  const ModelConfig& c = g.config();
  const std::size_t n = slots.size(), d = c.d_model;
  Tensor pos({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor row = slot_position(m, input, c, slots[i]);
    std::copy(row.ptr(), row.ptr() + d, pos.ptr() + i * d);
  }
  Var h_rows = ops::matmul(g.constant(Tensor({n, 1}, 1.0)), ops::reshape(fused, {1, d}));
  Var in = ops::concat_cols({h_rows, g.constant(std::move(pos))});
  const std::string pre = std::string("dec.") + modality_name(m);
  return layers::linear(g, ops::gelu(layers::linear(g, in, pre + ".l1")), pre + ".l2");
}

// Original spans of the masked slots, zero-padded to span_width, and the
// matching 0/1 validity weights.
inline std::pair<Tensor, Tensor> slot_targets(Modality m, const Tensor& x, const ModelConfig& c,
                                              const std::vector<std::size_t>& slots) {
  const std::size_t w = encoders::span_width(m, c);
  Tensor target({slots.size(), w}), valid({slots.size(), w});
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto span = encoders::token_span(m, x.shape(), c, slots[i]);
    for (std::size_t e = 0; e < span.size(); ++e) {
      target[i * w + e] = x[span[e]];
      valid[i * w + e] = 1.0;
    }
  }
  return {std::move(target), std::move(valid)};
}

// Sum of weighted squared errors; caller divides by the element count.
inline Var weighted_sse(Graph& g, Var pred, const Tensor& target, const Tensor& valid) {
  Var diff = ops::sub(pred, g.constant(target));
  return ops::sum(ops::mul(ops::square(diff), g.constant(valid)));
}

// Mean squared error over the masked spans of one record.
inline Var reconstruction_loss(Graph& g, const PatientRecord& r, const TokenMaskPlan& plan, Var fused) {
  std::vector<Var> sse;
  double count = 0.0;
  for (Modality m : kAllModalities) {
    const auto& slots = plan[index_of(m)];
    if (!r.mask.has(m) || slots.empty()) continue;
    const Tensor& x = r.input(m);
    auto [target, valid] = slot_targets(m, x, g.config(), slots);
    for (double v : valid.data()) count += v;
    sse.push_back(weighted_sse(g, decode_slots(g, m, fused, x.shape(), slots), target, valid));
  }
  if (sse.empty()) throw ContractError("reconstruction loss with nothing masked");
  Var total = sse[0];
  for (std::size_t i = 1; i < sse.size(); ++i) total = ops::add(total, sse[i]);
  return ops::scale(total, 1.0 / count);
}

// Per-record modality summaries as they enter the contrastive loss.
using SummarySet = std::array<std::optional<Var>, kNumModalities>;

// Symmetric InfoNCE over cosine similarities, averaged over modality pairs
// with at least two records carrying both modalities.
inline Var contrastive_loss(Tape& tape, std::span<const SummarySet> batch, double temperature) {
  std::vector<Var> pair_losses;
  for (std::size_t a = 0; a < kNumModalities; ++a) {
    for (std::size_t b = a + 1; b < kNumModalities; ++b) {
      std::vector<Var> left, right;
      for (const SummarySet& s : batch) {
        if (!s[a] || !s[b]) continue;
        const std::size_t d = s[a]->value().size();
        left.push_back(ops::reshape(*s[a], {1, d}));
        right.push_back(ops::reshape(*s[b], {1, d}));
      }
      if (left.size() < 2) continue;
      Var u = ops::normalize_rows(ops::concat_rows(left));
      Var v = ops::normalize_rows(ops::concat_rows(right));
      Var logits = ops::scale(ops::matmul_nt(u, v), 1.0 / temperature);
      Var forward_ce = ops::scale(ops::mean(ops::diag(ops::log_softmax_lastdim(logits))), -1.0);
      Var backward_ce = ops::scale(ops::mean(ops::diag(ops::log_softmax_lastdim(ops::transpose(logits)))), -1.0);
      pair_losses.push_back(ops::scale(ops::add(forward_ce, backward_ce), 0.5));
    }
  }
  if (pair_losses.empty()) return tape.constant(Tensor::scalar(0.0));
  Var total = pair_losses[0];
  for (std::size_t i = 1; i < pair_losses.size(); ++i) total = ops::add(total, pair_losses[i]);
  return ops::scale(total, 1.0 / static_cast<double>(pair_losses.size()));
}

// Which terms make up a batch objective.
struct ObjectiveSpec {
  bool reconstruction = false;
  double alpha = 0.0;  // contrastive weight; 0 skips the term entirely
  bool detach_contrast = false;
  double temperature = 0.1;
  double mask_ratio = 0.25;
  bool task = false;
  bool training = true;
};

struct ObjectiveValue {
  double reconstruction = 0.0;
  double contrastive = 0.0;
  double task = 0.0;
  double total = 0.0;
  Gradients grads;  // empty unless requested
};

// Evaluates reconstruction + alpha * contrastive + task averaged over the
// batch. Each record runs on its own tape with stream mix_seed(seed, i) (mask
// plan first, then dropout); the contrastive term is computed on a separate
// batch tape whose summary gradients are seeded back into the record tapes.
inline ObjectiveValue evaluate_objective(const Model& model, std::span<const PatientRecord> batch,
                                         const ObjectiveSpec& spec, std::uint64_t seed, bool want_grads) {
  if (batch.empty()) throw ContractError("objective on an empty batch");
  if (!spec.reconstruction && !spec.task && spec.alpha == 0.0) throw ContractError("objective with no terms");
  if (spec.reconstruction && model.config.variant != ModelVariant::kFusion) {
    throw ConfigError("masked reconstruction needs the fusion model");
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const bool use_contrast = spec.alpha != 0.0;
  struct RecordPass {
    std::unique_ptr<Tape> tape;
    std::optional<Var> recon, task;
    SummarySet summaries;
  };
  std::vector<RecordPass> passes(batch.size());
  ObjectiveValue value;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    RecordPass& p = passes[i];
    p.tape = std::make_unique<Tape>();
    Rng rng(mix_seed(seed, i));
    Graph g(*p.tape, model, rng, spec.training);
    std::optional<TokenMaskPlan> plan;
    if (spec.reconstruction) plan = sample_mask_plan(batch[i], model.config, spec.mask_ratio, rng);
    ForwardResult f = forward(g, batch[i], plan ? &*plan : nullptr);
    if (spec.reconstruction) {
      p.recon = reconstruction_loss(g, batch[i], *plan, f.fusion->fused);
      value.reconstruction += p.recon->value().item() * inv_b;
    }
    if (spec.task) {
      p.task = record_task_loss(g, f.logits, batch[i].label);
      value.task += p.task->value().item() * inv_b;
    }
    for (const EncoderOutput& e : f.encodings) p.summaries[index_of(e.modality)] = e.summary;
  }

  // Contrastive term on a batch tape over copies of the summaries.
  std::vector<SummarySet> leaves(batch.size());
  Tape batch_tape;
  std::optional<Var> contrast;
  if (use_contrast) {
    for (std::size_t i = 0; i < batch.size(); ++i)
      for (std::size_t m = 0; m < kNumModalities; ++m)
        if (passes[i].summaries[m]) leaves[i][m] = batch_tape.leaf(passes[i].summaries[m]->value(), true);
    contrast = contrastive_loss(batch_tape, leaves, spec.temperature);
    value.contrastive = contrast->value().item();
  }
  value.total = value.reconstruction + spec.alpha * value.contrastive + value.task;
  if (!want_grads) return value;

  const bool contrast_grads = use_contrast && !spec.detach_contrast && contrast->requires_grad();
  if (contrast_grads) batch_tape.backward(*contrast);
  value.grads = zero_gradients(model.params);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    RecordPass& p = passes[i];
    std::vector<std::pair<Var, Tensor>> seeds;
    if (p.recon) seeds.emplace_back(*p.recon, Tensor::scalar(inv_b));
    if (p.task) seeds.emplace_back(*p.task, Tensor::scalar(inv_b));
    if (contrast_grads) {
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        if (!leaves[i][m] || !leaves[i][m]->grad()) continue;
        Tensor gsum = *leaves[i][m]->grad();
        for (double& v : gsum.data()) v *= spec.alpha;
        seeds.emplace_back(*p.summaries[m], std::move(gsum));
      }
    }
    p.tape->backward(seeds);
    p.tape->accumulate_param_grads(model.params, value.grads);
    p.tape.reset();
  }
  return value;
}

// Batch-mean supervised loss L_task with its gradients.
inline ObjectiveValue supervised_loss(const Model& model, std::span<const PatientRecord> batch, std::uint64_t seed,
                                      bool training, bool want_grads) {
  ObjectiveSpec spec;
  spec.task = true;
  spec.training = training;
  return evaluate_objective(model, batch, spec, seed, want_grads);
}

}  // namespace mmf::objectives

namespace mmf {
using objectives::ObjectiveSpec;
using objectives::ObjectiveValue;
}  // namespace mmf
