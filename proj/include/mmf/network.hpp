#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mmf/encoders.hpp"
#include "mmf/fusion.hpp"
#include "mmf/layers.hpp"
#include "mmf/model.hpp"
#include "mmf/record.hpp"

namespace mmf {

inline Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model model;
  model.config = config;
  Rng rng(seed);
  ParamStore& store = model.params;
  const std::size_t d = config.d_model;
  switch (config.variant) {
    case ModelVariant::kFusion:
      for (Modality m : kAllModalities) encoders::add_params(store, m, config, rng);
      fusion::add_params(store, config, rng);
      layers::add_linear(store, "head", d, config.num_classes, rng);
      for (Modality m : kAllModalities) {
        const std::string pre = std::string("dec.") + modality_name(m);
        layers::add_linear(store, pre + ".l1", 2 * d, config.decoder_hidden, rng);
        layers::add_linear(store, pre + ".l2", config.decoder_hidden, encoders::span_width(m, config), rng);
      }
      break;
    case ModelVariant::kUnimodal:
      encoders::add_params(store, config.unimodal, config, rng);
      layers::add_linear(store, "head", d, config.num_classes, rng);
      break;
    case ModelVariant::kConcat:
      for (Modality m : kAllModalities) encoders::add_params(store, m, config, rng);
      layers::add_linear(store, "head", kNumModalities * d, config.num_classes, rng);
      break;
  }
  return model;
}

struct ForwardResult {
  Var logits;  // [K]
  std::vector<EncoderOutput> encodings;
  std::optional<FusionResult> fusion;
};

inline Var head_logits(Graph& g, Var features) {
  const std::size_t width = features.value().size();
  Var row = ops::reshape(features, {1, width});
  return ops::reshape(layers::linear(g, row, "head"), {g.config().num_classes});
}

// Full forward pass to class logits for any model variant. `plan` hides token
// spans from the encoders (pretraining).
inline ForwardResult forward(Graph& g, const PatientRecord& record, const TokenMaskPlan* plan = nullptr,
                             FusionPath path = FusionPath::kRemove) {
  const ModelConfig& c = g.config();
  ForwardResult out;
  switch (c.variant) {
    case ModelVariant::kFusion: {
      if (path == FusionPath::kRemove) {
        out.encodings = encoders::encode_all(g, record, plan);
      } else {
        // Encode every tensor the record carries, then mask keys.
        PatientRecord all = record;
        for (Modality m : kAllModalities) all.mask.set(m, record.inputs[index_of(m)].has_value());
        out.encodings = encoders::encode_all(g, all, plan);
      }
      out.fusion = fusion::fuse(g, out.encodings, record.mask, path);
      out.logits = head_logits(g, out.fusion->fused);
      break;
    }
    case ModelVariant::kUnimodal: {
      if (!record.mask.has(c.unimodal)) {
        throw EmptyRecordError(std::string("unimodal model needs ") + modality_name(c.unimodal));
      }
      static const std::vector<std::size_t> kNone;
      out.encodings.push_back(encoders::encode(g, c.unimodal, record.input(c.unimodal),
                                               plan ? (*plan)[index_of(c.unimodal)] : kNone));
      out.logits = head_logits(g, out.encodings[0].summary);
      break;
    }
    case ModelVariant::kConcat: {
      out.encodings = encoders::encode_all(g, record, plan);
      std::vector<Var> parts;
      std::size_t next = 0;
      for (Modality m : kAllModalities) {
        if (next < out.encodings.size() && out.encodings[next].modality == m) {
          parts.push_back(ops::reshape(out.encodings[next++].summary, {1, c.d_model}));
        } else {
          parts.push_back(g.constant(Tensor({1, c.d_model}, 0.0)));
        }
      }
      out.logits = head_logits(g, ops::concat_cols(parts));
      break;
    }
  }
  return out;
}

// Class probabilities from logits: independent sigmoids (multi-label) or a
// softmax (single-label head).
inline Tensor probabilities(const Tensor& logits, HeadKind head) {
  Tensor p(logits.shape());
  if (head == HeadKind::kMultiLabel) {
    for (std::size_t i = 0; i < logits.size(); ++i) p[i] = ops::detail::sigmoid(logits[i]);
    return p;
  }
  double mx = logits[0];
  for (double v : logits.data()) mx = std::max(mx, v);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p.data()) v /= s;
  return p;
}

}  // namespace mmf
