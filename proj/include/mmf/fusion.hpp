#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmf/encoders.hpp"
#include "mmf/layers.hpp"
#include "mmf/record.hpp"

namespace mmf {

inline constexpr int kFuseToken = -1;

// Attention weights of every fusion layer and head, [layer][head] -> [n x n]
// (query row, key column), plus the modality tag of each token position.
struct FusionTrace {
  std::vector<std::vector<Tensor>> weights;
  std::vector<int> token_modality;  // kFuseToken or index_of(Modality)
};

struct FusionResult {
  Var fused;  // h^fusion [d_model]
  FusionTrace trace;
};

struct TokenSet {
  Var tokens;                         // [(1 + sum n_m) x d_model]
  std::vector<int> token_modality;    // kFuseToken for the readout token
  std::vector<std::uint8_t> key_mask; // empty = every key visible
};

// How absent modalities are kept out of attention: removed from the token set
// (the production path) or kept as tokens whose keys are masked.
enum class FusionPath { kRemove, kKeyMask };

namespace fusion {

inline void add_params(ParamStore& store, const ModelConfig& c, Rng& rng) {
  store.add("fusion.fuse_token", uniform_init({c.d_model}, c.d_model, rng));
  for (std::size_t l = 0; l < c.fusion_layers; ++l)
    layers::add_transformer_block(store, "fusion.layer" + std::to_string(l), c.d_model, c.ff_width, rng);
}

namespace detail {

inline TokenSet assemble(Graph& g, std::span<const EncoderOutput> encs) {
  const std::size_t d = g.config().d_model;
  TokenSet set;
  std::vector<Var> blocks;
  blocks.push_back(ops::reshape(g.p("fusion.fuse_token"), {1, d}));
  set.token_modality.push_back(kFuseToken);
  for (const EncoderOutput& e : encs) {
    blocks.push_back(e.shared_tokens);
    set.token_modality.insert(set.token_modality.end(), e.shared_tokens.value().dim(0),
                              static_cast<int>(index_of(e.modality)));
  }
  set.tokens = ops::concat_rows(blocks);
  return set;
}

inline ModalityMask modalities_of(std::span<const EncoderOutput> encs) {
  ModalityMask seen;
  for (const EncoderOutput& e : encs) {
    if (seen.has(e.modality)) {
      throw ConsistencyError(std::string("modality ") + modality_name(e.modality) + " encoded twice");
    }
    seen.set(e.modality, true);
  }
  return seen;
}

}  // namespace detail

// FUSE token followed by each encoding's shared tokens in list order. The
// encodings must cover exactly the modalities set in `mask`.
inline TokenSet build_token_set(Graph& g, std::span<const EncoderOutput> encs, const ModalityMask& mask) {
  if (!mask.any()) throw EmptyRecordError("no modality available for fusion");
  const ModalityMask seen = detail::modalities_of(encs);
  if (!(seen == mask)) {
    throw ConsistencyError("encodings cover {" + seen.to_string() + "} but mask is {" + mask.to_string() + "}");
  }
  return detail::assemble(g, encs);
}

// Keeps every encoding as tokens but masks keys of modalities whose mask bit
// is clear.
inline TokenSet build_masked_token_set(Graph& g, std::span<const EncoderOutput> encs, const ModalityMask& mask) {
  if (!mask.any()) throw EmptyRecordError("no modality available for fusion");
  const ModalityMask seen = detail::modalities_of(encs);
  if (!((seen & mask) == mask)) {
    throw ConsistencyError("mask {" + mask.to_string() + "} names modalities without encodings {" +
                           seen.to_string() + "}");
  }
  TokenSet set = detail::assemble(g, encs);
  set.key_mask.reserve(set.token_modality.size());
  for (int tag : set.token_modality)
    set.key_mask.push_back(tag == kFuseToken || mask.has(static_cast<Modality>(tag)) ? 1 : 0);
  return set;
}

inline Var fusion_layer(Graph& g, Var tokens, std::span<const std::uint8_t> key_mask, std::size_t layer,
                        std::vector<Tensor>* weights_out) {
  return layers::transformer_block(g, tokens, key_mask, "fusion.layer" + std::to_string(layer), weights_out);
}

inline FusionResult fuse_tokens(Graph& g, const TokenSet& set) {
  const ModelConfig& c = g.config();
  FusionResult result;
  result.trace.token_modality = set.token_modality;
  Var h = set.tokens;
  for (std::size_t l = 0; l < c.fusion_layers; ++l) {
    std::vector<Tensor> weights;
    h = fusion_layer(g, h, set.key_mask, l, &weights);
    result.trace.weights.push_back(std::move(weights));
  }
  result.fused = ops::reshape(ops::slice_rows(h, 0, 1), {c.d_model});
  return result;
}

inline FusionResult fuse(Graph& g, std::span<const EncoderOutput> encs, const ModalityMask& mask,
                         FusionPath path = FusionPath::kRemove) {
  return fuse_tokens(g, path == FusionPath::kRemove ? build_token_set(g, encs, mask)
                                                    : build_masked_token_set(g, encs, mask));
}

// Clears each set bit with probability p_md; if every bit was cleared, one of
// the originally set bits is restored uniformly at random.
inline ModalityMask modality_dropout(const ModalityMask& mask, double p_md, Rng& rng) {
  if (!mask.any()) throw EmptyRecordError("modality dropout on an empty mask");
  if (p_md <= 0.0) return mask;
  ModalityMask out = mask;
  std::vector<Modality> set_bits;
  for (Modality m : kAllModalities) {
    if (!mask.has(m)) continue;
    set_bits.push_back(m);
    if (rng.uniform() < p_md) out.set(m, false);
  }
  if (!out.any()) out.set(set_bits[rng.uniform_int(set_bits.size())], true);
  return out;
}

}  // namespace fusion
}  // namespace mmf
