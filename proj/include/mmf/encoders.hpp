#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "mmf/layers.hpp"
#include "mmf/model.hpp"
#include "mmf/ops.hpp"
#include "mmf/record.hpp"

namespace mmf {

// Output of one modality encoder phi_m.
struct EncoderOutput {
  Modality modality = Modality::kEhr;
  Var raw_tokens;     // z^m  [n_m x d_enc]
  Var shared_tokens;  // e^m  [n_m x d_model]
  Var summary;        // mean of e^m rows  [d_model]
};

// Token positions hidden from the encoders, per modality (pretraining only).
using TokenMaskPlan = std::array<std::vector<std::size_t>, kNumModalities>;

namespace encoders {

inline std::string prefix(Modality m) { return std::string("enc.") + modality_name(m); }

// Number of stride-2 pooling stages needed to bring `length` within `budget`.
inline std::size_t pool_stages(std::size_t length, std::size_t budget) {
  std::size_t stages = 0;
  while (length > budget) {
    length = (length + 1) / 2;
    ++stages;
  }
  return stages;
}

inline std::size_t gen_stages(const ModelConfig& c) {
  return pool_stages(c.dims.gen_loci, c.encoders.gen_max_tokens);
}
inline std::size_t sens_stages(const ModelConfig& c) {
  return pool_stages(c.dims.sens_steps, c.encoders.sens_max_tokens);
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Raw input rows covered by one token for sequence modalities.
inline std::size_t rows_per_token(Modality m, const ModelConfig& c) {
  switch (m) {
    case Modality::kEhr: return 1;
    case Modality::kGen: return std::size_t{1} << gen_stages(c);
    case Modality::kSens: return std::size_t{1} << sens_stages(c);
    case Modality::kImg: return c.encoders.patch_size;
  }
  return 1;
}

inline std::size_t token_count(Modality m, const Shape& input, const ModelConfig& c) {
  switch (m) {
    case Modality::kEhr: return input[0];
    case Modality::kImg: return (input[0] / c.encoders.patch_size) * (input[1] / c.encoders.patch_size);
    case Modality::kGen:
    case Modality::kSens: return ceil_div(input[0], rows_per_token(m, c));
  }
  return 0;
}

// Width of the raw input span behind one token (decoder output size).
inline std::size_t span_width(Modality m, const ModelConfig& c) {
  const InputDims& d = c.dims;
  switch (m) {
    case Modality::kEhr: return d.d_ehr;
    case Modality::kImg: return c.encoders.patch_size * c.encoders.patch_size * d.img_channels;
    case Modality::kGen: return rows_per_token(m, c) * d.d_gen;
    case Modality::kSens: return rows_per_token(m, c) * d.d_sens;
  }
  return 0;
}

// Flat indices into the input tensor covered by token `j`, in decoder output
// order. Sequence spans near the end may be shorter than span_width.
inline std::vector<std::size_t> token_span(Modality m, const Shape& input, const ModelConfig& c,
                                           std::size_t j) {
  std::vector<std::size_t> idx;
  if (m == Modality::kImg) {
    const std::size_t p = c.encoders.patch_size, w = input[1], ch = input[2];
    const std::size_t pr = j / (w / p), pc = j % (w / p);
    for (std::size_t dy = 0; dy < p; ++dy)
      for (std::size_t dx = 0; dx < p; ++dx)
        for (std::size_t k = 0; k < ch; ++k) idx.push_back(((pr * p + dy) * w + (pc * p + dx)) * ch + k);
    return idx;
  }
  const std::size_t rows = rows_per_token(m, c), width = input[1];
  const std::size_t b = j * rows, e = std::min(input[0], b + rows);
  for (std::size_t r = b; r < e; ++r)
    for (std::size_t k = 0; k < width; ++k) idx.push_back(r * width + k);
  return idx;
}

inline void add_params(ParamStore& store, Modality m, const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.d_model;
  const std::string pre = prefix(m);
  const InputDims& dims = c.dims;
  switch (m) {
    case Modality::kEhr:
      layers::add_linear(store, pre + ".embed", dims.d_ehr, d, rng);
      store.add(pre + ".mask", uniform_init({d}, d, rng));
      for (std::size_t b = 0; b < c.encoders.ehr_blocks; ++b)
        layers::add_transformer_block(store, pre + ".block" + std::to_string(b), d, c.ff_width, rng);
      break;
    case Modality::kImg: {
      const std::size_t p = c.encoders.patch_size;
      layers::add_linear(store, pre + ".embed", p * p * dims.img_channels, d, rng);
      store.add(pre + ".mask", uniform_init({d}, d, rng));
      for (std::size_t b = 0; b < c.encoders.img_blocks; ++b)
        layers::add_transformer_block(store, pre + ".block" + std::to_string(b), d, c.ff_width, rng);
      break;
    }
    case Modality::kGen: {
      store.add(pre + ".mask", uniform_init({dims.d_gen}, dims.d_gen, rng));
      const std::size_t convs = std::max<std::size_t>(1, gen_stages(c));
      std::size_t cin = dims.d_gen;
      for (std::size_t s = 0; s < convs; ++s) {
        const auto& ch = c.encoders.gen_channels;
        const std::size_t cout = ch[std::min(s, ch.size() - 1)];
        const std::size_t k = c.encoders.gen_kernel;
        store.add(pre + ".conv" + std::to_string(s) + ".w", uniform_init({k, cin, cout}, k * cin, rng));
        store.add(pre + ".conv" + std::to_string(s) + ".b", uniform_init({cout}, k * cin, rng));
        cin = cout;
      }
      layers::add_linear(store, pre + ".proj", cin, d, rng);
      break;
    }
    case Modality::kSens: {
      store.add(pre + ".mask", uniform_init({dims.d_sens}, dims.d_sens, rng));
      std::size_t cin = dims.d_sens;
      const std::size_t k = c.encoders.sens_kernel, cout = c.encoders.sens_channels;
      for (std::size_t s = 0; s < c.encoders.sens_dilations.size(); ++s) {
        store.add(pre + ".conv" + std::to_string(s) + ".w", uniform_init({k, cin, cout}, k * cin, rng));
        store.add(pre + ".conv" + std::to_string(s) + ".b", uniform_init({cout}, k * cin, rng));
        cin = cout;
      }
      layers::add_linear(store, pre + ".proj", cin, d, rng);
      break;
    }
  }
  store.add(pre + ".modality", uniform_init({d}, d, rng));
}

namespace detail {

// Copy of x with the masked token spans zeroed, and the per-row indicator of
// masked rows (for row-wise mask embeddings).
inline Tensor zero_spans(Modality m, const Tensor& x, const ModelConfig& c,
                         const std::vector<std::size_t>& tokens) {
  Tensor out = x;
  for (std::size_t j : tokens)
    for (std::size_t i : token_span(m, x.shape(), c, j)) out[i] = 0.0;
  return out;
}

// [rows x 1] column with 1 at the listed rows.
inline Tensor indicator(std::size_t rows, const std::vector<std::size_t>& at) {
  Tensor t({rows, 1});
  for (std::size_t r : at) t[r] = 1.0;
  return t;
}

// Adds the vector parameter `name` to the listed rows of x.
inline Var add_at_rows(Graph& g, Var x, const std::string& name, const std::vector<std::size_t>& rows) {
  if (rows.empty()) return x;
  Var v = g.p(name);
  const std::size_t width = v.value().size();
  Var ind = g.constant(indicator(x.value().dim(0), rows));
  return ops::add(x, ops::matmul(ind, ops::reshape(v, {1, width})));
}

// Rows of the raw sequence input that belong to masked tokens.
inline std::vector<std::size_t> masked_rows(Modality m, std::size_t len, const ModelConfig& c,
                                            const std::vector<std::size_t>& tokens) {
  std::vector<std::size_t> rows;
  const std::size_t per = rows_per_token(m, c);
  for (std::size_t j : tokens)
    for (std::size_t r = j * per; r < std::min(len, (j + 1) * per); ++r) rows.push_back(r);
  return rows;
}

inline EncoderOutput finish(Graph& g, Modality m, Var raw, Var shared_base) {
  EncoderOutput out;
  out.modality = m;
  out.raw_tokens = raw;
  out.shared_tokens = ops::add(shared_base, g.p(prefix(m) + ".modality"));
  out.summary = ops::mean_pool(out.shared_tokens);
  return out;
}

}  // namespace detail

// Shared-space projection z^m -> e^m for a given raw token matrix.
inline Var to_shared(Graph& g, Modality m, Var raw) {
  Var base = (m == Modality::kGen || m == Modality::kSens) ? layers::linear(g, raw, prefix(m) + ".proj") : raw;
  return ops::add(base, g.p(prefix(m) + ".modality"));
}

inline EncoderOutput encode_ehr(Graph& g, const Tensor& x, const std::vector<std::size_t>& masked = {}) {
  const ModelConfig& c = g.config();
  if (x.empty() || x.rank() != 2) throw EmptyModalityError("ehr input has no visits");
  if (x.dim(0) > c.encoders.max_visits) {
    throw DimensionError("ehr input has " + std::to_string(x.dim(0)) + " visits, limit is " +
                         std::to_string(c.encoders.max_visits));
  }
  const std::string pre = prefix(Modality::kEhr);
  Var in = g.constant(masked.empty() ? x : detail::zero_spans(Modality::kEhr, x, c, masked));
  Var h = layers::linear(g, in, pre + ".embed");
  h = detail::add_at_rows(g, h, pre + ".mask", masked);
  h = ops::add(h, g.constant(layers::sinusoidal_positions(x.dim(0), c.d_model)));
  for (std::size_t b = 0; b < c.encoders.ehr_blocks; ++b)
    h = layers::transformer_block(g, h, {}, pre + ".block" + std::to_string(b));
  return detail::finish(g, Modality::kEhr, h, h);
}

// Non-overlapping p x p patches, each flattened as (dy, dx, channel).
inline Tensor extract_patches(const Tensor& img, std::size_t p) {
  const std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  if (h % p != 0 || w % p != 0) {
    throw PatchingError("image " + shape_str(img.shape()) + " is not divisible by patch size p=" +
                        std::to_string(p));
  }
  const std::size_t gh = h / p, gw = w / p, width = p * p * ch;
  Tensor out({gh * gw, width});
  for (std::size_t pr = 0; pr < gh; ++pr)
    for (std::size_t pc = 0; pc < gw; ++pc)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t k = 0; k < ch; ++k)
            out[(pr * gw + pc) * width + (dy * p + dx) * ch + k] = img[((pr * p + dy) * w + pc * p + dx) * ch + k];
  return out;
}

inline EncoderOutput encode_img(Graph& g, const Tensor& x, const std::vector<std::size_t>& masked = {}) {
  const ModelConfig& c = g.config();
  if (x.empty() || x.rank() != 3) throw DimensionError("img input must be [H x W x C], got " + shape_str(x.shape()));
  const std::size_t p = c.encoders.patch_size;
  const std::string pre = prefix(Modality::kImg);
  const Tensor src = masked.empty() ? x : detail::zero_spans(Modality::kImg, x, c, masked);
  Var h = layers::linear(g, g.constant(extract_patches(src, p)), pre + ".embed");
  h = detail::add_at_rows(g, h, pre + ".mask", masked);
  h = ops::add(h, g.constant(layers::sinusoidal_positions_2d(x.dim(0) / p, x.dim(1) / p, c.d_model)));
  for (std::size_t b = 0; b < c.encoders.img_blocks; ++b)
    h = layers::transformer_block(g, h, {}, pre + ".block" + std::to_string(b));
  return detail::finish(g, Modality::kImg, h, h);
}

inline EncoderOutput encode_gen(Graph& g, const Tensor& x, const std::vector<std::size_t>& masked = {}) {
  const ModelConfig& c = g.config();
  if (x.empty() || x.rank() != 2) throw DimensionError("gen input must be [L x d_gen]");
  if (x.dim(0) < c.encoders.gen_kernel) {
    throw DimensionError("gen sequence of length " + std::to_string(x.dim(0)) +
                         " is shorter than kernel width " + std::to_string(c.encoders.gen_kernel));
  }
  const std::string pre = prefix(Modality::kGen);
  Var h = g.constant(masked.empty() ? x : detail::zero_spans(Modality::kGen, x, c, masked));
  h = detail::add_at_rows(g, h, pre + ".mask", detail::masked_rows(Modality::kGen, x.dim(0), c, masked));
  const std::size_t stages = gen_stages(c);
  const std::size_t convs = std::max<std::size_t>(1, stages);
  for (std::size_t s = 0; s < convs; ++s) {
    const std::string cp = pre + ".conv" + std::to_string(s);
    h = g.dropout(ops::gelu(ops::conv1d(h, g.p(cp + ".w"), g.p(cp + ".b"))));
    if (s < stages) h = ops::avg_pool_rows(h, 2);
  }
  return detail::finish(g, Modality::kGen, h, layers::linear(g, h, pre + ".proj"));
}

inline EncoderOutput encode_sens(Graph& g, const Tensor& x, const std::vector<std::size_t>& masked = {}) {
  const ModelConfig& c = g.config();
  if (x.empty() || x.rank() != 2) throw DimensionError("sens input must be [T_s x d_sens]");
  if (x.dim(0) < 8) throw DimensionError("sens sequence of length " + std::to_string(x.dim(0)) + " is shorter than 8");
  const std::string pre = prefix(Modality::kSens);
  Var h = g.constant(masked.empty() ? x : detail::zero_spans(Modality::kSens, x, c, masked));
  h = detail::add_at_rows(g, h, pre + ".mask", detail::masked_rows(Modality::kSens, x.dim(0), c, masked));
  const auto& dil = c.encoders.sens_dilations;
  for (std::size_t s = 0; s < dil.size(); ++s) {
    const std::string cp = pre + ".conv" + std::to_string(s);
    h = g.dropout(ops::gelu(ops::conv1d(h, g.p(cp + ".w"), g.p(cp + ".b"), 1, dil[s])));
  }
  for (std::size_t s = 0; s < sens_stages(c); ++s) h = ops::avg_pool_rows(h, 2);
  return detail::finish(g, Modality::kSens, h, layers::linear(g, h, pre + ".proj"));
}

inline EncoderOutput encode(Graph& g, Modality m, const Tensor& x, const std::vector<std::size_t>& masked = {}) {
  switch (m) {
    case Modality::kEhr: return encode_ehr(g, x, masked);
    case Modality::kImg: return encode_img(g, x, masked);
    case Modality::kGen: return encode_gen(g, x, masked);
    case Modality::kSens: return encode_sens(g, x, masked);
  }
  throw ContractError("unknown modality");
}

// One output per present modality, in canonical order (ehr, img, gen, sens).
inline std::vector<EncoderOutput> encode_all(Graph& g, const PatientRecord& r, const TokenMaskPlan* plan = nullptr) {
  if (!r.mask.any()) throw EmptyRecordError("record has no modality present");
  std::vector<EncoderOutput> out;
  for (Modality m : kAllModalities) {
    if (!r.mask.has(m)) continue;
    static const std::vector<std::size_t> kNone;
    out.push_back(encode(g, m, r.input(m), plan ? (*plan)[index_of(m)] : kNone));
  }
  return out;
}

}  // namespace encoders
}  // namespace mmf
