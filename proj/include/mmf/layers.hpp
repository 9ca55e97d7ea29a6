#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mmf/model.hpp"
#include "mmf/ops.hpp"

namespace mmf::layers {

inline void add_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                       Rng& rng, bool bias = true) {
  store.add(prefix + ".w", uniform_init({in, out}, in, rng));
  if (bias) store.add(prefix + ".b", uniform_init({out}, in, rng));
}

// x[n x in] * W + b
inline Var linear(Graph& g, Var x, const std::string& prefix, bool bias = true) {
  Var y = ops::matmul(x, g.p(prefix + ".w"));
  return bias ? ops::add(y, g.p(prefix + ".b")) : y;
}

inline void add_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d) {
  store.add(prefix + ".gain", Tensor({d}, 1.0));
  store.add(prefix + ".bias", Tensor({d}, 0.0));
}

inline Var layer_norm(Graph& g, Var x, const std::string& prefix) {
  return ops::layer_norm(x, g.p(prefix + ".gain"), g.p(prefix + ".bias"), g.config().layer_norm_eps);
}

inline void add_attention(ParamStore& store, const std::string& prefix, std::size_t d, Rng& rng) {
  add_linear(store, prefix + ".q", d, d, rng, false);
  add_linear(store, prefix + ".k", d, d, rng, false);
  add_linear(store, prefix + ".v", d, d, rng, false);
  add_linear(store, prefix + ".o", d, d, rng, true);
}

struct AttentionOutput {
  Var out;
  std::vector<Tensor> weights;  // one [n x n] matrix per head
};

// Multi-head scaled dot-product self-attention over the rows of x. Keys with
// key_mask = 0 get exactly zero weight; an empty mask keeps every key.
inline AttentionOutput multi_head_attention(Graph& g, Var x, std::span<const std::uint8_t> key_mask,
                                            const std::string& prefix, bool keep_weights) {
  const std::size_t d = x.value().dim(1);
  const std::size_t heads = g.config().n_heads;
  const std::size_t dk = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  Var q = linear(g, x, prefix + ".q", false);
  Var k = linear(g, x, prefix + ".k", false);
  Var v = linear(g, x, prefix + ".v", false);
  AttentionOutput result;
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ops::slice_cols(q, h * dk, (h + 1) * dk);
    Var kh = heads == 1 ? k : ops::slice_cols(k, h * dk, (h + 1) * dk);
    Var vh = heads == 1 ? v : ops::slice_cols(v, h * dk, (h + 1) * dk);
    Var scores = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt);
    Var attn = ops::softmax_lastdim(scores, key_mask);
    if (keep_weights) result.weights.push_back(attn.value());
    head_out.push_back(ops::matmul(attn, vh));
  }
  Var cat = heads == 1 ? head_out[0] : ops::concat_cols(head_out);
  result.out = linear(g, cat, prefix + ".o", true);
  return result;
}

inline void add_transformer_block(ParamStore& store, const std::string& prefix, std::size_t d,
                                  std::size_t ff, Rng& rng) {
  add_layer_norm(store, prefix + ".ln1", d);
  add_attention(store, prefix + ".attn", d, rng);
  add_layer_norm(store, prefix + ".ln2", d);
  add_linear(store, prefix + ".ff1", d, ff, rng);
  add_linear(store, prefix + ".ff2", ff, d, rng);
}

// Pre-norm residual block: x + Drop(MHA(LN(x))), then x + Drop(FF(LN(x))).
inline Var transformer_block(Graph& g, Var x, std::span<const std::uint8_t> key_mask,
                             const std::string& prefix, std::vector<Tensor>* weights_out = nullptr) {
  AttentionOutput att = multi_head_attention(g, layer_norm(g, x, prefix + ".ln1"), key_mask,
                                             prefix + ".attn", weights_out != nullptr);
  if (weights_out) *weights_out = std::move(att.weights);
  x = ops::add(x, g.dropout(att.out));
  Var hidden = ops::gelu(linear(g, layer_norm(g, x, prefix + ".ln2"), prefix + ".ff1"));
  return ops::add(x, g.dropout(linear(g, hidden, prefix + ".ff2")));
}

// Standard sinusoidal table: even columns sin, odd columns cos.
inline Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
  Tensor pe({n, d});
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      const double a = static_cast<double>(pos) * freq;
      pe[pos * d + i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

// Sinusoidal encoding of a single position.
inline Tensor sinusoidal_position(std::size_t pos, std::size_t d) {
  Tensor row({d});
  for (std::size_t i = 0; i < d; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
    const double a = static_cast<double>(pos) * freq;
    row[i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
  }
  return row;
}

// 2-D grid encoding: first half of the width encodes the row index, second
// half the column index. Positions are enumerated row-major.
inline Tensor sinusoidal_positions_2d(std::size_t rows, std::size_t cols, std::size_t d) {
  const std::size_t half = d / 2;
  Tensor pe({rows * cols, d});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const Tensor pr = sinusoidal_position(r, half);
      const Tensor pc = sinusoidal_position(c, d - half);
      double* dst = pe.ptr() + (r * cols + c) * d;
      std::copy(pr.ptr(), pr.ptr() + half, dst);
      std::copy(pc.ptr(), pc.ptr() + (d - half), dst + half);
    }
  }
  return pe;
}

}  // namespace mmf::layers
