#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mmf/autodiff.hpp"
#include "mmf/error.hpp"
#include "mmf/rng.hpp"
#include "mmf/tensor.hpp"

// Differentiable operations on tape variables. Every op computes its value
// eagerly and registers a backward rule that accumulates into operand grads.
namespace mmf::ops {

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) axpy(ai[p], b + p * n, ci, n);
  }
}

// C[m x n] += A[m x k] * B[n x k]^T. B is transposed into scratch first so the
// inner loop is a contiguous axpy.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy(ai[p], bi, c + p * n, n);
  }
}

inline Tape* tape_of(const Var& a) {
  if (!a.valid()) throw DimensionError("operation on an empty variable");
  return a.tape();
}

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (!v.valid() || v.value().empty()) throw DimensionError(std::string(op) + ": empty input");
  if (v.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(v.shape()));
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Applies an elementwise function with derivative d(x, y) in terms of input x
// and output y.
template <typename F, typename D>
Var unary(Var x, F f, D d) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::uint32_t ix = x.id();
  return tape_of(x)->record(std::move(out), {x}, [ix, d](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d(xv[i], yv[i]);
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  detail::gemm_nn(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
  const std::uint32_t ia = a.id(), ib = b.id();
  return detail::tape_of(a)->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    if (t.requires_grad(ia)) detail::gemm_nt(g.ptr(), t.value(ib).ptr(), t.grad_buffer(ia).ptr(), m, n, k);
    if (t.requires_grad(ib)) detail::gemm_tn(t.value(ia).ptr(), g.ptr(), t.grad_buffer(ib).ptr(), m, k, n);
  });
}

// a[m x k] * b[n x k]^T without materializing the transpose.
inline Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw DimensionError("matmul_nt: cannot multiply " + shape_str(av.shape()) +
                         " by transpose of " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor out({m, n});
  detail::gemm_nt(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
  const std::uint32_t ia = a.id(), ib = b.id();
  return detail::tape_of(a)->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    if (t.requires_grad(ia)) detail::gemm_nn(g.ptr(), t.value(ib).ptr(), t.grad_buffer(ia).ptr(), m, n, k);
    if (t.requires_grad(ib)) detail::gemm_tn(g.ptr(), t.value(ia).ptr(), t.grad_buffer(ib).ptr(), m, n, k);
  });
}

inline Var transpose(Var x) {
  detail::require_rank(x, 2, "transpose");
  const Tensor& xv = x.value();
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, m, n](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

inline Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.value().size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out = x.value().reshaped(std::move(shape));
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// Elementwise sum. `b` may also be a vector matching the last dimension of
// `a`, in which case it is broadcast over rows.
inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool broadcast = av.shape() != bv.shape() && bv.rank() == 1 && av.rank() >= 2 &&
                         bv.dim(0) == av.cols();
  if (!broadcast) detail::require_same_shape(a, b, "add");
  Tensor out = av;
  const std::size_t n = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[broadcast ? i % n : i];
  const std::uint32_t ia = a.id(), ib = b.id();
  return detail::tape_of(a)->record(std::move(out), {a, b}, [ia, ib, n, broadcast](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[broadcast ? i % n : i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::uint32_t ia = a.id(), ib = b.id();
  return detail::tape_of(a)->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::uint32_t ia = a.id(), ib = b.id();
  return detail::tape_of(a)->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= c;
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, c](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

inline Var square(Var x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var sigmoid(Var x) {
  return detail::unary(x, detail::sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(Var x) {
  return detail::unary(x, detail::softplus, [](double v, double) { return detail::sigmoid(v); });
}

// Exact (erf-based) GELU.
inline Var gelu(Var x) {
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(Tensor::scalar(s), {x}, [ix](Tape& t, std::uint32_t self) {
    const double g = (*t.grad(self))[0];
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// Mean over rows: [n x d] -> [d].
inline Var mean_pool(Var x) {
  detail::require_rank(x, 2, "mean_pool");
  const Tensor& xv = x.value();
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  Tensor out({d});
  for (std::size_t i = 0; i < n; ++i) detail::axpy(1.0, xv.ptr() + i * d, out.ptr(), d);
  for (double& v : out.data()) v /= static_cast<double>(n);
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, n, d](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(ix);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) detail::axpy(inv, g.ptr(), gx.ptr() + i * d, d);
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.value().cols() != d) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.value().rows();
  }
  Tensor out({rows, d});
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().ptr(), p.value().ptr() + p.value().size(), out.ptr() + off);
    off += p.value().size();
    ids.push_back(p.id());
  }
  return detail::tape_of(parts[0])->record(std::move(out), parts, [ids](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    std::size_t off = 0;
    for (std::uint32_t id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) detail::axpy(1.0, g.ptr() + off, t.grad_buffer(id).ptr(), n);
      off += n;
    }
  });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].value().dim(0);
  std::size_t cols = 0;
  for (const Var& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.value().dim(0) != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    cols += p.value().dim(1);
  }
  Tensor out({m, cols});
  std::vector<std::uint32_t> ids;
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    const std::size_t w = pv.dim(1);
    for (std::size_t i = 0; i < m; ++i) std::copy(pv.ptr() + i * w, pv.ptr() + (i + 1) * w, out.ptr() + i * cols + c0);
    c0 += w;
    ids.push_back(p.id());
  }
  return detail::tape_of(parts[0])->record(std::move(out), parts, [ids, m, cols](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    std::size_t c0 = 0;
    for (std::uint32_t id : ids) {
      const std::size_t w = t.value(id).dim(1);
      if (t.requires_grad(id)) {
        Tensor& gp = t.grad_buffer(id);
        for (std::size_t i = 0; i < m; ++i) detail::axpy(1.0, g.ptr() + i * cols + c0, gp.ptr() + i * w, w);
      }
      c0 += w;
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

// Rows [begin, end) of a matrix.
inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  const Tensor& xv = x.value();
  if (begin >= end || end > xv.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(xv.shape()));
  }
  const std::size_t d = xv.dim(1);
  Tensor out({end - begin, d}, std::vector<double>(xv.ptr() + begin * d, xv.ptr() + end * d));
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, begin, d](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    detail::axpy(1.0, g.ptr(), t.grad_buffer(ix).ptr() + begin * d, g.size());
  });
}

// Columns [begin, end) of a matrix.
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_cols");
  const Tensor& xv = x.value();
  if (begin >= end || end > xv.dim(1)) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(xv.shape()));
  }
  const std::size_t m = xv.dim(0), n = xv.dim(1), w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy(xv.ptr() + i * n + begin, xv.ptr() + i * n + end, out.ptr() + i * w);
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, begin, m, n, w](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i) detail::axpy(1.0, g.ptr() + i * w, gx.ptr() + i * n + begin, w);
  });
}

// Rows of `table` gathered by index.
inline Var embedding_lookup(Var table, std::span<const std::size_t> indices) {
  detail::require_rank(table, 2, "embedding_lookup");
  const Tensor& tv = table.value();
  if (indices.empty()) throw DimensionError("embedding_lookup: no indices");
  const std::size_t d = tv.dim(1);
  Tensor out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.dim(0)) {
      throw DimensionError("embedding_lookup: index " + std::to_string(indices[i]) +
                           " out of range for " + shape_str(tv.shape()));
    }
    std::copy(tv.ptr() + indices[i] * d, tv.ptr() + (indices[i] + 1) * d, out.ptr() + i * d);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::uint32_t it = table.id();
  return detail::tape_of(table)->record(std::move(out), {table}, [it, idx, d](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gt = t.grad_buffer(it);
    for (std::size_t i = 0; i < idx.size(); ++i) detail::axpy(1.0, g.ptr() + i * d, gt.ptr() + idx[i] * d, d);
  });
}

// Rows of x whose flag is set.
inline Var masked_select(Var x, std::span<const std::uint8_t> row_mask) {
  detail::require_rank(x, 2, "masked_select");
  if (row_mask.size() != x.value().dim(0)) {
    throw DimensionError("masked_select: mask length " + std::to_string(row_mask.size()) +
                         " for " + shape_str(x.shape()));
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < row_mask.size(); ++i)
    if (row_mask[i]) idx.push_back(i);
  if (idx.empty()) throw DimensionError("masked_select: no rows selected");
  return embedding_lookup(x, idx);
}

// Diagonal of a square matrix.
inline Var diag(Var x) {
  detail::require_rank(x, 2, "diag");
  const Tensor& xv = x.value();
  const std::size_t n = xv.dim(0);
  if (xv.dim(1) != n) throw DimensionError("diag: non-square " + shape_str(xv.shape()));
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i * n + i];
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, n](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < n; ++i) gx[i * n + i] += g[i];
  });
}

inline constexpr double kMaskedLogit = -1e30;

// Softmax over the last dimension. `mask` (1 = keep) either matches x
// elementwise or has one entry per column, broadcast over rows.
inline Var softmax_lastdim(Var x, std::span<const std::uint8_t> mask = {}) {
  const Tensor& xv = x.value();
  if (xv.empty()) throw DimensionError("softmax_lastdim: empty input");
  const std::size_t n = xv.cols(), rows = xv.rows();
  const bool per_col = !mask.empty() && mask.size() == n && mask.size() != xv.size();
  if (!mask.empty() && !per_col && mask.size() != xv.size()) {
    throw DimensionError("softmax_lastdim: mask of length " + std::to_string(mask.size()) +
                         " for " + shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  std::vector<double> z(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * n;
    double* yr = out.ptr() + r * n;
    bool any = mask.empty();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const bool keep = mask.empty() || mask[per_col ? j : r * n + j];
      any = any || keep;
      z[j] = keep ? xr[j] : xr[j] + kMaskedLogit;
      mx = std::max(mx, z[j]);
    }
    if (!any) throw InvalidMaskError("softmax_lastdim: row " + std::to_string(r) + " is fully masked");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(z[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
  }
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, n, rows](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.ptr() + r * n;
      const double* yr = y.ptr() + r * n;
      const double s = detail::dot(gr, yr, n);
      double* out = gx.ptr() + r * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - s);
    }
  });
}

inline Var log_softmax_lastdim(Var x) {
  const Tensor& xv = x.value();
  if (xv.empty()) throw DimensionError("log_softmax_lastdim: empty input");
  const std::size_t n = xv.cols(), rows = xv.rows();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xr[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] - lse;
  }
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, n, rows](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
    }
  });
}

// Per-row normalization over the last dimension, then affine transform.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const Tensor& xv = x.value();
  if (xv.empty()) throw DimensionError("layer_norm: empty input");
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (d < 2) throw DimensionError("layer_norm: degenerate normalization over d=" + std::to_string(d));
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " for width " + std::to_string(d));
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const std::uint32_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return detail::tape_of(x)->record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::uint32_t self) {
        const Tensor& g = *t.grad(self);
        const Tensor& gv = t.value(ig);
        if (t.requires_grad(ix)) {
          Tensor& gx = t.grad_buffer(ix);
          std::vector<double> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = g[r * d + j] * gv[j];
              m1 += dh[j];
              m2 += dh[j] * xhat[r * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += rstd[r] * (dh[j] - m1 - xhat[r * d + j] * m2);
          }
        }
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad_buffer(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r) detail::axpy(1.0, g.ptr() + r * d, gb.ptr(), d);
        }
      });
}

// Inverted dropout. Identity (the same variable) when not training or rate 0.
inline Var dropout(Var x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const Tensor& xv = x.value();
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> m(xv.size());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    m[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = xv[i] * m[i];
  }
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, m = std::move(m)](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * m[i];
  });
}

// 1-D cross-correlation with "same" zero padding.
// x: [L x C_in], kernel: [K x C_in x C_out], bias: [C_out] (optional).
// Output length is ceil(L / stride).
inline Var conv1d(Var x, Var kernel, Var bias, std::size_t stride = 1, std::size_t dilation = 1) {
  if (!x.valid() || x.value().empty()) throw DimensionError("conv1d: empty input");
  detail::require_rank(x, 2, "conv1d");
  detail::require_rank(kernel, 3, "conv1d kernel");
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  const std::size_t len = xv.dim(0), cin = xv.dim(1);
  const std::size_t taps = kv.dim(0), cout = kv.dim(2);
  if (kv.dim(1) != cin) {
    throw DimensionError("conv1d: kernel " + shape_str(kv.shape()) + " for input " + shape_str(xv.shape()));
  }
  if (stride == 0 || dilation == 0) throw ParameterError("conv1d: stride and dilation must be positive");
  const bool has_bias = bias.valid();
  if (has_bias && bias.shape() != Shape{cout}) {
    throw DimensionError("conv1d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " channels");
  }
  const std::size_t span = dilation * (taps - 1);
  const std::ptrdiff_t pad_left = static_cast<std::ptrdiff_t>(span / 2);
  const std::size_t out_len = (len + stride - 1) / stride;
  Tensor out({out_len, cout});
  for (std::size_t o = 0; o < out_len; ++o) {
    double* orow = out.ptr() + o * cout;
    if (has_bias) std::copy(bias.value().ptr(), bias.value().ptr() + cout, orow);
    for (std::size_t k = 0; k < taps; ++k) {
      const std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(o * stride + k * dilation) - pad_left;
      if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(len)) continue;
      const double* xr = xv.ptr() + idx * cin;
      for (std::size_t ci = 0; ci < cin; ++ci) detail::axpy(xr[ci], kv.ptr() + (k * cin + ci) * cout, orow, cout);
    }
  }
  std::vector<Var> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  const std::uint32_t ix = x.id(), ik = kernel.id(), ibias = has_bias ? bias.id() : 0;
  return detail::tape_of(x)->record(
      std::move(out), inputs,
      [=](Tape& t, std::uint32_t self) {
        const Tensor& g = *t.grad(self);
        const Tensor& xv = t.value(ix);
        const Tensor& kv = t.value(ik);
        const bool gx_on = t.requires_grad(ix), gk_on = t.requires_grad(ik);
        double* gx = gx_on ? t.grad_buffer(ix).ptr() : nullptr;
        double* gk = gk_on ? t.grad_buffer(ik).ptr() : nullptr;
        for (std::size_t o = 0; o < out_len; ++o) {
          const double* grow = g.ptr() + o * cout;
          for (std::size_t k = 0; k < taps; ++k) {
            const std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(o * stride + k * dilation) - pad_left;
            if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(len)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const std::size_t w = (k * cin + ci) * cout;
              if (gx_on) gx[idx * cin + ci] += detail::dot(grow, kv.ptr() + w, cout);
              if (gk_on) detail::axpy(xv[idx * cin + ci], grow, gk + w, cout);
            }
          }
        }
        if (has_bias && t.requires_grad(ibias)) {
          Tensor& gb = t.grad_buffer(ibias);
          for (std::size_t o = 0; o < out_len; ++o) detail::axpy(1.0, g.ptr() + o * cout, gb.ptr(), cout);
        }
      });
}

// 2-D cross-correlation with "same" zero padding.
// x: [H x W x C_in], kernel: [KH x KW x C_in x C_out], bias: [C_out] (optional).
inline Var conv2d(Var x, Var kernel, Var bias, std::size_t stride = 1) {
  if (!x.valid() || x.value().empty()) throw DimensionError("conv2d: empty input");
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(kernel, 4, "conv2d kernel");
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  const std::size_t h = xv.dim(0), w = xv.dim(1), cin = xv.dim(2);
  const std::size_t kh = kv.dim(0), kw = kv.dim(1), cout = kv.dim(3);
  if (kv.dim(2) != cin) {
    throw DimensionError("conv2d: kernel " + shape_str(kv.shape()) + " for input " + shape_str(xv.shape()));
  }
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  const bool has_bias = bias.valid();
  if (has_bias && bias.shape() != Shape{cout}) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " channels");
  }
  const std::ptrdiff_t pt = static_cast<std::ptrdiff_t>((kh - 1) / 2);
  const std::ptrdiff_t pl = static_cast<std::ptrdiff_t>((kw - 1) / 2);
  const std::size_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
  Tensor out({oh, ow, cout});
  auto for_each_tap = [=](std::size_t oy, std::size_t ox, auto&& fn) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pt;
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pl;
        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
        fn(static_cast<std::size_t>((iy * static_cast<std::ptrdiff_t>(w) + ix)) * cin, (ky * kw + kx) * cin);
      }
    }
  };
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* orow = out.ptr() + (oy * ow + ox) * cout;
      if (has_bias) std::copy(bias.value().ptr(), bias.value().ptr() + cout, orow);
      for_each_tap(oy, ox, [&](std::size_t xoff, std::size_t koff) {
        for (std::size_t ci = 0; ci < cin; ++ci) detail::axpy(xv[xoff + ci], kv.ptr() + (koff + ci) * cout, orow, cout);
      });
    }
  }
  std::vector<Var> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  const std::uint32_t ixv = x.id(), ik = kernel.id(), ibias = has_bias ? bias.id() : 0;
  return detail::tape_of(x)->record(std::move(out), inputs, [=](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    const Tensor& xv = t.value(ixv);
    const Tensor& kv = t.value(ik);
    const bool gx_on = t.requires_grad(ixv), gk_on = t.requires_grad(ik);
    double* gx = gx_on ? t.grad_buffer(ixv).ptr() : nullptr;
    double* gk = gk_on ? t.grad_buffer(ik).ptr() : nullptr;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double* grow = g.ptr() + (oy * ow + ox) * cout;
        for_each_tap(oy, ox, [&](std::size_t xoff, std::size_t koff) {
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::size_t wo = (koff + ci) * cout;
            if (gx_on) gx[xoff + ci] += detail::dot(grow, kv.ptr() + wo, cout);
            if (gk_on) detail::axpy(xv[xoff + ci], grow, gk + wo, cout);
          }
        });
      }
    }
    if (has_bias && t.requires_grad(ibias)) {
      Tensor& gb = t.grad_buffer(ibias);
      for (std::size_t p = 0; p < oh * ow; ++p) detail::axpy(1.0, g.ptr() + p * cout, gb.ptr(), cout);
    }
  });
}

// Average over non-overlapping windows of `factor` rows; a short final window
// averages the rows it has.
inline Var avg_pool_rows(Var x, std::size_t factor) {
  detail::require_rank(x, 2, "avg_pool_rows");
  if (factor == 0) throw ParameterError("avg_pool_rows: factor must be positive");
  const Tensor& xv = x.value();
  const std::size_t len = xv.dim(0), d = xv.dim(1);
  const std::size_t out_len = (len + factor - 1) / factor;
  Tensor out({out_len, d});
  for (std::size_t o = 0; o < out_len; ++o) {
    const std::size_t b = o * factor, e = std::min(len, b + factor);
    const double inv = 1.0 / static_cast<double>(e - b);
    for (std::size_t i = b; i < e; ++i) detail::axpy(inv, xv.ptr() + i * d, out.ptr() + o * d, d);
  }
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, len, d, factor, out_len](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < out_len; ++o) {
      const std::size_t b = o * factor, e = std::min(len, b + factor);
      const double inv = 1.0 / static_cast<double>(e - b);
      for (std::size_t i = b; i < e; ++i) detail::axpy(inv, g.ptr() + o * d, gx.ptr() + i * d, d);
    }
  });
}

// Scales each row to unit Euclidean norm; `eps` is added under the root.
inline Var normalize_rows(Var x, double eps = 1e-24) {
  const Tensor& xv = x.value();
  if (xv.empty()) throw DimensionError("normalize_rows: empty input");
  const std::size_t d = xv.cols(), rows = xv.rows();
  Tensor out(xv.shape());
  std::vector<double> norm(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    norm[r] = std::sqrt(detail::dot(xv.ptr() + r * d, xv.ptr() + r * d, d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norm[r];
  }
  const std::uint32_t ix = x.id();
  return detail::tape_of(x)->record(std::move(out), {x}, [ix, d, rows, norm = std::move(norm)](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const double s = detail::dot(g.ptr() + r * d, y.ptr() + r * d, d);
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[r * d + j] - y[r * d + j] * s) / norm[r];
    }
  });
}

// Elementwise binary cross-entropy from logits against fixed targets:
// softplus(z) - y * z.
inline Var bce_with_logits(Var logits, const Tensor& targets) {
  const Tensor& zv = logits.value();
  if (!zv.same_shape(targets)) {
    throw DimensionError("bce_with_logits: logits " + shape_str(zv.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  Tensor out(zv.shape());
  for (std::size_t i = 0; i < zv.size(); ++i) out[i] = detail::softplus(zv[i]) - targets[i] * zv[i];
  const std::uint32_t iz = logits.id();
  return detail::tape_of(logits)->record(std::move(out), {logits}, [iz, targets](Tape& t, std::uint32_t self) {
    const Tensor& g = *t.grad(self);
    const Tensor& zv = t.value(iz);
    Tensor& gz = t.grad_buffer(iz);
    for (std::size_t i = 0; i < g.size(); ++i) gz[i] += g[i] * (detail::sigmoid(zv[i]) - targets[i]);
  });
}

}  // namespace mmf::ops
