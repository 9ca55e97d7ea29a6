#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmf/error.hpp"
#include "mmf/tensor.hpp"

namespace mmf {

// Named, ordered parameter table. Insertion order is the canonical order used
// by gradients, optimizer state and checkpoints.
class ParamStore {
 public:
  std::size_t add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, names_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
    return names_.size() - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(const std::string& name) const { return values_[index(name)]; }
  Tensor& value(const std::string& name) { return values_[index(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-parameter gradient buffers aligned with a ParamStore.
using Gradients = std::vector<Tensor>;

inline Gradients zero_gradients(const ParamStore& store) {
  Gradients g;
  g.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) g.emplace_back(store.value(i).shape(), 0.0);
  return g;
}

inline void add_into(Gradients& acc, const Gradients& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    double* a = acc[i].ptr();
    const double* b = g[i].ptr();
    for (std::size_t j = 0; j < acc[i].size(); ++j) a[j] += b[j];
  }
}

class Tape;

// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }

  inline const Tensor& value() const;
  inline const Shape& shape() const;
  inline bool requires_grad() const;
  // Null until backward has reached this node.
  inline const Tensor* grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

// Expression tape for reverse-mode differentiation. Nodes are appended in
// evaluation order, so the node sequence is already topologically sorted and
// backward is one reverse sweep.
class Tape {
 public:
  // Called once per node during backward with the tape and the node index.
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), nullptr, false, {}); }

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), nullptr, requires_grad, {});
  }

  // Binds a stored parameter by reference. The store must outlive the tape and
  // stay unmodified while the tape is alive.
  Var param(const ParamStore& store, std::size_t index) {
    if (bound_store_ && bound_store_ != &store) {
      throw ContractError("a tape can bind parameters from a single store only");
    }
    if (!bound_store_) {
      bound_store_ = &store;
      param_node_.assign(store.size(), -1);
    }
    if (param_node_[index] < 0) {
      Var v = push(Tensor(), &store.value(index), true, {});
      param_node_[index] = static_cast<std::int64_t>(v.id());
      nodes_.back().param_index = static_cast<std::int64_t>(index);
    }
    return Var(this, static_cast<std::uint32_t>(param_node_[index]));
  }

  Var param(const ParamStore& store, const std::string& name) {
    return param(store, store.index(name));
  }

  // Records an operation result. The backward rule is kept only when some
  // input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), nullptr, needs, needs ? std::move(fn) : BackwardFn{});
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), nullptr, needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const Tensor* grad(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.has_grad ? &n.grad : nullptr;
  }

  // Gradient accumulator for a node, zero-initialized on first access.
  Tensor& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(value(id).shape(), 0.0);
      n.has_grad = true;
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    check_owned(loss);
    if (loss.value().size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    Tensor one(loss.shape(), 1.0);
    std::pair<Var, Tensor> seed{loss, std::move(one)};
    backward(std::span<const std::pair<Var, Tensor>>(&seed, 1));
  }

  // Backward from several seeded nodes at once; each seed tensor is the
  // upstream gradient for its node.
  void backward(std::span<const std::pair<Var, Tensor>> seeds) {
    if (backward_done_) throw ContractError("backward already ran on this tape");
    backward_done_ = true;
    std::int64_t top = -1;
    for (const auto& [var, g] : seeds) {
      check_owned(var);
      if (!g.same_shape(var.value())) {
        throw DimensionError("seed gradient " + shape_str(g.shape()) + " for node of shape " +
                             shape_str(var.shape()));
      }
      if (!nodes_[var.id()].requires_grad) continue;
      Tensor& buf = grad_buffer(var.id());
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
      top = std::max<std::int64_t>(top, var.id());
    }
    for (std::int64_t i = top; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.has_grad && n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
    }
  }

  // Adds gradients of bound parameters into `acc` (aligned with `store`).
  void accumulate_param_grads(const ParamStore& store, Gradients& acc) const {
    if (bound_store_ == nullptr) return;
    if (bound_store_ != &store) throw ContractError("gradient store differs from bound store");
    for (std::size_t p = 0; p < param_node_.size(); ++p) {
      if (param_node_[p] < 0) continue;
      const Node& n = nodes_[static_cast<std::size_t>(param_node_[p])];
      if (!n.has_grad) continue;
      double* dst = acc[p].ptr();
      const double* src = n.grad.ptr();
      for (std::size_t j = 0; j < n.grad.size(); ++j) dst[j] += src[j];
    }
  }

  Gradients param_grads(const ParamStore& store) const {
    Gradients g = zero_gradients(store);
    accumulate_param_grads(store, g);
    return g;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::int64_t param_index = -1;
    BackwardFn backward;
  };

  Var push(Tensor value, const Tensor* external, bool requires_grad, BackwardFn fn) {
    if (backward_done_) throw ContractError("cannot record onto a tape after backward");
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  void check_owned(const Var& v) const {
    if (v.tape() != this) throw ContractError("variable belongs to a different tape");
  }

  std::deque<Node> nodes_;  // stable references: values stay valid while the tape grows
  const ParamStore* bound_store_ = nullptr;
  std::vector<std::int64_t> param_node_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Shape& Var::shape() const { return tape_->value(id_).shape(); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline const Tensor* Var::grad() const { return tape_->grad(id_); }

}  // namespace mmf
