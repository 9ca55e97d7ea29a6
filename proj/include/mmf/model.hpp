#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "mmf/autodiff.hpp"
#include "mmf/config.hpp"
#include "mmf/ops.hpp"
#include "mmf/rng.hpp"

namespace mmf {

// Configuration plus the parameter table theta.
struct Model {
  ModelConfig config;
  ParamStore params;
};

// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

// Per-forward-pass context: the tape being recorded, the parameters bound on
// it, the dropout stream and the training flag.
class Graph {
 public:
  Graph(Tape& tape, const Model& model, Rng& rng, bool training)
      : tape_(tape), model_(model), rng_(rng), training_(training) {}

  Var p(const std::string& name) { return tape_.param(model_.params, name); }
  Var constant(Tensor t) { return tape_.constant(std::move(t)); }
  Var dropout(Var x) { return ops::dropout(x, model_.config.dropout, rng_, training_); }

  Tape& tape() { return tape_; }
  Rng& rng() { return rng_; }
  bool training() const { return training_; }
  const ModelConfig& config() const { return model_.config; }
  const Model& model() const { return model_; }

 private:
  Tape& tape_;
  const Model& model_;
  Rng& rng_;
  bool training_;
};

}  // namespace mmf
