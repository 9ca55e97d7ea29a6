#pragma once

#include <cmath>
#include <cstdint>

#include "mmf/autodiff.hpp"
#include "mmf/error.hpp"

namespace mmf {

// Bias-corrected Adam state, one moment pair per parameter tensor.
struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  Gradients first_moment;
  Gradients second_moment;
};

inline AdamState make_adam(const ParamStore& params, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  s.first_moment = zero_gradients(params);
  s.second_moment = zero_gradients(params);
  return s;
}

inline void adam_step(ParamStore& params, const Gradients& grads, AdamState& state) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients and " +
                         std::to_string(state.first_moment.size()) + " moment buffers for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(params.value(i)) || !state.first_moment[i].same_shape(params.value(i))) {
      throw DimensionError("adam_step: shape mismatch for '" + params.name(i) + "': " +
                           shape_str(grads[i].shape()) + " vs " + shape_str(params.value(i).shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params.value(i).ptr();
    double* m = state.first_moment[i].ptr();
    double* v = state.second_moment[i].ptr();
    const double* g = grads[i].ptr();
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

}  // namespace mmf
