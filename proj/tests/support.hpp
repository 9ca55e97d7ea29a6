#pragma once

// Shared helpers for the unit and acceptance tests: random data, small model
// configurations and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmf/mmf.hpp"

namespace mmf::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Relative error with an absolute floor, so gradients near zero are compared
// on an absolute scale.
inline constexpr double kRelFloor = 1e-3;
inline constexpr double kFdStep = 1e-5;

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kRelFloor});
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // location of the largest error
};

// Builds a scalar from leaf variables on a fresh tape.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares backward() against central differences for every element of every
// input tensor.
inline GradCheck check_inputs(const ScalarFn& f, std::vector<Tensor> inputs, double step = kFdStep) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var loss = f(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (Var v : leaves) analytic.push_back(v.grad() ? *v.grad() : Tensor(v.value().shape(), 0.0));

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Var> ls;
    for (const Tensor& x : xs) ls.push_back(t.leaf(x, false));
    return f(t, ls).value().item();
  };
  GradCheck r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x0 = inputs[i][j];
      inputs[i][j] = x0 + step;
      const double up = eval(inputs);
      inputs[i][j] = x0 - step;
      const double down = eval(inputs);
      inputs[i][j] = x0;
      const double e = rel_error(analytic[i][j], (up - down) / (2.0 * step));
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = "input " + std::to_string(i) + " element " + std::to_string(j);
      }
    }
  }
  return r;
}

// Sum of x weighted elementwise by a fixed random tensor: a scalar whose
// gradient exercises the full Jacobian of x.
inline Var weighted_sum(Tape& tape, Var x, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(x, tape.constant(random_tensor(x.value().shape(), rng, -1.0, 1.0))));
}

// Compares the gradients of a model-level objective against central
// differences on every parameter scalar. `value` must be a pure function of
// the parameter values.
inline GradCheck check_params(Model& model, const Gradients& analytic, const std::function<double()>& value,
                              double step = kFdStep) {
  GradCheck r;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    Tensor& p = model.params.value(i);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double x0 = p[j];
      p[j] = x0 + step;
      const double up = value();
      p[j] = x0 - step;
      const double down = value();
      p[j] = x0;
      const double e = rel_error(analytic[i][j], (up - down) / (2.0 * step));
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = model.params.name(i) + "[" + std::to_string(j) + "]";
      }
    }
  }
  return r;
}

// d_model 8, two heads, one fusion layer, one block per transformer encoder
// and small inputs.
inline ModelConfig micro_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.ff_width = 16;
  c.fusion_layers = 1;
  c.decoder_hidden = 8;
  c.encoders.ehr_blocks = 1;
  c.encoders.img_blocks = 1;
  c.encoders.gen_channels = {4, 6};
  c.encoders.sens_channels = 4;
  c.encoders.gen_max_tokens = 4;
  c.encoders.sens_max_tokens = 6;
  c.encoders.patch_size = 4;
  c.dims.ehr_visits = 4;
  c.dims.d_ehr = 3;
  c.dims.img_height = 8;
  c.dims.img_width = 8;
  c.dims.gen_loci = 16;
  c.dims.sens_steps = 24;
  c.dims.d_sens = 2;
  return c;
}

// Record with every modality present and random contents.
inline PatientRecord random_record(const InputDims& d, Rng& rng, std::size_t num_classes = 2) {
  PatientRecord r;
  for (Modality m : kAllModalities) r.inputs[index_of(m)] = random_tensor(expected_shape(m, d), rng, -1.0, 1.0);
  r.mask = ModalityMask::all();
  Tensor y({num_classes});
  for (double& v : y.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  r.label = y;
  return r;
}

inline CohortConfig small_cohort(std::size_t n, std::uint64_t seed, double noise = 0.1) {
  CohortConfig c;
  c.num_records = n;
  c.seed = seed;
  c.noise = noise;
  return c;
}

}  // namespace mmf::testing
