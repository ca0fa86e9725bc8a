#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dlab/autodiff.hpp"

namespace dlab {

// Adam with bias correction. One state object drives a fixed parameter list;
// slot i of m/v belongs to params[i] for the lifetime of the state.
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-7;
  int64_t step_count = 0;
  std::vector<NdArray> m;
  std::vector<NdArray> v;

  AdamState() = default;
  AdamState(const std::vector<Param*>& params, double learning_rate) : lr(learning_rate) {
    for (const Param* p : params) {
      m.push_back(NdArray::zeros(p->value.shape));
      v.push_back(NdArray::zeros(p->value.shape));
    }
  }
};

// Applies one update from the gradients currently stored on the params, then
// zeroes those gradients.
inline void adam_step(AdamState& state, const std::vector<Param*>& params) {
  if (state.m.size() != params.size())
    throw ValidationError("adam_step: state tracks " + std::to_string(state.m.size()) +
                          " params, got " + std::to_string(params.size()));
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    NdArray& m = state.m[i];
    NdArray& v = state.v[i];
    require_same_shape(p.value, m, "adam_step");
    for (size_t j = 0; j < p.value.data.size(); ++j) {
      const double g = p.grad.data[j];
      m.data[j] = state.beta1 * m.data[j] + (1.0 - state.beta1) * g;
      v.data[j] = state.beta2 * v.data[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m.data[j] / bc1;
      const double vhat = v.data[j] / bc2;
      p.value.data[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps_hat);
    }
    p.zero_grad();
  }
}

}  // namespace dlab
