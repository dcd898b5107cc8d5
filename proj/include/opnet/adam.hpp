#pragma once

#include "opnet/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace opnet {

/// Bias-corrected Adam. Moments are allocated lazily on the first step.
template <typename Scalar>
struct AdamState {
  std::int64_t step_count = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Buffer<Scalar>> m, v;

  AdamState() = default;
  AdamState(double lr_, double beta1_, double beta2_ = 0.999, double eps_ = 1e-8)
      : lr(lr_), beta1(beta1_), beta2(beta2_), epsilon(eps_) {
    if (!(lr >= 0)) throw std::invalid_argument("adam: learning rate must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw std::invalid_argument("adam: betas must lie in [0, 1)");
    }
    if (!(epsilon > 0)) throw std::invalid_argument("adam: epsilon must be positive");
  }
};

/// Applies one update to every parameter and zeroes the grads.
template <typename Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params, AdamState<Scalar>& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw std::runtime_error("adam: parameter " + std::to_string(i) + " of shape " +
                               to_string(params[i].shape()) + " has no gradient");
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Buffer<Scalar>::Zero(p.size()));
      state.v.push_back(Buffer<Scalar>::Zero(p.size()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam: parameter list changed between steps");

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const Scalar b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(state.beta1, t));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(state.beta2, t));
  const Scalar lr = static_cast<Scalar>(state.lr), eps = static_cast<Scalar>(state.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.m[i].size() != p.size()) throw std::invalid_argument("adam: moment shape mismatch");
    const auto& g = p.grad();
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.square();
    p.data() -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + eps);
    p.zero_grad();
  }
}

}  // namespace opnet
