#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "sambd/tensor.hpp"

namespace sambd::nn {

// Heavy-ball momentum: v <- momentum * v + g;  w <- w - lr * v.
struct OptimState {
  std::vector<std::vector<double>> velocity;
  double lr = 1e-3;
  double momentum = 0.9;
};

inline void check_optim_hyperparameters(const OptimState& state) {
  if (!(state.lr > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
  if (!(state.momentum >= 0.0 && state.momentum < 1.0)) throw std::invalid_argument("sgd: momentum must lie in [0,1)");
}

template <typename T>
void sgd_momentum_update(std::span<T> weights, std::span<const T> grads, std::vector<double>& velocity,
                         double lr, double momentum) {
  if (grads.size() != weights.size()) throw std::invalid_argument("sgd: gradient/parameter size mismatch");
  if (velocity.empty()) velocity.assign(weights.size(), 0.0);
  if (velocity.size() != weights.size()) throw std::invalid_argument("sgd: velocity/parameter size mismatch");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    velocity[i] = momentum * velocity[i] + static_cast<double>(grads[i]);
    weights[i] = static_cast<T>(static_cast<double>(weights[i]) - lr * velocity[i]);
  }
}

// Parameters without an accumulated gradient are treated as having g = 0.
template <typename T>
void sgd_momentum_step(std::span<Tensor<T>> params, OptimState& state) {
  check_optim_hyperparameters(state);
  if (state.velocity.empty()) state.velocity.resize(params.size());
  if (state.velocity.size() != params.size()) throw std::invalid_argument("sgd: optimizer state tracks a different parameter set");
  std::vector<T> zeros;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = params[k];
    std::span<const T> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(p.size(), T{0});
      g = zeros;
    }
    sgd_momentum_update<T>(p.mutable_data(), g, state.velocity[k], state.lr, state.momentum);
  }
}

}  // namespace sambd::nn
