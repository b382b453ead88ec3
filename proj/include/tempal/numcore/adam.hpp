#pragma once

#include <span>
#include <vector>

#include "tempal/numcore/tensor.hpp"

namespace tempal {

struct AdamConfig {
  double lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment buffers for a fixed, ordered parameter list.
template <typename S>
struct AdamState {
  using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  AdamConfig config;
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, std::span<const Tensor<S>> params) : config(cfg) {
    for (const auto& p : params) {
      first_moment.push_back(Vector::Zero(p.size()));
      second_moment.push_back(Vector::Zero(p.size()));
    }
  }
};

/// One bias-corrected Adam update. Gradients are read, never cleared.
template <typename S>
void adam_step(std::span<Tensor<S>> params, AdamState<S>& state) {
  if (params.size() != state.first_moment.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    if (params[i].size() != state.first_moment[i].size()) {
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " changed size");
    }
  }
  state.step += 1;
  const auto& c = state.config;
  const S b1 = S(c.beta1), b2 = S(c.beta2);
  const S bias1 = S(1) - std::pow(b1, S(state.step));
  const S bias2 = S(1) - std::pow(b2, S(state.step));
  const S step_size = S(c.lr) / bias1;
  const S eps = S(c.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = params[i].grad();
    m = b1 * m + (S(1) - b1) * g;
    v.array() = b2 * v.array() + (S(1) - b2) * g.array().square();
    params[i].data().array() -= step_size * m.array() / ((v.array() / bias2).sqrt() + eps);
  }
}

/// Rescales gradients so their joint L2 norm is at most max_norm; returns the pre-clip norm.
template <typename S>
S clip_grad_norm(std::span<Tensor<S>> params, S max_norm) {
  S total = 0;
  for (const auto& p : params) {
    if (p.has_grad()) total += p.grad().squaredNorm();
  }
  total = std::sqrt(total);
  if (total > max_norm && total > S(0)) {
    const S factor = max_norm / (total + S(1e-6));
    for (auto& p : params) {
      if (p.has_grad()) p.grad() *= factor;
    }
  }
  return total;
}

}  // namespace tempal
