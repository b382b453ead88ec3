#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "tempal/numcore/tape.hpp"

namespace tempal {

template <typename S>
using ScalarFn = std::function<Tensor<S>(GradTape<S>&, const Tensor<S>&)>;

/// Central-difference gradient of f at x. x is perturbed in place and restored,
/// so f may read x through shared storage (e.g. a model parameter).
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> numeric_gradient(const ScalarFn<S>& f, Tensor<S> x, S eps) {
  Eigen::Matrix<S, Eigen::Dynamic, 1> g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const S saved = x[i];
    x[i] = saved + eps;
    GradTape<S> t1(false);
    const S up = f(t1, x).item();
    x[i] = saved - eps;
    GradTape<S> t2(false);
    const S down = f(t2, x).item();
    x[i] = saved;
    g[i] = (up - down) / (S(2) * eps);
  }
  return g;
}

/// Reverse-mode gradient of f at x. Any grad previously held by x is preserved.
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> analytic_gradient(const ScalarFn<S>& f, Tensor<S> x) {
  const bool had = x.requires_grad();
  Eigen::Matrix<S, Eigen::Dynamic, 1> saved = had ? x.grad() : Eigen::Matrix<S, Eigen::Dynamic, 1>();
  x.set_requires_grad(true);
  x.zero_grad();
  GradTape<S> tape;
  tape.backward(f(tape, x));
  Eigen::Matrix<S, Eigen::Dynamic, 1> g = x.grad();
  if (had) {
    x.grad() = saved;
  } else {
    x.set_requires_grad(false);
  }
  return g;
}

/// max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)
template <typename S>
S max_relative_error(const Eigen::Matrix<S, Eigen::Dynamic, 1>& analytic,
                     const Eigen::Matrix<S, Eigen::Dynamic, 1>& numeric) {
  if (analytic.size() != numeric.size()) throw DimensionError("max_relative_error: length mismatch");
  S worst = 0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const S denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), S(1e-8)});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

template <typename S>
S finite_diff_check(const ScalarFn<S>& f, const Tensor<S>& x, S eps) {
  return max_relative_error<S>(analytic_gradient<S>(f, x), numeric_gradient<S>(f, x, eps));
}

}  // namespace tempal
