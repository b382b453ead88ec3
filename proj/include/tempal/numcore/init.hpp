#pragma once

#include <Eigen/QR>

#include "tempal/numcore/rng.hpp"
#include "tempal/numcore/tensor.hpp"

namespace tempal {

/// (Semi-)orthogonal rows×cols matrix scaled by gain: W·Wᵀ = gain²·I when
/// rows <= cols, Wᵀ·W = gain²·I otherwise. Deterministic in `seed`.
template <typename S>
Tensor<S> orthogonal_init(Index rows, Index cols, S gain, std::uint64_t seed) {
  if (rows < 1 || cols < 1) throw DimensionError("orthogonal_init: rows and cols must be >= 1");
  Rng rng(seed);
  const Index tall = std::max(rows, cols), wide = std::min(rows, cols);
  Eigen::MatrixXd a(tall, wide);
  for (Index j = 0; j < wide; ++j) {
    for (Index i = 0; i < tall; ++i) a(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(tall, wide);
  // Sign fix makes the draw uniform over the orthogonal group.
  const Eigen::MatrixXd r = qr.matrixQR().topRows(wide).template triangularView<Eigen::Upper>();
  for (Index j = 0; j < wide; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  Tensor<S> w({rows, cols});
  if (rows >= cols) {
    w.matrix() = (q * double(gain)).template cast<S>();
  } else {
    w.matrix() = (q.transpose() * double(gain)).template cast<S>();
  }
  return w;
}

/// Orthogonal init of an arbitrary-rank weight, flattened to [dim0 × rest].
template <typename S>
Tensor<S> orthogonal_init(const Shape& shape, S gain, std::uint64_t seed) {
  const Index rows = shape.at(0);
  const Index cols = shape_size(shape) / rows;
  Tensor<S> flat = orthogonal_init<S>(rows, cols, gain, seed);
  return Tensor<S>(shape, flat.data());
}

}  // namespace tempal
