#pragma once

#include <span>
#include <vector>

#include "tempal/numcore/tape.hpp"
#include "tempal/numcore/tensor.hpp"

// Differentiable operations. Every op takes the tape explicitly; passing a
// disabled tape (GradTape<S>{false}) gives a plain forward evaluation.
//
// Binary elementwise ops broadcast in three ways only: identical shapes, a
// single-element right operand, or a rank-1 right operand matching the last
// dimension of the left operand (bias-style).

namespace tempal {

template <typename S>
Tensor<S> matmul(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> transpose(GradTape<S>& tape, const Tensor<S>& a);

/// x[n×in]·Wᵀ + b with W[out×in], b[out] (b may be empty).
template <typename S>
Tensor<S> linear(GradTape<S>& tape, const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias);

template <typename S>
Tensor<S> add(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> sub(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> mul(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> scale(GradTape<S>& tape, const Tensor<S>& a, S factor);
template <typename S>
Tensor<S> add_scalar(GradTape<S>& tape, const Tensor<S>& a, S value);

template <typename S>
Tensor<S> relu(GradTape<S>& tape, const Tensor<S>& a);
template <typename S>
Tensor<S> tanh(GradTape<S>& tape, const Tensor<S>& a);
template <typename S>
Tensor<S> exp(GradTape<S>& tape, const Tensor<S>& a);
template <typename S>
Tensor<S> log(GradTape<S>& tape, const Tensor<S>& a);

template <typename S>
Tensor<S> minimum(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> clamp(GradTape<S>& tape, const Tensor<S>& a, S lo, S hi);

/// Scalar reductions over all elements.
template <typename S>
Tensor<S> sum(GradTape<S>& tape, const Tensor<S>& a);
template <typename S>
Tensor<S> mean(GradTape<S>& tape, const Tensor<S>& a);

/// Sum over the last dimension.
template <typename S>
Tensor<S> sum_rows(GradTape<S>& tape, const Tensor<S>& a);

/// Softmax over the last dimension of x/temperature, max-subtracted.
template <typename S>
Tensor<S> softmax(GradTape<S>& tape, const Tensor<S>& x, S temperature = S(1));
template <typename S>
Tensor<S> log_softmax(GradTape<S>& tape, const Tensor<S>& x, S temperature = S(1));

/// Divides each row (last dimension) by its sum.
template <typename S>
Tensor<S> normalize_rows_sum(GradTape<S>& tape, const Tensor<S>& a);

/// Unit L2 norm along the last dimension. Throws DegenerateInputError when a
/// row norm is <= 1e-12.
template <typename S>
Tensor<S> l2_normalize(GradTape<S>& tape, const Tensor<S>& v);

/// Valid (unpadded) 2-D convolution. input: [c×h×w] or [n×c×h×w];
/// kernels: [c_out×c_in×kh×kw]; bias: [c_out] or empty.
template <typename S>
Tensor<S> conv2d(GradTape<S>& tape, const Tensor<S>& input, const Tensor<S>& kernels, const Tensor<S>& bias,
                 int stride);

/// Kernel-size-1 convolution over a sequence. input: [c_in×len] or [n×c_in×len];
/// kernels: [c_out×c_in]; bias: [c_out].
template <typename S>
Tensor<S> pointwise_conv1d(GradTape<S>& tape, const Tensor<S>& input, const Tensor<S>& kernels,
                           const Tensor<S>& bias);

constexpr Index pointwise_conv1d_parameter_count(Index c_in, Index c_out) { return c_out * c_in + c_out; }

template <typename S>
Tensor<S> reshape(GradTape<S>& tape, const Tensor<S>& a, Shape shape);

/// out[i] = a[i, index[i]] for a[n×d].
template <typename S>
Tensor<S> gather_cols(GradTape<S>& tape, const Tensor<S>& a, std::span<const int> index);

/// Copy of a square matrix with its diagonal replaced by `value` (no gradient there).
template <typename S>
Tensor<S> mask_diagonal(GradTape<S>& tape, const Tensor<S>& a, S value);

}  // namespace tempal
