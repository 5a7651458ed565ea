#pragma once

// Differentiable tensor ops. Each op checks its operands, computes the
// forward values, rejects non-finite results with NumericError, and records a
// backward rule on the active tape when any input requires grad.

#include <cstddef>
#include <span>
#include <vector>

#include "stow/ad/tensor.hpp"

namespace stow::ad {

// ---- linear algebra ----------------------------------------------------

// a[m,k] x b[k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[m,k] x b[n,k]^T -> [m,n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// ---- elementwise, broadcasting over trailing dimensions ----------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// log(1 + exp(x)), evaluated without overflow.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);
template <typename T>
Tensor<T> square(const Tensor<T>& x);

// ---- reductions and normalizations -------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// Reduces `axis` away; a 1-D input yields shape [1].
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

// Normalizes over the last axis, then applies per-feature gamma and beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

// x / (|x|_2 + eps) along the last axis.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-8));

// ---- structural --------------------------------------------------------

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  return concat(std::span<const Tensor<T>>(parts), axis);
}
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
// Selects entries along axis 0; indices may repeat.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices);

// ---- spatial -----------------------------------------------------------

// Cross-correlation of x[C_in,H,W] with weight[C_out,C_in,k,k] and optional
// bias[C_out], zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);

// Align-corners-false bilinear resize of x[C,h,w] to [C, h*factor, w*factor].
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t factor);

// Forward-only helper shared with the mask head: same interpolation on a
// single h*w plane.
template <typename T>
std::vector<T> bilinear_upsample_plane(std::span<const T> plane, std::size_t h, std::size_t w, std::size_t factor);

}  // namespace stow::ad
