#pragma once

#include <memory>
#include <span>

#include <Eigen/SparseCore>

#include "phg2st/rng.hpp"
#include "phg2st/tensor.hpp"

namespace phg2st {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Differentiable kernels. Every function records its backward rule when any
// input requires a gradient; otherwise it is a plain value computation.

Tensor matmul(const Tensor& a, const Tensor& b);
/// Constant sparse operator applied on the left: op * x.
Tensor spmm(std::shared_ptr<const SparseMatrix> op, const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// x + broadcast of a 1 x cols row over every row of x.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
/// Exact-erf GELU, x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor square(const Tensor& x);

/// Max-subtracted softmax along `axis` (last axis, or axis 0 of a matrix).
Tensor softmax(const Tensor& x, Index axis);

inline constexpr double kLayerNormEps = 1e-5;
/// Per-row standardization with population variance, then affine gain/bias
/// (each 1 x cols).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

/// Inverted dropout. Identity when `training` is false or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean((a - b)^2) over every entry.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_cols(const Tensor& x, Index begin, Index count);
Tensor concat_cols(std::span<const Tensor> parts);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace phg2st
