#pragma once

// Differentiable op set. Matrices are rank-2 [rows, cols] row-major; "rows"
// ops broadcast a length-cols vector across every row.

#include <cstddef>

#include "usage/numerics/tape.hpp"

namespace usage::ad {

// Lower bound applied before pow() and log() so that gradients stay finite.
inline constexpr double kPowFloor = 1e-12;

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
// Elementwise product with a constant tensor (dropout masks and the like).
Var mul_const(Var a, const Tensor& factor);

// x[n, d] + bias[d]
Var add_rows(Var x, Var bias);
// x[n, d] * gain[d]
Var mul_rows(Var x, Var gain);
// x[n, d] * gate[n] (per-row scale)
Var mul_cols(Var x, Var gate);
// v[d] repeated n times -> [n, d]
Var broadcast_rows(Var v, std::size_t n);

Var matmul(Var a, Var b);     // [m, k] x [k, n]
Var matmul_nt(Var a, Var b);  // [m, k] x [n, k]^T
Var transpose(Var a);
Var reshape(Var a, Shape shape);

// Columns [start, start + count) of a rank-2 tensor.
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_cols(Var a, Var b);

// x[c, h, w] with kernel w[o, c, k, k] and bias[o]; zero padding.
Var conv2d(Var x, Var kernel, Var bias, std::size_t stride, std::size_t padding);

Var exp(Var a);
Var log(Var a);
// log(max(a, kPowFloor))
Var log_floored(Var a);
// max(a, kPowFloor)^exponent
Var pow(Var a, double exponent);
Var sigmoid(Var a);
Var relu(Var a);
Var gelu(Var a);
// Max-subtracted softmax along the last axis of a rank-1 or rank-2 tensor.
Var softmax_rows(Var x);
Var layer_norm_rows(Var x, Var gain, Var offset, double eps = 1e-6);

Var sum(Var a);   // -> scalar
Var mean(Var a);  // -> scalar
// Global maximum; ties route the gradient to the first maximal entry.
Var max(Var a);
// [n, d] -> [d]
Var sum_over_rows(Var x);
Var mean_over_rows(Var x);
// [n, d] -> [n]
Var mean_over_cols(Var x);

// Mean over classes of the logistic loss of logits `scores` against 0/1
// `labels`, computed through softplus to stay stable for large |s|.
Var bce_with_logits(Var scores, const Tensor& labels);

}  // namespace usage::ad
