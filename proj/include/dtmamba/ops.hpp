#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dtmamba/tape.hpp"
#include "dtmamba/tensor.hpp"

// Differentiable tensor operations. Each op computes its forward value
// eagerly and records its adjoint on the operands' tape.
namespace dtmamba::ops {

// Scalar kernels shared with non-tape code.
double softplus(double x);
double sigmoid(double x);

/// Plain softmax over a vector with max subtraction; throws on empty input.
std::vector<double> softmax(std::span<const double> logits);

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
/// x * s where s holds a single element.
Var scale_by(Var x, Var s);
/// x + s where s holds a single element.
Var add_scalar(Var x, Var s);

Var softplus(Var x);
Var sigmoid(Var x);
Var silu(Var x);
Var softmax(Var logits);

Var sum(Var x);
/// Element `index` of a flat tensor, as a scalar.
Var select(Var x, std::size_t index);
Var cumsum(Var x);
Var reshape(Var x, Shape shape);

// Matrix helpers over [rows, cols] tensors.
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var add_row_bias(Var x, Var bias);
Var mul_rows(Var x, Var factors);
Var gather_columns(Var x, std::span<const std::size_t> columns);
Var mask_columns(Var x, std::span<const std::uint8_t> keep);
/// Each column divided by sqrt(mean of its squares + eps).
Var rms_norm_columns(Var x, double eps);

/// Depthwise 3D cross-correlation with same-size zero padding.
/// x: [d, T, H, W], kernel: [d, kt, kh, kw] with odd extents.
Var conv3d_depthwise(Var x, Var kernel);
Tensor conv3d_depthwise(const Tensor& x, const Tensor& kernel);

Var mean_axis(Var x, std::size_t axis);
/// Mean over `axis` restricted to positions where mask is nonzero.
Var masked_mean(Var x, std::size_t axis, std::span<const std::uint8_t> mask);

}  // namespace dtmamba::ops
