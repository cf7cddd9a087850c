#pragma once

#include <vector>

#include "soap/tensor.hpp"

namespace soap {

enum class ElemKind { Add, Sub, Mul, Sigmoid, Tanh, Isru };
enum class ReduceKind { Mean, Sum };

// Elementwise ops. Binary kinds accept a second operand of the same rank
// whose axes are each equal to the first operand's or 1 (broadcast); the
// result always has the first operand's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor isru(const Tensor& x);  // x / sqrt(1 + x^2): bounded, analytic, slow tails
Tensor scale(const Tensor& x, double factor);
Tensor elementwise(ElemKind kind, const Tensor& a, const Tensor* b = nullptr);

// Direct convolution, stride 1, "same" zero padding (all kernel extents must
// be odd). input: (batch, in_channels, spatial...), kernel: (out_channels,
// in_channels, k...), bias: (out_channels). rank is the number of spatial
// dimensions, 1..3.
Tensor convolve(const Tensor& input, const Tensor& kernel, int rank, const Tensor* bias = nullptr);

Tensor reduce(ReduceKind kind, const Tensor& x, const std::vector<std::size_t>& axes, bool keep_dims);
Tensor reduce_mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keep_dims);
Tensor reduce_sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keep_dims);

Tensor matmul(const Tensor& a, const Tensor& b);

// numerically stable softmax along one axis; slices sum to 1
Tensor softmax(const Tensor& x, std::size_t axis);

// zero-mean unit-variance normalization along one axis, no learnable affine
Tensor layer_norm(const Tensor& x, std::size_t axis, double epsilon = 1e-5);

// Pure layout transforms (gradient of reshape is reshape of gradient).
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor flatten(const Tensor& x);  // collapse all axes after the first
Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop);

// affine map on the trailing axis: (... x in) @ (in x out) + bias
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);

Tensor frobenius_norm(const Tensor& x);  // scalar, shape {1}

// -log softmax(logits)[target], computed through log-sum-exp
Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target);

}  // namespace soap
