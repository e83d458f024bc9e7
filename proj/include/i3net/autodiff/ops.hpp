#pragma once

#include <cstddef>
#include <vector>

#include "i3net/autodiff/tensor.hpp"

namespace i3net::ad {

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard product
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Unary elementwise.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);  // log(1 + e^x), stable for large |x|
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
// Values outside [lo, hi] are clamped and pass no gradient.
Tensor clamp(const Tensor& x, double lo, double hi);
// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
Tensor smooth_l1(const Tensor& x);

// Forward identity; backward scales the upstream gradient by -beta.
Tensor gradient_reversal(const Tensor& x, double beta = 1.0);

// Softmax / log-softmax of x / temperature along the last axis.
Tensor softmax(const Tensor& x, double temperature = 1.0);
Tensor log_softmax(const Tensor& x, double temperature = 1.0);

// 2-D matrix product (m x k) . (k x n).
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x: N x Cin x H x W, weight: Cout x Cin x kh x kw, bias: Cout (optional).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions options = {});
Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions options = {});

// x: N x C x H x W, square window; ties resolved to the first maximum.
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);  // axis removed
Tensor mean(const Tensor& x, std::size_t axis);
// Euclidean norm of the whole tensor. The gradient at the origin is taken as 0.
Tensor l2_norm(const Tensor& x);

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// x: M x C, indices: M entries in [0, C). Returns x[i, indices[i]] as an M-vector.
Tensor pick(const Tensor& x, const std::vector<std::size_t>& indices);

}  // namespace i3net::ad
