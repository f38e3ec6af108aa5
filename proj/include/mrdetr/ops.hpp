#pragma once

#include <cstddef>
#include <vector>

#include "mrdetr/tensor.hpp"

namespace mrdetr::ad {

// Elementwise binaries broadcast with numpy rules.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double p);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// log(1 + eˣ), evaluated stably.
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Axis-wise ops; negative axes count from the back.
Tensor softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& a, int axis, double eps = 1e-10);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);

// 2-D contraction; transpose_b computes a·bᵀ.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// mask[i] true → value, else a[i].
Tensor masked_fill(const Tensor& a, const std::vector<bool>& mask, double value);

// out[i] = a.flat[index[i]], shaped as out_shape.
Tensor take(const Tensor& a, const std::vector<std::size_t>& index, Shape out_shape);
Tensor index_select_rows(const Tensor& a, const std::vector<std::size_t>& rows);
// out = zeros(n_rows × cols); out[rows[i]] += src[i].
Tensor index_add_rows(std::size_t n_rows, const std::vector<std::size_t>& rows, const Tensor& src);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(scale(a, -1.0), s); }

}  // namespace mrdetr::ad
