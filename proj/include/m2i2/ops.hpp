#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "m2i2/rng.hpp"
#include "m2i2/tensor.hpp"

// Differentiable tensor operations. Each op computes its forward value and,
// when a tape is active and any input requires a gradient, records a backward
// rule. Every forward result is checked for NaN/Inf.
namespace m2i2::ops {

using Index = std::vector<std::size_t>;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x[n,in] * w[in,out] + b[out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Adds a [d] or [1,d] row to every row of x[n,d].
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor scale(const Tensor& x, double s);
// x / s for a one-element tensor s.
Tensor div_scalar(const Tensor& x, const Tensor& s);

// GELU, tanh formulation:
//   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
double gelu_value(double x);
Tensor gelu(const Tensor& x);

// Softmax along `axis` (negative counts from the back), stabilized by
// subtracting the max.
Tensor softmax(const Tensor& x, int axis = -1);
// Row softmax of a 2-D tensor where keep[i * cols + j] == 0 excludes entry
// (i, j) (probability exactly 0). Empty `keep` means no masking.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
// Mean squared difference over all elements.
Tensor mse(const Tensor& pred, const Tensor& target);

Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [n,d] -> [n,1]
Tensor row_sum(const Tensor& x);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx);
// Copy of base with rows idx[i] replaced by rows(i).
Tensor scatter_rows(const Tensor& base, const Tensor& rows,
                    std::span<const std::size_t> idx);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);
Tensor reshape(const Tensor& x, Shape shape);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

}  // namespace m2i2::ops
