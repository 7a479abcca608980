#pragma once

#include <span>
#include <vector>

#include "d2g/nn/tensor.hpp"
#include "d2g/rng.hpp"

D2G_NN_BEGIN
namespace nn {

enum class Padding { Zero, Circular };

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, Scalar s);
Tensor mul_scalar(const Tensor& a, Scalar s);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// Gradient is passed through only strictly inside [lo, hi].
Tensor clamp(const Tensor& x, Scalar lo, Scalar hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_last(const Tensor& x);

// x[..., K] * w[N, K]^T + b[N]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// a[B, M, K] x b[B, K, N] (or b[B, N, K] when transpose_b).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor softmax_last(const Tensor& x);
Tensor layer_norm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = Scalar(1e-5));

// x[N, C, H, W], w[O, C, k, k], b[O] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, Padding mode);
Tensor upsample_nearest2(const Tensor& x);

Tensor permute(const Tensor& x, const std::vector<int>& dims);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor expand(const Tensor& x, const Shape& shape);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, Scalar p, Rng& rng);
// 1-D gather of flat element indices.
Tensor take(const Tensor& x, std::span<const std::int64_t> flat_indices);

}  // namespace nn
D2G_NN_END
