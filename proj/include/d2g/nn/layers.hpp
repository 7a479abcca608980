#pragma once

#include <string>
#include <vector>

#include "d2g/nn/ops.hpp"

D2G_NN_BEGIN
namespace nn {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

// Trainable leaf drawn from U(-bound, bound).
Tensor uniform_parameter(Shape shape, double bound, Rng& rng);
Tensor constant_parameter(Shape shape, Scalar value);

std::int64_t count_parameters(const ParameterList& params);

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride, int pad, Rng& rng);
  Tensor operator()(const Tensor& x, Padding mode) const { return conv2d(x, weight, bias, stride, pad, mode); }
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t channels);
  Tensor operator()(const Tensor& x) const { return layer_norm_last(x, gamma, beta); }
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Per-pixel MLP on NCHW tensors (1x1 convolutions with GELU between layers).
struct PointwiseMlp {
  std::vector<Conv2d> layers;

  PointwiseMlp() = default;
  PointwiseMlp(const std::vector<std::int64_t>& widths, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Token MLP on [..., C] tensors.
struct TokenMlp {
  std::vector<Linear> layers;

  TokenMlp() = default;
  TokenMlp(const std::vector<std::int64_t>& widths, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

}  // namespace nn
D2G_NN_END
