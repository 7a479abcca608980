#include "d2g/nn/layers.hpp"

#include <cmath>

D2G_NN_BEGIN
namespace nn {

Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Buffer v(static_cast<std::size_t>(numel(shape)));
  for (Scalar& x : v) x = static_cast<Scalar>(u(rng));
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor constant_parameter(Shape shape, Scalar value) { return Tensor::full(std::move(shape), value, true); }

std::int64_t count_parameters(const ParameterList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = uniform_parameter({out, in}, bound, rng);
  if (with_bias) bias = uniform_parameter({out}, bound, rng);
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

Conv2d::Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  weight = uniform_parameter({out, in, kernel, kernel}, bound, rng);
  bias = uniform_parameter({out}, bound, rng);
}

void Conv2d::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::int64_t channels)
    : gamma(constant_parameter({channels}, Scalar(1))), beta(constant_parameter({channels}, Scalar(0))) {}

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

PointwiseMlp::PointwiseMlp(const std::vector<std::int64_t>& widths, Rng& rng) {
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) layers.emplace_back(widths[k], widths[k + 1], 1, 1, 0, rng);
}

Tensor PointwiseMlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    h = layers[k](h, Padding::Zero);
    if (k + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

void PointwiseMlp::collect(const std::string& prefix, ParameterList& out) const {
  for (std::size_t k = 0; k < layers.size(); ++k) layers[k].collect(prefix + "." + std::to_string(k), out);
}

TokenMlp::TokenMlp(const std::vector<std::int64_t>& widths, Rng& rng) {
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) layers.emplace_back(widths[k], widths[k + 1], rng);
}

Tensor TokenMlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    h = layers[k](h);
    if (k + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

void TokenMlp::collect(const std::string& prefix, ParameterList& out) const {
  for (std::size_t k = 0; k < layers.size(); ++k) layers[k].collect(prefix + "." + std::to_string(k), out);
}

}  // namespace nn
D2G_NN_END
