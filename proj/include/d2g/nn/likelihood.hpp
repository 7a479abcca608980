#pragma once

#include <span>
#include <vector>

#include "d2g/distributions.hpp"
#include "d2g/nn/tensor.hpp"

D2G_NN_BEGIN
namespace nn {

// Maps raw head channels onto distribution parameters.
//   Zig:      pi0 = clamp(sigmoid(r0)), alpha = softplus(r1) + floor, beta = softplus(r2) + floor
//   Gamma:    alpha = softplus(r0) + floor, beta = softplus(r1) + floor
//   Gaussian: mu = r0, sigma = softplus(r1) + sigma floor
struct HeadParams {
  double p0 = 0.0;  // pi0 (Zig), alpha (Gamma), mu (Gaussian)
  double p1 = 0.0;
  double p2 = 0.0;
};
HeadParams head_transform(OutputKind kind, const double* raw, std::size_t stride);

// Target cell inside a batch: episode index and flat cell index i * W + j.
struct TargetIndex {
  std::int64_t batch = 0;
  std::int64_t cell = 0;
};

// Mean negative log-likelihood over `targets` of the head output raw[B, k, H, W].
// Throws on an empty target list.
Tensor distribution_nll(const Tensor& raw, OutputKind kind, std::span<const TargetIndex> targets,
                        std::span<const double> y, double gamma_zero_floor = kGammaZeroFloor);

// Parameters of episode `b` as a predictive distribution.
Predictive to_predictive(const Tensor& raw, OutputKind kind, std::int64_t b,
                         double gamma_zero_floor = kGammaZeroFloor);

}  // namespace nn
D2G_NN_END
