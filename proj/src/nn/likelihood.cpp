#include "d2g/nn/likelihood.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <numbers>

D2G_NN_BEGIN
namespace nn {

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Shape4 {
  std::int64_t b, k, h, w;
};

Shape4 head_shape(const Tensor& raw, OutputKind kind) {
  if (raw.rank() != 4 || raw.dim(1) != raw_channels(kind))
    throw ShapeError("head output must be [B, " + std::to_string(raw_channels(kind)) + ", H, W], got " +
                     shape_str(raw.shape()));
  return {raw.dim(0), raw.dim(1), raw.dim(2), raw.dim(3)};
}

}  // namespace

HeadParams head_transform(OutputKind kind, const double* raw, std::size_t stride) {
  switch (kind) {
    case OutputKind::Zig:
      return {clamp_pi0(logistic(raw[0])), softplus(raw[stride]) + kParamFloor, softplus(raw[2 * stride]) + kParamFloor};
    case OutputKind::Gamma:
      return {softplus(raw[0]) + kParamFloor, softplus(raw[stride]) + kParamFloor, 0.0};
    case OutputKind::Gaussian:
      return {raw[0], softplus(raw[stride]) + kSigmaFloor, 0.0};
  }
  return {};
}

Tensor distribution_nll(const Tensor& raw, OutputKind kind, std::span<const TargetIndex> targets,
                        std::span<const double> y, double gamma_zero_floor) {
  const Shape4 s = head_shape(raw, kind);
  if (targets.empty()) throw Error("distribution_nll: empty target set");
  if (targets.size() != y.size()) throw ShapeError("distribution_nll: targets and values differ in length");
  const std::int64_t hw = s.h * s.w;
  const auto* rv = raw.data().data();

  std::vector<std::int64_t> base(targets.size());
  // Per-target derivatives of the loss with respect to each raw channel.
  std::vector<double> d(targets.size() * 3, 0.0);
  double total = 0.0;
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const auto [b, cell] = targets[n];
    if (b < 0 || b >= s.b || cell < 0 || cell >= hw) throw ShapeError("distribution_nll: target index out of range");
    base[n] = b * s.k * hw + cell;
    double r[3] = {0.0, 0.0, 0.0};
    for (std::int64_t c = 0; c < s.k; ++c) r[c] = static_cast<double>(rv[base[n] + c * hw]);
    const double obs = y[n];
    if (!(obs >= 0.0) || !std::isfinite(obs)) throw Error("distribution_nll: invalid observation");
    double* g = &d[3 * n];
    switch (kind) {
      case OutputKind::Zig: {
        const double sig = logistic(r[0]);
        const bool inside = sig > kPi0Min && sig < kPi0Max;
        const double pi0 = clamp_pi0(sig);
        if (obs == 0.0) {
          total -= std::log(pi0);
          g[0] = inside ? -(1.0 - sig) : 0.0;
        } else {
          const double a = softplus(r[1]) + kParamFloor, be = softplus(r[2]) + kParamFloor;
          total -= std::log1p(-pi0) + a * std::log(be) - std::lgamma(a) + (a - 1.0) * std::log(obs) - be * obs;
          g[0] = inside ? sig : 0.0;
          g[1] = -(std::log(be) - boost::math::digamma(a) + std::log(obs)) * logistic(r[1]);
          g[2] = -(a / be - obs) * logistic(r[2]);
        }
        break;
      }
      case OutputKind::Gamma: {
        const double yy = obs > 0.0 ? obs : gamma_zero_floor;
        const double a = softplus(r[0]) + kParamFloor, be = softplus(r[1]) + kParamFloor;
        total -= a * std::log(be) - std::lgamma(a) + (a - 1.0) * std::log(yy) - be * yy;
        g[0] = -(std::log(be) - boost::math::digamma(a) + std::log(yy)) * logistic(r[0]);
        g[1] = -(a / be - yy) * logistic(r[1]);
        break;
      }
      case OutputKind::Gaussian: {
        const double mu = r[0], sd = softplus(r[1]) + kSigmaFloor;
        const double z = (obs - mu) / sd;
        total += 0.5 * z * z + std::log(sd) + 0.5 * std::log(2.0 * std::numbers::pi);
        g[0] = -z / sd;
        g[1] = (1.0 / sd - z * z / sd) * logistic(r[1]);
        break;
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  for (double& v : d) v *= inv_n;
  const Scalar loss = static_cast<Scalar>(total * inv_n);

  return detail::make_result({}, {loss}, {raw}, [=, base = std::move(base), d = std::move(d)](detail::Node* out) {
    detail::Node* in = raw.node();
    return [=]() {
      const double go = static_cast<double>(out->grad[0]);
      auto& gi = in->ensure_grad();
      for (std::size_t n = 0; n < base.size(); ++n)
        for (std::int64_t c = 0; c < s.k; ++c) gi[base[n] + c * hw] += static_cast<Scalar>(go * d[3 * n + c]);
    };
  });
}

Predictive to_predictive(const Tensor& raw, OutputKind kind, std::int64_t b, double gamma_zero_floor) {
  const Shape4 s = head_shape(raw, kind);
  if (b < 0 || b >= s.b) throw ShapeError("to_predictive: batch index out of range");
  const int h = static_cast<int>(s.h), w = static_cast<int>(s.w);
  Predictive p;
  p.kind = kind;
  p.gamma_zero_floor = gamma_zero_floor;
  p.a = Field<double>(h, w);
  p.b = Field<double>(h, w);
  if (kind == OutputKind::Zig) p.pi0 = Field<double>(h, w);
  const std::int64_t hw = s.h * s.w;
  const auto* rv = raw.data().data() + b * s.k * hw;
  double r[3];
  for (std::int64_t q = 0; q < hw; ++q) {
    for (std::int64_t c = 0; c < s.k; ++c) r[c] = static_cast<double>(rv[c * hw + q]);
    const HeadParams hp = head_transform(kind, r, 1);
    const auto idx = static_cast<std::size_t>(q);
    if (kind == OutputKind::Zig) {
      p.pi0.data()[idx] = hp.p0;
      p.a.data()[idx] = hp.p1;
      p.b.data()[idx] = hp.p2;
    } else {
      p.a.data()[idx] = hp.p0;
      p.b.data()[idx] = hp.p1;
    }
  }
  return p;
}

}  // namespace nn
D2G_NN_END
