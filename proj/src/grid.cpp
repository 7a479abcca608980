#include "d2g/grid.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace d2g {

void GridSpec::validate() const {
  if (height < 8 || width < 8)
    throw ShapeError("GridSpec: height and width must be >= 8, got " + std::to_string(height) + "x" +
                     std::to_string(width));
  if (!(cell_size_km > 0.0) || !std::isfinite(cell_size_km)) throw Error("GridSpec: cell_size_km must be positive");
}

void RainField::validate() const {
  spec.validate();
  if (values.height() != spec.height || values.width() != spec.width || !values.same_shape(valid))
    throw ShapeError("RainField: array shape does not match grid spec");
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (!valid.data()[k]) continue;
    const float v = values.data()[k];
    if (!std::isfinite(v) || v < 0.0f) throw Error("RainField: invalid value in a valid cell");
  }
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Validation:
      return "val";
    case Split::Test:
      return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val" || s == "validation") return Split::Validation;
  if (s == "test") return Split::Test;
  throw Error("unknown split '" + s + "'");
}

void Episode::validate() const {
  spec.validate();
  if (timesteps < 1) throw Error("Episode: timesteps must be >= 1");
  if (stations.size() != static_cast<std::size_t>(timesteps) || context.size() != static_cast<std::size_t>(timesteps))
    throw ShapeError("Episode: station/context stacks must have T slices");
  const auto check = [&](const auto& f, const char* what) {
    if (f.height() != spec.height || f.width() != spec.width)
      throw ShapeError(std::string("Episode: bad shape for ") + what);
  };
  for (int t = 0; t < timesteps; ++t) {
    check(stations[t].values, "stations.values");
    check(stations[t].present, "stations.present");
    check(context[t], "context");
  }
  check(target, "target");
  check(holdout, "holdout");
  radar.validate();
  if (!(radar.spec == spec)) throw ShapeError("Episode: radar grid differs from episode grid");
  if (truth) truth->validate();

  for (int t = 0; t < timesteps; ++t) {
    for (std::size_t k = 0; k < spec.cells(); ++k) {
      const bool ctx = context[t].data()[k] != 0;
      if (ctx && !stations[t].present.data()[k]) throw Error("Episode: context cell without station data");
      if (ctx && holdout.data()[k]) throw Error("Episode: holdout cell used as context");
      if (stations[t].present.data()[k]) {
        const float v = stations[t].values.data()[k];
        if (!std::isfinite(v) || v < 0.0f) throw Error("Episode: invalid station value");
      }
    }
  }
  for (std::size_t k = 0; k < spec.cells(); ++k) {
    if (target.data()[k] && !stations.back().present.data()[k]) throw Error("Episode: target cell without data");
  }
}

double clamp_pi0(double pi0) { return std::clamp(pi0, kPi0Min, kPi0Max); }

void ZigParams::validate() const {
  if (!pi0.same_shape(alpha) || !pi0.same_shape(beta)) throw ShapeError("ZigParams: field shapes differ");
  for (std::size_t k = 0; k < pi0.size(); ++k) {
    const double p = pi0.data()[k], a = alpha.data()[k], b = beta.data()[k];
    if (!(p > 0.0 && p < 1.0)) throw Error("ZigParams: pi0 outside (0, 1)");
    if (!(a >= kParamFloor) || !(b >= kParamFloor) || !std::isfinite(a) || !std::isfinite(b))
      throw Error("ZigParams: alpha/beta below floor or non-finite");
  }
}

bool rain_indicator(double pi0) { return 1.0 - pi0 >= 0.5; }

Moments zig_moments(double pi0, double alpha, double beta) {
  if (!rain_indicator(pi0)) return {0.0, 0.0};
  return {alpha / beta, alpha / (beta * beta)};
}

MomentFields zig_mean_variance(const ZigParams& params) {
  MomentFields out{Field<double>(params.height(), params.width()), Field<double>(params.height(), params.width())};
  for (std::size_t k = 0; k < params.pi0.size(); ++k) {
    const Moments m = zig_moments(params.pi0.data()[k], params.alpha.data()[k], params.beta.data()[k]);
    out.mean.data()[k] = m.mean;
    out.variance.data()[k] = m.variance;
  }
  return out;
}

RainField zig_sample(const ZigParams& params, const GridSpec& spec, std::uint64_t seed) {
  if (params.height() != spec.height || params.width() != spec.width)
    throw ShapeError("zig_sample: params do not match grid");
  RainField out(spec);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t k = 0; k < params.pi0.size(); ++k) {
    const double pi0 = clamp_pi0(params.pi0.data()[k]);
    if (u01(rng) < pi0) {
      out.values.data()[k] = 0.0f;
      continue;
    }
    // std::gamma_distribution takes a scale; the model uses a rate.
    std::gamma_distribution<double> g(params.alpha.data()[k], 1.0 / params.beta.data()[k]);
    out.values.data()[k] = static_cast<float>(g(rng));
  }
  return out;
}

}  // namespace d2g
