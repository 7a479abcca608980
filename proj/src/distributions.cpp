#include "d2g/distributions.hpp"

#include <cmath>
#include <numbers>

namespace d2g {

std::string to_string(OutputKind k) {
  switch (k) {
    case OutputKind::Zig:
      return "zig";
    case OutputKind::Gamma:
      return "gamma";
    case OutputKind::Gaussian:
      return "gaussian";
  }
  return "zig";
}

OutputKind output_kind_from_string(const std::string& s) {
  if (s == "zig") return OutputKind::Zig;
  if (s == "gamma") return OutputKind::Gamma;
  if (s == "gaussian") return OutputKind::Gaussian;
  throw Error("unknown output kind '" + s + "'");
}

int raw_channels(OutputKind k) { return k == OutputKind::Zig ? 3 : 2; }

namespace {

void require_gamma(double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta))
    throw Error("gamma parameters must be positive and finite");
}

double gamma_log_density(double y, double alpha, double beta) {
  return alpha * std::log(beta) - std::lgamma(alpha) + (alpha - 1.0) * std::log(y) - beta * y;
}

}  // namespace

double zig_log_likelihood(double y, double pi0, double alpha, double beta) {
  if (!(y >= 0.0)) throw Error("zig_log_likelihood: negative observation");
  if (!(pi0 > 0.0 && pi0 < 1.0)) throw Error("zig_log_likelihood: pi0 outside (0, 1)");
  require_gamma(alpha, beta);
  if (y == 0.0) return std::log(pi0);
  return std::log1p(-pi0) + gamma_log_density(y, alpha, beta);
}

double gamma_log_likelihood(double y, double alpha, double beta) {
  if (!(y > 0.0)) throw Error("gamma_log_likelihood: observation must be positive");
  require_gamma(alpha, beta);
  return gamma_log_density(y, alpha, beta);
}

double gaussian_log_likelihood(double y, double mu, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma) || !std::isfinite(mu)) throw Error("gaussian_log_likelihood: bad sigma");
  const double z = (y - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

TargetSelection select_targets(const Episode& ep, bool include_context) {
  TargetSelection sel;
  const StationSlice& last = ep.last_stations();
  const bool test = ep.split == Split::Test;
  for (int i = 0; i < ep.spec.height; ++i)
    for (int j = 0; j < ep.spec.width; ++j) {
      const bool t = ep.target(i, j) != 0;
      const bool c = !test && include_context && ep.last_context()(i, j) != 0;
      if (!(t || c) || ep.holdout(i, j) != test || !last.present(i, j)) continue;
      sel.cells.push_back({i, j});
      sel.y_true.push_back(last.values(i, j));
    }
  return sel;
}

void assert_disjoint_from_inputs(const TargetSelection& sel, const Episode& ep) {
  for (const Cell c : sel.cells) {
    if (ep.last_context()[c]) throw Error("target selection overlaps last-timestep context");
    if (ep.split == Split::Test) {
      if (!ep.holdout[c]) throw Error("test target outside the holdout set");
    } else if (ep.holdout[c]) {
      throw Error("target selection overlaps holdout cells");
    }
  }
}

Predictive Predictive::from_zig(const ZigParams& p) {
  Predictive out;
  out.kind = OutputKind::Zig;
  out.a = p.alpha;
  out.b = p.beta;
  out.pi0 = p.pi0;
  return out;
}

ZigParams Predictive::as_zig() const {
  if (kind != OutputKind::Zig) throw Error("predictive distribution is not zero-inflated gamma");
  ZigParams p;
  p.pi0 = pi0;
  p.alpha = a;
  p.beta = b;
  return p;
}

Moments Predictive::moments(Cell c) const {
  switch (kind) {
    case OutputKind::Zig:
      return zig_moments(pi0[c], a[c], b[c]);
    case OutputKind::Gamma:
      return {a[c] / b[c], a[c] / (b[c] * b[c])};
    case OutputKind::Gaussian:
      return {a[c], b[c] * b[c]};
  }
  return {};
}

double Predictive::log_likelihood(Cell c, double y) const {
  switch (kind) {
    case OutputKind::Zig:
      return zig_log_likelihood(y, pi0[c], a[c], b[c]);
    case OutputKind::Gamma:
      return gamma_log_likelihood(y > 0.0 ? y : gamma_zero_floor, a[c], b[c]);
    case OutputKind::Gaussian:
      return gaussian_log_likelihood(y, a[c], b[c]);
  }
  return 0.0;
}

MomentFields Predictive::moment_fields() const {
  MomentFields m{Field<double>(height(), width()), Field<double>(height(), width())};
  for (int i = 0; i < height(); ++i)
    for (int j = 0; j < width(); ++j) {
      const Moments mo = moments({i, j});
      m.mean(i, j) = mo.mean;
      m.variance(i, j) = mo.variance;
    }
  return m;
}

}  // namespace d2g
