#pragma once

#include <string>
#include <vector>

#include "d2g/grid.hpp"

namespace d2g {

// Output families of the prediction head. Zig is the main model; Gamma and
// Gaussian are the likelihood ablations.
enum class OutputKind { Zig, Gamma, Gaussian };

std::string to_string(OutputKind k);
OutputKind output_kind_from_string(const std::string& s);
int raw_channels(OutputKind k);

inline constexpr double kGammaZeroFloor = 0.01;
inline constexpr double kSigmaFloor = 1e-3;

// Log densities. Throw on y < 0 or parameters outside their domain.
double zig_log_likelihood(double y, double pi0, double alpha, double beta);
double gamma_log_likelihood(double y, double alpha, double beta);
double gaussian_log_likelihood(double y, double mu, double sigma);

// Cells contributing to the loss, with their observed values.
struct TargetSelection {
  std::vector<Cell> cells;
  std::vector<double> y_true;

  bool empty() const { return cells.empty(); }
  std::size_t size() const { return cells.size(); }
};

// Targets of an episode. Training and validation episodes never select
// holdout cells; with include_context their last-timestep context cells are
// added (the target_inputs ablation). Test episodes select holdout cells only.
TargetSelection select_targets(const Episode& ep, bool include_context = false);

// Throws unless selection ∩ last context = ∅ and, outside the test split,
// selection ∩ holdout = ∅; test selections must lie inside the holdout set.
void assert_disjoint_from_inputs(const TargetSelection& sel, const Episode& ep);

// Per-cell predictive distribution from any output family.
struct Predictive {
  OutputKind kind = OutputKind::Zig;
  Field<double> a;  // Zig/Gamma: alpha; Gaussian: mu
  Field<double> b;  // Zig/Gamma: beta;  Gaussian: sigma
  Field<double> pi0;  // Zig only
  double gamma_zero_floor = kGammaZeroFloor;

  static Predictive from_zig(const ZigParams& p);
  ZigParams as_zig() const;

  int height() const { return a.height(); }
  int width() const { return a.width(); }

  Moments moments(Cell c) const;
  double log_likelihood(Cell c, double y) const;
  MomentFields moment_fields() const;
};

}  // namespace d2g
