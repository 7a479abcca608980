#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "json.hpp"

#include "d2g/distributions.hpp"
#include "d2g/grid.hpp"

namespace d2g {

struct MetricConfig {
  std::vector<double> thresholds_mm{0.2, 1.0, 2.0, 5.0, 10.0};
  std::vector<int> fss_neighborhoods{2, 10, 20};
  double rain_event_threshold_mm = 0.2;

  void validate() const;
  // Drops neighbourhoods that do not fit on the grid.
  MetricConfig for_grid(const GridSpec& spec) const;
};

nlohmann::json to_json(const MetricConfig& c);
MetricConfig metric_config_from_json(const nlohmann::json& j);

// Event = value >= threshold, on both sides.
struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  Confusion& operator+=(const Confusion& o);
  bool operator==(const Confusion&) const = default;
};

Confusion confusion(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold);

// Undefined (nullopt) when the denominator is zero.
std::optional<double> csi(const Confusion& c);
std::optional<double> fbi(const Confusion& c);
std::optional<double> csi(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold);
std::optional<double> fbi(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold);

// FSS = 1 - num / den with num = sum (F - O)^2 and den = sum F^2 + O^2 over
// cells whose window holds a valid cell. Windows of size n span offsets
// [-floor((n-1)/2), ceil((n-1)/2)], are clipped at the border and average
// over their valid cells only.
struct FssSums {
  double num = 0.0;
  double den = 0.0;

  FssSums& operator+=(const FssSums& o);
  std::optional<double> score() const;
};

FssSums fss_sums(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold,
                 int neighborhood);
std::optional<double> fss(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold,
                          int neighborhood);

// Closed-form CRPS; gamma uses rate beta.
double crps_gamma(double alpha, double beta, double y);
// Binarized rain indicator, with the 0.2 mm split between branches.
double crps_zig(double pi0, double alpha, double beta, double observed);
double crps_gaussian(double mu, double sigma, double y);
double crps(const Predictive& pred, Cell c, double y);

inline constexpr double kCrpsZeroBranchMm = 0.2;

struct MetricReport {
  MetricConfig config;
  std::vector<Confusion> counts;  // per threshold
  std::vector<std::optional<double>> csi;
  std::vector<std::optional<double>> fbi;
  std::vector<std::vector<FssSums>> fss_sums;  // [threshold][neighbourhood]
  std::vector<std::vector<std::optional<double>>> fss;
  std::optional<double> csi_mean;
  std::optional<double> fbi_mean;
  std::optional<double> fss_mean;
  double crps = 0.0;
  double mae = 0.0;
  double mse = 0.0;
  std::int64_t cells = 0;
  std::int64_t cases = 0;

  // CSI at the threshold equal to `mm`; throws if it is not configured.
  std::optional<double> csi_at(double mm) const;
};

inline constexpr int kMetricReportVersion = 1;

nlohmann::json to_json(const MetricReport& r);
MetricReport metric_report_from_json(const nlohmann::json& j);

// Pools counts and sums over cases in insertion order.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(MetricConfig config);

  void add(const Predictive& pred, const Field<double>& obs, const Mask& valid);
  // Point forecast; its CRPS is the absolute error.
  void add_point(const Field<double>& pred, const Field<double>& obs, const Mask& valid);

  MetricReport report() const;

 private:
  template <typename CrpsFn>
  void add_case(const Field<double>& mean, const Field<double>& obs, const Mask& valid, CrpsFn&& crps_at);

  MetricConfig config_;
  std::vector<Confusion> counts_;
  std::vector<std::vector<FssSums>> fss_;
  double crps_sum_ = 0.0;
  double abs_sum_ = 0.0;
  double sq_sum_ = 0.0;
  std::int64_t cells_ = 0;
  std::int64_t cases_ = 0;
};

MetricReport evaluate(const Predictive& pred, const Field<double>& obs, const Mask& valid, const MetricConfig& config);

// Dense target field and mask from a sparse selection.
struct SparseTargets {
  Field<double> values;
  Mask valid;
};
SparseTargets to_fields(const TargetSelection& sel, const GridSpec& spec);

}  // namespace d2g
