#include "d2g/metrics.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <numbers>

namespace d2g {

void MetricConfig::validate() const {
  if (thresholds_mm.empty()) throw Error("MetricConfig: no thresholds");
  for (std::size_t k = 0; k < thresholds_mm.size(); ++k) {
    if (!(thresholds_mm[k] > 0.0)) throw Error("MetricConfig: thresholds must be positive");
    if (k > 0 && !(thresholds_mm[k] > thresholds_mm[k - 1])) throw Error("MetricConfig: thresholds must ascend");
  }
  for (int n : fss_neighborhoods)
    if (n < 1) throw Error("MetricConfig: neighbourhoods must be positive");
  if (!(rain_event_threshold_mm > 0.0)) throw Error("MetricConfig: rain event threshold must be positive");
}

MetricConfig MetricConfig::for_grid(const GridSpec& spec) const {
  MetricConfig out = *this;
  out.fss_neighborhoods.clear();
  for (int n : fss_neighborhoods)
    if (n <= spec.height && n <= spec.width) out.fss_neighborhoods.push_back(n);
  return out;
}

nlohmann::json to_json(const MetricConfig& c) {
  return {{"thresholds_mm", c.thresholds_mm},
          {"fss_neighborhoods_cells", c.fss_neighborhoods},
          {"rain_event_threshold_mm", c.rain_event_threshold_mm}};
}

MetricConfig metric_config_from_json(const nlohmann::json& j) {
  MetricConfig c;
  if (j.contains("thresholds_mm")) c.thresholds_mm = j.at("thresholds_mm").get<std::vector<double>>();
  if (j.contains("fss_neighborhoods_cells")) c.fss_neighborhoods = j.at("fss_neighborhoods_cells").get<std::vector<int>>();
  if (j.contains("rain_event_threshold_mm")) c.rain_event_threshold_mm = j.at("rain_event_threshold_mm").get<double>();
  c.validate();
  return c;
}

Confusion& Confusion::operator+=(const Confusion& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

namespace {

void require_same_shape(const Field<double>& pred, const Field<double>& obs, const Mask& valid) {
  if (!pred.same_shape(obs) || !pred.same_shape(valid)) throw ShapeError("metric inputs differ in shape");
}

void require_cells(const Mask& valid) {
  if (count(valid) == 0) throw Error("metric: no evaluable cells");
}

}  // namespace

Confusion confusion(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold) {
  require_same_shape(pred, obs, valid);
  Confusion c;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (!valid.data()[k]) continue;
    const bool p = pred.data()[k] >= threshold;
    const bool o = obs.data()[k] >= threshold;
    if (p && o) ++c.tp;
    else if (p) ++c.fp;
    else if (o) ++c.fn;
    else ++c.tn;
  }
  return c;
}

std::optional<double> csi(const Confusion& c) {
  const std::int64_t d = c.tp + c.fp + c.fn;
  if (d == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(d);
}

std::optional<double> fbi(const Confusion& c) {
  const std::int64_t d = c.tp + c.fn;
  if (d == 0) return std::nullopt;
  return static_cast<double>(c.tp + c.fp) / static_cast<double>(d);
}

std::optional<double> csi(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold) {
  require_cells(valid);
  return csi(confusion(pred, obs, valid, threshold));
}

std::optional<double> fbi(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold) {
  require_cells(valid);
  return fbi(confusion(pred, obs, valid, threshold));
}

FssSums& FssSums::operator+=(const FssSums& o) {
  num += o.num;
  den += o.den;
  return *this;
}

std::optional<double> FssSums::score() const {
  if (den == 0.0) return std::nullopt;
  return 1.0 - num / den;
}

namespace {

// Inclusive prefix sums with a zero guard row and column.
struct Integral {
  int h, w;
  std::vector<double> s;

  template <typename F>
  Integral(int height, int width, F&& value) : h(height), w(width), s(static_cast<std::size_t>((h + 1) * (w + 1)), 0.0) {
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) at(i + 1, j + 1) = value(i, j) + at(i, j + 1) + at(i + 1, j) - at(i, j);
  }
  double& at(int i, int j) { return s[static_cast<std::size_t>(i * (w + 1) + j)]; }
  double at(int i, int j) const { return s[static_cast<std::size_t>(i * (w + 1) + j)]; }
  // Sum over rows [i0, i1] and columns [j0, j1].
  double box(int i0, int i1, int j0, int j1) const { return at(i1 + 1, j1 + 1) - at(i0, j1 + 1) - at(i1 + 1, j0) + at(i0, j0); }
};

}  // namespace

FssSums fss_sums(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold,
                 int neighborhood) {
  require_same_shape(pred, obs, valid);
  const int h = pred.height(), w = pred.width();
  if (neighborhood < 1 || neighborhood > h || neighborhood > w)
    throw Error("fss: neighbourhood " + std::to_string(neighborhood) + " does not fit the grid");
  const Integral nv(h, w, [&](int i, int j) { return valid(i, j) ? 1.0 : 0.0; });
  const Integral np(h, w, [&](int i, int j) { return valid(i, j) && pred(i, j) >= threshold ? 1.0 : 0.0; });
  const Integral no(h, w, [&](int i, int j) { return valid(i, j) && obs(i, j) >= threshold ? 1.0 : 0.0; });
  const int lo = (neighborhood - 1) / 2, hi = neighborhood / 2;
  FssSums out;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const int i0 = std::max(0, i - lo), i1 = std::min(h - 1, i + hi);
      const int j0 = std::max(0, j - lo), j1 = std::min(w - 1, j + hi);
      const double n = nv.box(i0, i1, j0, j1);
      if (n == 0.0) continue;
      const double f = np.box(i0, i1, j0, j1) / n;
      const double o = no.box(i0, i1, j0, j1) / n;
      out.num += (f - o) * (f - o);
      out.den += f * f + o * o;
    }
  return out;
}

std::optional<double> fss(const Field<double>& pred, const Field<double>& obs, const Mask& valid, double threshold,
                          int neighborhood) {
  require_cells(valid);
  return fss_sums(pred, obs, valid, threshold, neighborhood).score();
}

double crps_gamma(double alpha, double beta, double y) {
  if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta))
    throw Error("crps_gamma: parameters must be positive");
  if (!(y >= 0.0) || !std::isfinite(y)) throw Error("crps_gamma: observation must be non-negative");
  const double f_a = y > 0.0 ? boost::math::gamma_p(alpha, beta * y) : 0.0;
  const double f_a1 = y > 0.0 ? boost::math::gamma_p(alpha + 1.0, beta * y) : 0.0;
  const double b = boost::math::beta(alpha + 0.5, 0.5);
  return y * (2.0 * f_a - 1.0) - (alpha / beta) * (2.0 * f_a1 - 1.0) - alpha / (beta * std::numbers::pi) * b;
}

double crps_zig(double pi0, double alpha, double beta, double observed) {
  if (!(pi0 > 0.0 && pi0 < 1.0)) throw Error("crps_zig: pi0 outside (0, 1)");
  const double p_nonzero = rain_indicator(pi0) ? 1.0 : 0.0;
  const double p_zero = 1.0 - p_nonzero;
  if (observed <= kCrpsZeroBranchMm) return p_nonzero * crps_gamma(alpha, beta, 0.0);
  return p_zero * observed + p_nonzero * crps_gamma(alpha, beta, observed);
}

double crps_gaussian(double mu, double sigma, double y) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw Error("crps_gaussian: sigma must be positive");
  const double z = (y - mu) / sigma;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

double crps(const Predictive& pred, Cell c, double y) {
  switch (pred.kind) {
    case OutputKind::Zig:
      return crps_zig(pred.pi0[c], pred.a[c], pred.b[c], y);
    case OutputKind::Gamma:
      return crps_gamma(pred.a[c], pred.b[c], y);
    case OutputKind::Gaussian:
      return crps_gaussian(pred.a[c], pred.b[c], y);
  }
  return 0.0;
}

std::optional<double> MetricReport::csi_at(double mm) const {
  for (std::size_t k = 0; k < config.thresholds_mm.size(); ++k)
    if (std::abs(config.thresholds_mm[k] - mm) < 1e-12) return csi[k];
  throw Error("MetricReport: threshold " + std::to_string(mm) + " not configured");
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  int n = 0;
  for (const auto& x : v)
    if (x) {
      s += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / n;
}

}  // namespace

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json thr = nlohmann::json::array();
  for (std::size_t k = 0; k < r.config.thresholds_mm.size(); ++k) {
    nlohmann::json fss = nlohmann::json::object();
    for (std::size_t n = 0; n < r.config.fss_neighborhoods.size(); ++n)
      fss[std::to_string(r.config.fss_neighborhoods[n])] = {
          {"score", opt(r.fss[k][n])}, {"num", r.fss_sums[k][n].num}, {"den", r.fss_sums[k][n].den}};
    thr.push_back({{"threshold_mm", r.config.thresholds_mm[k]},
                   {"csi", opt(r.csi[k])},
                   {"fbi", opt(r.fbi[k])},
                   {"tp", r.counts[k].tp},
                   {"fp", r.counts[k].fp},
                   {"fn", r.counts[k].fn},
                   {"tn", r.counts[k].tn},
                   {"fss", fss}});
  }
  return {{"schema", "d2g-metric-report"},
          {"version", kMetricReportVersion},
          {"config", to_json(r.config)},
          {"thresholds", thr},
          {"csi_mean", opt(r.csi_mean)},
          {"fbi_mean", opt(r.fbi_mean)},
          {"fss_mean", opt(r.fss_mean)},
          {"crps", r.crps},
          {"mae", r.mae},
          {"mse", r.mse},
          {"cells", r.cells},
          {"cases", r.cases}};
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "d2g-metric-report") throw FormatError("not a metric report");
  if (j.at("version").get<int>() != kMetricReportVersion) throw VersionError("unsupported metric report version");
  MetricReport r;
  r.config = metric_config_from_json(j.at("config"));
  for (const auto& t : j.at("thresholds")) {
    Confusion c;
    c.tp = t.at("tp");
    c.fp = t.at("fp");
    c.fn = t.at("fn");
    c.tn = t.at("tn");
    r.counts.push_back(c);
    r.csi.push_back(opt_from(t.at("csi")));
    r.fbi.push_back(opt_from(t.at("fbi")));
    std::vector<FssSums> sums;
    std::vector<std::optional<double>> scores;
    for (int n : r.config.fss_neighborhoods) {
      const auto& f = t.at("fss").at(std::to_string(n));
      sums.push_back({f.at("num").get<double>(), f.at("den").get<double>()});
      scores.push_back(opt_from(f.at("score")));
    }
    r.fss_sums.push_back(sums);
    r.fss.push_back(scores);
  }
  r.csi_mean = opt_from(j.at("csi_mean"));
  r.fbi_mean = opt_from(j.at("fbi_mean"));
  r.fss_mean = opt_from(j.at("fss_mean"));
  r.crps = j.at("crps");
  r.mae = j.at("mae");
  r.mse = j.at("mse");
  r.cells = j.at("cells");
  r.cases = j.at("cases");
  return r;
}

MetricAccumulator::MetricAccumulator(MetricConfig config) : config_(std::move(config)) {
  config_.validate();
  counts_.assign(config_.thresholds_mm.size(), Confusion{});
  fss_.assign(config_.thresholds_mm.size(), std::vector<FssSums>(config_.fss_neighborhoods.size()));
}

template <typename CrpsFn>
void MetricAccumulator::add_case(const Field<double>& mean, const Field<double>& obs, const Mask& valid,
                                 CrpsFn&& crps_at) {
  require_same_shape(mean, obs, valid);
  require_cells(valid);
  for (std::size_t k = 0; k < config_.thresholds_mm.size(); ++k) {
    counts_[k] += confusion(mean, obs, valid, config_.thresholds_mm[k]);
    for (std::size_t n = 0; n < config_.fss_neighborhoods.size(); ++n)
      fss_[k][n] += fss_sums(mean, obs, valid, config_.thresholds_mm[k], config_.fss_neighborhoods[n]);
  }
  for (int i = 0; i < mean.height(); ++i)
    for (int j = 0; j < mean.width(); ++j) {
      if (!valid(i, j)) continue;
      const double e = mean(i, j) - obs(i, j);
      abs_sum_ += std::abs(e);
      sq_sum_ += e * e;
      crps_sum_ += crps_at(Cell{i, j}, obs(i, j));
      ++cells_;
    }
  ++cases_;
}

void MetricAccumulator::add(const Predictive& pred, const Field<double>& obs, const Mask& valid) {
  const MomentFields m = pred.moment_fields();
  add_case(m.mean, obs, valid, [&](Cell c, double y) { return crps(pred, c, y); });
}

void MetricAccumulator::add_point(const Field<double>& pred, const Field<double>& obs, const Mask& valid) {
  add_case(pred, obs, valid, [&](Cell c, double y) { return std::abs(pred[c] - y); });
}

MetricReport MetricAccumulator::report() const {
  if (cells_ == 0) throw Error("metric report: empty evaluation set");
  MetricReport r;
  r.config = config_;
  r.counts = counts_;
  r.fss_sums = fss_;
  std::vector<std::optional<double>> all_fss;
  for (std::size_t k = 0; k < counts_.size(); ++k) {
    r.csi.push_back(csi(counts_[k]));
    r.fbi.push_back(fbi(counts_[k]));
    std::vector<std::optional<double>> row;
    for (const FssSums& s : fss_[k]) {
      row.push_back(s.score());
      all_fss.push_back(row.back());
    }
    r.fss.push_back(row);
  }
  r.csi_mean = mean_defined(r.csi);
  r.fbi_mean = mean_defined(r.fbi);
  r.fss_mean = mean_defined(all_fss);
  const double n = static_cast<double>(cells_);
  r.crps = crps_sum_ / n;
  r.mae = abs_sum_ / n;
  r.mse = sq_sum_ / n;
  r.cells = cells_;
  r.cases = cases_;
  return r;
}

MetricReport evaluate(const Predictive& pred, const Field<double>& obs, const Mask& valid, const MetricConfig& config) {
  MetricAccumulator acc(config);
  acc.add(pred, obs, valid);
  return acc.report();
}

SparseTargets to_fields(const TargetSelection& sel, const GridSpec& spec) {
  SparseTargets t{Field<double>(spec.height, spec.width, 0.0), Mask(spec.height, spec.width, 0)};
  for (std::size_t k = 0; k < sel.size(); ++k) {
    t.values[sel.cells[k]] = sel.y_true[k];
    t.valid[sel.cells[k]] = 1;
  }
  return t;
}

}  // namespace d2g
