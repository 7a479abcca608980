#include "d2g/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "d2g/episode_io.hpp"
#include "d2g/json_io.hpp"
#include "d2g/rng.hpp"

namespace d2g {

namespace fs = std::filesystem;

namespace {

double uniform(Rng& rng, Interval iv) {
  if (iv.hi <= iv.lo) return iv.lo;
  return std::uniform_real_distribution<double>(iv.lo, iv.hi)(rng);
}

int uniform_int(Rng& rng, IntInterval iv) { return std::uniform_int_distribution<int>(iv.lo, iv.hi)(rng); }

bool bernoulli(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

struct StormCell {
  double y0_km, x0_km;  // position at regime start
  double vy, vx;        // km/h
  double sigma_major, sigma_minor, angle;
  double peak, phase;
};

void check_interval(Interval iv, const char* what) {
  if (!(iv.hi >= iv.lo)) throw Error(std::string(what) + ": empty interval");
}

void check_prob(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(std::string(what) + " must lie in [0, 1]");
}

}  // namespace

void StormFieldConfig::validate() const {
  if (n_cells_range.lo < 0 || n_cells_range.hi < n_cells_range.lo) throw Error("storm: bad n_cells_range");
  check_interval(cell_sigma_km_range, "storm.cell_sigma_km_range");
  if (!(cell_sigma_km_range.lo > 0.0)) throw Error("storm: cell sigma must be positive");
  check_interval(advection_velocity_kmph, "storm.advection_velocity_kmph");
  check_prob(dry_probability, "storm.dry_probability");
  if (regime_hours < 1) throw Error("storm: regime_hours must be >= 1");
  if (!(max_anisotropy >= 1.0)) throw Error("storm: max_anisotropy must be >= 1");
  if (!(peak_log_sigma >= 0.0)) throw Error("storm: peak_log_sigma must be >= 0");
}

void SensorNoiseConfig::validate() const {
  check_prob(station_dropout_prob, "noise.station_dropout_prob");
  check_prob(station_outlier_prob, "noise.station_outlier_prob");
  check_interval(station_bias_range, "noise.station_bias_range");
  if (!(radar_mp_a > 0.0) || !(radar_mp_b > 0.0)) throw Error("noise: Marshall-Palmer a and b must be positive");
  if (!(radar_smoothing_sigma_cells >= 0.0)) throw Error("noise: radar smoothing must be >= 0");
  if (!(radar_gain_bias > 0.0)) throw Error("noise: radar gain must be positive");
  if (radar_blockage_sectors < 0) throw Error("noise: blockage sectors must be >= 0");
}

void SplitPlan::validate() const {
  if (train_days <= 0 || val_days <= 0 || test_days <= 0) throw Error("split plan: day counts must be positive");
  if (blackout_hours < 0) throw Error("split plan: blackout_hours must be >= 0");
}

std::int64_t SplitPlan::cycle_hours() const {
  return 24LL * (train_days + val_days + test_days) + 3LL * blackout_hours;
}

std::vector<RainField> generate_truth_sequence(const StormFieldConfig& config, const GridSpec& spec, int hours,
                                               std::uint64_t seed) {
  config.validate();
  spec.validate();
  if (hours < 1) throw Error("generate_truth_sequence: hours must be >= 1");

  const double cs = spec.cell_size_km;
  const double extent_y = spec.height * cs, extent_x = spec.width * cs;
  std::vector<RainField> out;
  out.reserve(static_cast<std::size_t>(hours));
  std::normal_distribution<double> n01(0.0, 1.0);

  for (int regime_start = 0; regime_start < hours; regime_start += config.regime_hours) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(regime_start)));
    const int regime_end = std::min(hours, regime_start + config.regime_hours);
    const bool dry = bernoulli(rng, config.dry_probability);

    std::vector<StormCell> cells;
    if (!dry) {
      const double wind_y = uniform(rng, config.advection_velocity_kmph);
      const double wind_x = uniform(rng, config.advection_velocity_kmph);
      const int n = uniform_int(rng, config.n_cells_range);
      const double half = 0.5 * config.regime_hours;
      for (int c = 0; c < n; ++c) {
        StormCell s{};
        s.vy = wind_y * (1.0 + 0.15 * n01(rng));
        s.vx = wind_x * (1.0 + 0.15 * n01(rng));
        // Centre the trajectory on the domain at mid-regime.
        s.y0_km = std::uniform_real_distribution<double>(0.0, extent_y)(rng) - s.vy * half;
        s.x0_km = std::uniform_real_distribution<double>(0.0, extent_x)(rng) - s.vx * half;
        const double sigma = uniform(rng, config.cell_sigma_km_range);
        const double ratio = uniform(rng, {1.0, config.max_anisotropy});
        s.sigma_major = sigma * std::sqrt(ratio);
        s.sigma_minor = sigma / std::sqrt(ratio);
        s.angle = std::uniform_real_distribution<double>(0.0, std::numbers::pi)(rng);
        s.peak = std::exp(config.peak_log_mean + config.peak_log_sigma * n01(rng));
        s.phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
        cells.push_back(s);
      }
    }

    for (int h = regime_start; h < regime_end; ++h) {
      RainField f(spec);
      const double dt = h - regime_start;
      for (const StormCell& s : cells) {
        const double cy = s.y0_km + s.vy * dt, cx = s.x0_km + s.vx * dt;
        const double amp =
            s.peak * (0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * dt / config.intensity_period_hours + s.phase));
        const double ca = std::cos(s.angle), sa = std::sin(s.angle);
        for (int i = 0; i < spec.height; ++i) {
          const double dy = (i + 0.5) * cs - cy;
          for (int j = 0; j < spec.width; ++j) {
            const double dx = (j + 0.5) * cs - cx;
            const double u = (ca * dx + sa * dy) / s.sigma_major;
            const double v = (-sa * dx + ca * dy) / s.sigma_minor;
            f.values(i, j) += static_cast<float>(amp * std::exp(-0.5 * (u * u + v * v)));
          }
        }
      }
      for (float& v : f.values.data())
        if (v < config.wet_threshold_mm) v = 0.0f;
      out.push_back(std::move(f));
    }
  }
  return out;
}

std::vector<Station> draw_station_layout(const GridSpec& spec, const StationLayoutConfig& config, std::uint64_t seed) {
  spec.validate();
  if (config.stations < 1) throw Error("station layout: need at least one station");
  Rng rng(mix_seed(seed, 0x5151));
  std::vector<std::pair<double, double>> centres;
  for (int c = 0; c < config.urban_centers; ++c)
    centres.emplace_back(std::uniform_real_distribution<double>(0.15 * spec.height, 0.85 * spec.height)(rng),
                         std::uniform_real_distribution<double>(0.15 * spec.width, 0.85 * spec.width)(rng));
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<Station> out;
  out.reserve(static_cast<std::size_t>(config.stations));
  for (int s = 0; s < config.stations; ++s) {
    Cell c;
    if (!centres.empty() && bernoulli(rng, config.urban_fraction)) {
      const auto& [ci, cj] = centres[std::uniform_int_distribution<std::size_t>(0, centres.size() - 1)(rng)];
      c.i = static_cast<int>(std::floor(ci + config.urban_sigma_cells * n01(rng)));
      c.j = static_cast<int>(std::floor(cj + config.urban_sigma_cells * n01(rng)));
      c.i = std::clamp(c.i, 0, spec.height - 1);
      c.j = std::clamp(c.j, 0, spec.width - 1);
    } else {
      c.i = std::uniform_int_distribution<int>(0, spec.height - 1)(rng);
      c.j = std::uniform_int_distribution<int>(0, spec.width - 1)(rng);
    }
    out.push_back({s, c});
  }
  return out;
}

std::vector<StationObservation> simulate_stations(const std::vector<RainField>& truth,
                                                  const std::vector<Station>& layout, const SensorNoiseConfig& noise,
                                                  std::uint64_t seed) {
  noise.validate();
  if (layout.empty()) throw Error("simulate_stations: empty station layout");
  std::vector<StationObservation> out;
  std::normal_distribution<double> n01(0.0, 1.0);
  for (const Station& st : layout) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(st.id)));
    const double bias = uniform(rng, noise.station_bias_range);
    for (std::size_t h = 0; h < truth.size(); ++h) {
      const RainField& f = truth[h];
      if (!f.spec.contains(st.cell)) throw Error("simulate_stations: station outside grid");
      // Draw every variate unconditionally so the stream does not depend on
      // which branches fire.
      const bool drop = bernoulli(rng, noise.station_dropout_prob);
      const bool outlier = bernoulli(rng, noise.station_outlier_prob);
      const double z = n01(rng);
      const double spurious = uniform(rng, noise.station_outlier_mm);
      if (drop || !f.valid[st.cell]) continue;
      double v = f.values[st.cell] * bias;
      if (noise.station_multiplicative_sigma > 0.0) v *= std::exp(noise.station_multiplicative_sigma * z);
      if (outlier) v = spurious;
      out.push_back({st.cell, static_cast<int>(h), static_cast<float>(std::max(0.0, v)), st.id});
    }
  }
  return out;
}

namespace {

std::vector<double> gaussian_taps(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int d = -r; d <= r; ++d) sum += k[static_cast<std::size_t>(d + r)] = std::exp(-0.5 * d * d / (sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

// Separable blur with renormalisation at the borders.
Field<double> blur(const Field<double>& in, double sigma) {
  const auto k = gaussian_taps(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int H = in.height(), W = in.width();
  Field<double> tmp(H, W), out(H, W);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double acc = 0.0, wsum = 0.0;
      for (int d = -r; d <= r; ++d) {
        const int jj = j + d;
        if (jj < 0 || jj >= W) continue;
        const double w = k[static_cast<std::size_t>(d + r)];
        acc += w * in(i, jj);
        wsum += w;
      }
      tmp(i, j) = acc / wsum;
    }
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double acc = 0.0, wsum = 0.0;
      for (int d = -r; d <= r; ++d) {
        const int ii = i + d;
        if (ii < 0 || ii >= H) continue;
        const double w = k[static_cast<std::size_t>(d + r)];
        acc += w * tmp(ii, j);
        wsum += w;
      }
      out(i, j) = acc / wsum;
    }
  return out;
}

}  // namespace

double rain_to_reflectivity(double rain_mm, double a, double b) { return a * std::pow(rain_mm, b); }

double reflectivity_to_rain(double z, double a, double b) { return z > 0.0 ? std::pow(z / a, 1.0 / b) : 0.0; }

RainField simulate_radar(const RainField& truth, const SensorNoiseConfig& noise, std::uint64_t seed) {
  noise.validate();
  truth.validate();
  const int H = truth.spec.height, W = truth.spec.width;
  const double a = noise.radar_mp_a, b = noise.radar_mp_b;

  Field<double> z(H, W);
  for (std::size_t k = 0; k < z.size(); ++k)
    z.data()[k] = rain_to_reflectivity(truth.values.data()[k], a, b);

  Rng rng(mix_seed(seed, 0xa11));
  double gain = noise.radar_gain_bias;
  if (noise.radar_gain_jitter_sigma > 0.0)
    gain *= std::exp(noise.radar_gain_jitter_sigma * std::normal_distribution<double>(0.0, 1.0)(rng));
  if (gain != 1.0)
    for (double& v : z.data()) v *= gain;
  if (noise.radar_smoothing_sigma_cells > 0.0) z = blur(z, noise.radar_smoothing_sigma_cells);

  if (noise.radar_blockage_sectors > 0) {
    // Sectors are a property of the radar site, so they come from a fixed seed.
    Rng srng(mix_seed(noise.radar_blockage_seed, 0xb10c));
    const double ci = 0.5 * H, cj = 0.5 * W;
    const double half = 0.5 * noise.radar_blockage_width_deg * std::numbers::pi / 180.0;
    for (int s = 0; s < noise.radar_blockage_sectors; ++s) {
      const double az = std::uniform_real_distribution<double>(-std::numbers::pi, std::numbers::pi)(srng);
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const double dy = i + 0.5 - ci, dx = j + 0.5 - cj;
          if (dy * dy + dx * dx < 4.0) continue;
          double d = std::atan2(dy, dx) - az;
          d = std::remainder(d, 2.0 * std::numbers::pi);
          if (std::abs(d) <= half) z(i, j) = 0.0;
        }
    }
  }

  RainField out(truth.spec);
  out.valid = truth.valid;
  for (std::size_t k = 0; k < z.size(); ++k) {
    out.values.data()[k] = static_cast<float>(reflectivity_to_rain(z.data()[k], a, b));
  }
  return out;
}

std::vector<StationSlice> grid_stations(const std::vector<StationObservation>& observations, const GridSpec& spec,
                                        int timesteps) {
  spec.validate();
  if (timesteps < 1) throw Error("grid_stations: timesteps must be >= 1");
  const std::size_t n = spec.cells();
  std::vector<std::vector<float>> buckets(static_cast<std::size_t>(timesteps) * n);
  for (const StationObservation& o : observations) {
    if (!spec.contains(o.cell)) throw Error("grid_stations: observation outside grid");
    if (o.timestep < 0 || o.timestep >= timesteps) throw Error("grid_stations: timestep out of range");
    if (!std::isfinite(o.value) || o.value < 0.0f) throw Error("grid_stations: invalid observation value");
    buckets[static_cast<std::size_t>(o.timestep) * n + static_cast<std::size_t>(o.cell.i * spec.width + o.cell.j)]
        .push_back(o.value);
  }
  std::vector<StationSlice> out;
  for (int t = 0; t < timesteps; ++t) {
    StationSlice s{Field<float>(spec.height, spec.width), Mask(spec.height, spec.width)};
    for (std::size_t k = 0; k < n; ++k) {
      auto& b = buckets[static_cast<std::size_t>(t) * n + k];
      if (b.empty()) continue;
      std::sort(b.begin(), b.end());
      const std::size_t m = b.size();
      const double med = m % 2 ? b[m / 2] : 0.5 * (static_cast<double>(b[m / 2 - 1]) + b[m / 2]);
      s.values.data()[k] = static_cast<float>(med);
      s.present.data()[k] = 1;
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::size_t context_count(std::size_t available, double retain_fraction) {
  if (!(retain_fraction >= 0.0 && retain_fraction <= 1.0)) throw Error("retain fraction must lie in [0, 1]");
  // The epsilon protects exact products such as 0.4 * 80 from rounding down.
  return static_cast<std::size_t>(std::floor(retain_fraction * static_cast<double>(available) + 1e-9));
}

Episode build_episode(const EpisodeInputs& in, double retain_fraction, MaskingMode mode, std::uint64_t seed) {
  in.spec.validate();
  if (in.stations.empty()) throw Error("build_episode: no station history");
  const int H = in.spec.height, W = in.spec.width;

  std::vector<Cell> available;
  for (const Cell& c : cells_of(in.station_cells))
    if (!in.holdout[c]) available.push_back(c);
  if (available.empty()) throw Error("build_episode: no station cells remain after removing the holdout set");

  Mask chosen(H, W);
  if (mode == MaskingMode::Test) {
    for (const Cell& c : available) chosen[c] = 1;
  } else {
    Rng rng(mix_seed(seed, 0xc0de));
    std::shuffle(available.begin(), available.end(), rng);
    const std::size_t k = context_count(available.size(), retain_fraction);
    for (std::size_t n = 0; n < k; ++n) chosen[available[n]] = 1;
  }

  Episode ep;
  ep.spec = in.spec;
  ep.timesteps = static_cast<int>(in.stations.size());
  ep.stations = in.stations;
  ep.radar = in.radar;
  ep.truth = in.truth;
  ep.holdout = in.holdout;
  ep.seed = seed;
  ep.split = mode == MaskingMode::Train ? Split::Train : mode == MaskingMode::Validation ? Split::Validation : Split::Test;
  for (const StationSlice& s : in.stations) {
    Mask c(H, W);
    for (std::size_t k = 0; k < c.size(); ++k) c.data()[k] = chosen.data()[k] && s.present.data()[k] ? 1 : 0;
    ep.context.push_back(std::move(c));
  }
  const StationSlice& last = in.stations.back();
  ep.target = Mask(H, W);
  for (std::size_t k = 0; k < ep.target.size(); ++k) {
    if (!last.present.data()[k] || !in.station_cells.data()[k]) continue;
    if (mode == MaskingMode::Test)
      ep.target.data()[k] = in.holdout.data()[k];
    else
      ep.target.data()[k] = !in.holdout.data()[k] && !ep.context.back().data()[k];
  }
  return ep;
}

const std::vector<std::int64_t>& Timeline::hours(Split s) const {
  switch (s) {
    case Split::Train:
      return train;
    case Split::Validation:
      return val;
    case Split::Test:
      return test;
  }
  return train;
}

std::vector<std::int64_t> Timeline::episode_hours(Split s, int timesteps) const {
  std::vector<std::int64_t> out;
  for (const SplitBlock& b : blocks) {
    if (b.split != s) continue;
    for (std::int64_t h = b.begin + timesteps - 1; h < b.end; ++h) out.push_back(h);
  }
  return out;
}

Timeline split_timeline(std::int64_t hours, const SplitPlan& plan) {
  plan.validate();
  const std::int64_t tr = 24LL * plan.train_days, va = 24LL * plan.val_days, te = 24LL * plan.test_days;
  const std::int64_t bo = plan.blackout_hours;
  const std::int64_t needed = tr + bo + va + bo + te;
  if (hours < needed)
    throw Error("split_timeline: " + std::to_string(hours) + " hours is shorter than one cycle (" +
                std::to_string(needed) + ")");
  Timeline tl;
  for (std::int64_t start = 0; start + needed <= hours; start += plan.cycle_hours()) {
    std::int64_t h = start;
    tl.blocks.push_back({Split::Train, h, h + tr});
    h += tr + bo;
    tl.blocks.push_back({Split::Validation, h, h + va});
    h += va + bo;
    tl.blocks.push_back({Split::Test, h, h + te});
  }
  for (const SplitBlock& b : tl.blocks) {
    auto& dst = b.split == Split::Train ? tl.train : b.split == Split::Validation ? tl.val : tl.test;
    for (std::int64_t h = b.begin; h < b.end; ++h) dst.push_back(h);
  }
  return tl;
}

std::vector<std::vector<Cell>> nested_density_masks(const std::vector<Cell>& cells, const std::vector<double>& fractions,
                                                    std::uint64_t seed) {
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) throw Error("nested_density_masks: fractions must lie in (0, 1]");
  std::vector<Cell> order = cells;
  std::sort(order.begin(), order.end());
  Rng rng(mix_seed(seed, 0xde5));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Cell>> out;
  for (double f : fractions) {
    const auto k = static_cast<std::size_t>(std::llround(f * static_cast<double>(order.size())));
    std::vector<Cell> m(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size())));
    std::sort(m.begin(), m.end());
    out.push_back(std::move(m));
  }
  return out;
}

void SyntheticDatasetConfig::validate() const {
  grid.validate();
  storm.validate();
  noise.validate();
  plan.validate();
  if (cycles < 1) throw Error("dataset: cycles must be >= 1");
  if (timesteps < 1) throw Error("dataset: timesteps must be >= 1");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw Error("dataset: holdout_fraction must be in [0, 1)");
  check_interval(retain_fraction, "dataset.retain_fraction");
  if (!(retain_fraction.lo >= 0.0 && retain_fraction.hi <= 1.0)) throw Error("dataset: retain_fraction outside [0, 1]");
}

namespace {

nlohmann::json iv_json(Interval iv) { return nlohmann::json::array({iv.lo, iv.hi}); }
Interval iv_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

nlohmann::json to_json(const SyntheticDatasetConfig& c) {
  const auto& s = c.storm;
  const auto& n = c.noise;
  return {
      {"grid", to_json(c.grid)},
      {"storm",
       {{"n_cells_range", {s.n_cells_range.lo, s.n_cells_range.hi}},
        {"cell_sigma_km_range", iv_json(s.cell_sigma_km_range)},
        {"peak_intensity_lognormal", {s.peak_log_mean, s.peak_log_sigma}},
        {"advection_velocity_kmph", iv_json(s.advection_velocity_kmph)},
        {"dry_probability", s.dry_probability},
        {"regime_hours", s.regime_hours},
        {"max_anisotropy", s.max_anisotropy},
        {"wet_threshold_mm", s.wet_threshold_mm},
        {"intensity_period_hours", s.intensity_period_hours}}},
      {"noise",
       {{"station_multiplicative_sigma", n.station_multiplicative_sigma},
        {"station_bias_range", iv_json(n.station_bias_range)},
        {"station_dropout_prob", n.station_dropout_prob},
        {"station_outlier_prob", n.station_outlier_prob},
        {"station_outlier_mm", iv_json(n.station_outlier_mm)},
        {"radar_mp_a", n.radar_mp_a},
        {"radar_mp_b", n.radar_mp_b},
        {"radar_smoothing_sigma_cells", n.radar_smoothing_sigma_cells},
        {"radar_gain_bias", n.radar_gain_bias},
        {"radar_gain_jitter_sigma", n.radar_gain_jitter_sigma},
        {"radar_blockage_sectors", n.radar_blockage_sectors},
        {"radar_blockage_width_deg", n.radar_blockage_width_deg},
        {"radar_blockage_seed", n.radar_blockage_seed}}},
      {"layout",
       {{"stations", c.layout.stations},
        {"urban_centers", c.layout.urban_centers},
        {"urban_fraction", c.layout.urban_fraction},
        {"urban_sigma_cells", c.layout.urban_sigma_cells}}},
      {"split_plan",
       {{"train_days", c.plan.train_days},
        {"val_days", c.plan.val_days},
        {"test_days", c.plan.test_days},
        {"blackout_hours", c.plan.blackout_hours}}},
      {"cycles", c.cycles},
      {"timesteps", c.timesteps},
      {"holdout_fraction", c.holdout_fraction},
      {"retain_fraction", iv_json(c.retain_fraction)},
      {"seed", c.seed},
  };
}

SyntheticDatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  SyntheticDatasetConfig c;
  try {
    if (j.contains("grid")) c.grid = grid_from_json(j["grid"]);
    if (j.contains("storm")) {
      const auto& s = j["storm"];
      if (s.contains("n_cells_range")) c.storm.n_cells_range = {s["n_cells_range"][0], s["n_cells_range"][1]};
      if (s.contains("cell_sigma_km_range")) c.storm.cell_sigma_km_range = iv_from(s["cell_sigma_km_range"]);
      if (s.contains("peak_intensity_lognormal")) {
        c.storm.peak_log_mean = s["peak_intensity_lognormal"][0];
        c.storm.peak_log_sigma = s["peak_intensity_lognormal"][1];
      }
      if (s.contains("advection_velocity_kmph")) c.storm.advection_velocity_kmph = iv_from(s["advection_velocity_kmph"]);
      c.storm.dry_probability = s.value("dry_probability", c.storm.dry_probability);
      c.storm.regime_hours = s.value("regime_hours", c.storm.regime_hours);
      c.storm.max_anisotropy = s.value("max_anisotropy", c.storm.max_anisotropy);
      c.storm.wet_threshold_mm = s.value("wet_threshold_mm", c.storm.wet_threshold_mm);
      c.storm.intensity_period_hours = s.value("intensity_period_hours", c.storm.intensity_period_hours);
    }
    if (j.contains("noise")) {
      const auto& n = j["noise"];
      auto& o = c.noise;
      o.station_multiplicative_sigma = n.value("station_multiplicative_sigma", o.station_multiplicative_sigma);
      if (n.contains("station_bias_range")) o.station_bias_range = iv_from(n["station_bias_range"]);
      o.station_dropout_prob = n.value("station_dropout_prob", o.station_dropout_prob);
      o.station_outlier_prob = n.value("station_outlier_prob", o.station_outlier_prob);
      if (n.contains("station_outlier_mm")) o.station_outlier_mm = iv_from(n["station_outlier_mm"]);
      o.radar_mp_a = n.value("radar_mp_a", o.radar_mp_a);
      o.radar_mp_b = n.value("radar_mp_b", o.radar_mp_b);
      o.radar_smoothing_sigma_cells = n.value("radar_smoothing_sigma_cells", o.radar_smoothing_sigma_cells);
      o.radar_gain_bias = n.value("radar_gain_bias", o.radar_gain_bias);
      o.radar_gain_jitter_sigma = n.value("radar_gain_jitter_sigma", o.radar_gain_jitter_sigma);
      o.radar_blockage_sectors = n.value("radar_blockage_sectors", o.radar_blockage_sectors);
      o.radar_blockage_width_deg = n.value("radar_blockage_width_deg", o.radar_blockage_width_deg);
      o.radar_blockage_seed = n.value("radar_blockage_seed", o.radar_blockage_seed);
    }
    if (j.contains("layout")) {
      const auto& l = j["layout"];
      c.layout.stations = l.value("stations", c.layout.stations);
      c.layout.urban_centers = l.value("urban_centers", c.layout.urban_centers);
      c.layout.urban_fraction = l.value("urban_fraction", c.layout.urban_fraction);
      c.layout.urban_sigma_cells = l.value("urban_sigma_cells", c.layout.urban_sigma_cells);
    }
    if (j.contains("split_plan")) {
      const auto& p = j["split_plan"];
      c.plan.train_days = p.value("train_days", c.plan.train_days);
      c.plan.val_days = p.value("val_days", c.plan.val_days);
      c.plan.test_days = p.value("test_days", c.plan.test_days);
      c.plan.blackout_hours = p.value("blackout_hours", c.plan.blackout_hours);
    }
    c.cycles = j.value("cycles", c.cycles);
    c.timesteps = j.value("timesteps", c.timesteps);
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
    if (j.contains("retain_fraction")) c.retain_fraction = iv_from(j["retain_fraction"]);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed dataset config: ") + e.what());
  }
  c.validate();
  return c;
}

const std::vector<Episode>& Dataset::episodes(Split s) const {
  switch (s) {
    case Split::Train:
      return train;
    case Split::Validation:
      return val;
    case Split::Test:
      return test;
  }
  return train;
}

Dataset generate_dataset(const SyntheticDatasetConfig& config) {
  config.validate();
  const GridSpec& spec = config.grid;
  const std::int64_t hours = config.plan.cycle_hours() * config.cycles;
  const Timeline timeline = split_timeline(hours, config.plan);

  Dataset ds;
  ds.config = config;
  ds.stations = draw_station_layout(spec, config.layout, config.seed);
  ds.station_cells = Mask(spec.height, spec.width);
  for (const Station& s : ds.stations) ds.station_cells[s.cell] = 1;

  // Holdout: a fixed 20% of station cells, identical for every episode.
  {
    std::vector<Cell> cells = cells_of(ds.station_cells);
    Rng rng(mix_seed(config.seed, 0x401d));
    std::shuffle(cells.begin(), cells.end(), rng);
    const auto k = static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(cells.size())));
    ds.holdout = Mask(spec.height, spec.width);
    for (std::size_t n = 0; n < k; ++n) ds.holdout[cells[n]] = 1;
  }

  const auto truth = generate_truth_sequence(config.storm, spec, static_cast<int>(hours), mix_seed(config.seed, 1));
  const auto obs = simulate_stations(truth, ds.stations, config.noise, mix_seed(config.seed, 2));
  const auto gridded = grid_stations(obs, spec, static_cast<int>(hours));

  const auto make = [&](std::int64_t hour, MaskingMode mode) {
    const std::uint64_t eseed = mix_seed(config.seed, static_cast<std::uint64_t>(hour) + 1000);
    EpisodeInputs in;
    in.spec = spec;
    in.stations.assign(gridded.begin() + (hour - config.timesteps + 1), gridded.begin() + hour + 1);
    in.radar = simulate_radar(truth[static_cast<std::size_t>(hour)], config.noise, eseed);
    in.station_cells = ds.station_cells;
    in.holdout = ds.holdout;
    in.truth = truth[static_cast<std::size_t>(hour)];
    Rng rng(mix_seed(eseed, 0xf7ac));
    const double r = std::uniform_real_distribution<double>(config.retain_fraction.lo, config.retain_fraction.hi)(rng);
    Episode ep = build_episode(in, r, mode, eseed);
    ep.hour = hour;
    return ep;
  };
  for (std::int64_t h : timeline.episode_hours(Split::Train, config.timesteps)) ds.train.push_back(make(h, MaskingMode::Train));
  for (std::int64_t h : timeline.episode_hours(Split::Validation, config.timesteps))
    ds.val.push_back(make(h, MaskingMode::Validation));
  for (std::int64_t h : timeline.episode_hours(Split::Test, config.timesteps)) ds.test.push_back(make(h, MaskingMode::Test));
  return ds;
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json m;
  m["format"] = "d2g-dataset";
  m["format_version"] = kEpisodeFormatVersion;
  m["config"] = to_json(ds.config);
  nlohmann::json stations = nlohmann::json::array();
  for (const Station& s : ds.stations) stations.push_back({s.id, s.cell.i, s.cell.j});
  m["stations"] = stations;
  m["holdout_cells"] = cells_to_json(cells_of(ds.holdout));
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    nlohmann::json hours = nlohmann::json::array();
    for (const Episode& ep : ds.episodes(s)) {
      hours.push_back(ep.hour);
      write_episode(ep, dir / "episodes" / to_string(s) / std::to_string(ep.hour));
    }
    m["splits"][to_string(s)] = hours;
  }
  write_json_file(dir / "dataset.json", m);
}

Dataset read_dataset(const fs::path& dir) {
  const nlohmann::json m = read_json_file(dir / "dataset.json");
  if (m.value("format", "") != "d2g-dataset") throw FormatError("not a dataset directory: " + dir.string());
  if (m.at("format_version").get<int>() != kEpisodeFormatVersion) throw VersionError("unsupported dataset version");
  Dataset ds;
  ds.config = dataset_config_from_json(m.at("config"));
  const GridSpec& spec = ds.config.grid;
  ds.station_cells = Mask(spec.height, spec.width);
  for (const auto& s : m.at("stations")) {
    Station st{s.at(0).get<std::int64_t>(), {s.at(1).get<int>(), s.at(2).get<int>()}};
    ds.stations.push_back(st);
    ds.station_cells[st.cell] = 1;
  }
  ds.holdout = Mask(spec.height, spec.width);
  for (const Cell& c : cells_from_json(m.at("holdout_cells"))) ds.holdout[c] = 1;
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    auto& dst = s == Split::Train ? ds.train : s == Split::Validation ? ds.val : ds.test;
    for (const auto& h : m.at("splits").at(to_string(s)))
      dst.push_back(read_episode(dir / "episodes" / to_string(s) / std::to_string(h.get<std::int64_t>())));
  }
  return ds;
}

Episode remask_episode(const Episode& episode, const Mask& station_cells, double retain_fraction, MaskingMode mode,
                       std::uint64_t seed) {
  EpisodeInputs in;
  in.spec = episode.spec;
  in.stations = episode.stations;
  in.radar = episode.radar;
  in.station_cells = station_cells;
  in.holdout = episode.holdout;
  in.truth = episode.truth;
  Episode out = build_episode(in, retain_fraction, mode, seed);
  out.hour = episode.hour;
  return out;
}

Episode restrict_context(const Episode& episode, const Mask& allowed) {
  if (!allowed.same_shape(episode.holdout)) throw ShapeError("restrict_context: mask shape mismatch");
  Episode out = episode;
  for (Mask& c : out.context)
    for (std::size_t k = 0; k < c.size(); ++k) c.data()[k] = c.data()[k] && allowed.data()[k];
  return out;
}

}  // namespace d2g
