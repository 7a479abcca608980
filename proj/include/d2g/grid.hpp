#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "d2g/field.hpp"

namespace d2g {

// Regular raster the whole pipeline lives on. Coordinates are abstract km
// offsets; no geodetic projection is involved.
struct GridSpec {
  int height = 32;
  int width = 32;
  double cell_size_km = 4.0;
  double origin_northing_km = 0.0;
  double origin_easting_km = 0.0;

  void validate() const;
  std::size_t cells() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  bool contains(Cell c) const { return c.i >= 0 && c.i < height && c.j >= 0 && c.j < width; }

  bool operator==(const GridSpec&) const = default;
};

struct RainField {
  GridSpec spec;
  Field<float> values;  // hourly accumulation, mm
  Mask valid;

  RainField() = default;
  explicit RainField(const GridSpec& s, float fill = 0.0f)
      : spec(s), values(s.height, s.width, fill), valid(s.height, s.width, 1) {}

  // Throws if a valid cell is negative or non-finite.
  void validate() const;
  bool operator==(const RainField&) const = default;
};

struct StationObservation {
  Cell cell;
  int timestep = 0;
  float value = 0.0f;
  std::int64_t station_id = 0;
};

struct StationSlice {
  Field<float> values;
  Mask present;
  bool operator==(const StationSlice&) const = default;
};

enum class Split { Train, Validation, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// One sample: T hours of gridded station history ending at the target hour,
// the radar field at the target hour and the context/target/holdout sets.
struct Episode {
  GridSpec spec;
  int timesteps = 0;
  std::vector<StationSlice> stations;  // size timesteps, last = target hour
  RainField radar;
  std::vector<Mask> context;  // size timesteps
  Mask target;
  Mask holdout;
  std::optional<RainField> truth;

  std::int64_t hour = 0;
  Split split = Split::Train;
  std::uint64_t seed = 0;

  void validate() const;
  const StationSlice& last_stations() const { return stations.back(); }
  const Mask& last_context() const { return context.back(); }

  bool operator==(const Episode&) const = default;
};

// Clamp bounds shared by every ZIG consumer.
inline constexpr double kParamFloor = 1e-4;
inline constexpr double kPi0Min = 1e-6;
inline constexpr double kPi0Max = 1.0 - 1e-6;

double clamp_pi0(double pi0);

struct ZigParams {
  Field<double> pi0;
  Field<double> alpha;
  Field<double> beta;

  ZigParams() = default;
  ZigParams(int height, int width, double pi0_fill = 0.5, double alpha_fill = 1.0, double beta_fill = 1.0)
      : pi0(height, width, pi0_fill), alpha(height, width, alpha_fill), beta(height, width, beta_fill) {}

  int height() const { return pi0.height(); }
  int width() const { return pi0.width(); }
  void validate() const;
};

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

// Deterministic-indicator moments: p = 1{1 - pi0 >= 0.5}, mean = p a/b,
// variance = p a/b^2.
bool rain_indicator(double pi0);
Moments zig_moments(double pi0, double alpha, double beta);

struct MomentFields {
  Field<double> mean;
  Field<double> variance;
};
MomentFields zig_mean_variance(const ZigParams& params);

// Bernoulli(1 - pi0) x Gamma(alpha, rate beta) draw per cell.
RainField zig_sample(const ZigParams& params, const GridSpec& spec, std::uint64_t seed);

}  // namespace d2g
