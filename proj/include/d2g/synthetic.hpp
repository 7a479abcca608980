#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"

#include "d2g/grid.hpp"

namespace d2g {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Interval&) const = default;
};

struct IntInterval {
  int lo = 0;
  int hi = 0;
  bool operator==(const IntInterval&) const = default;
};

// Truth generator: advected anisotropic Gaussian storm cells with
// log-normal peaks. Weather is organised in regimes of regime_hours; a regime
// is fully dry with probability dry_probability, otherwise it carries
// n_cells storm cells moving with a shared wind.
struct StormFieldConfig {
  IntInterval n_cells_range{2, 7};
  Interval cell_sigma_km_range{6.0, 22.0};
  double peak_log_mean = 1.0;  // log mm
  double peak_log_sigma = 0.7;
  Interval advection_velocity_kmph{-30.0, 30.0};  // per component
  double dry_probability = 0.3;
  int regime_hours = 24;
  double max_anisotropy = 2.5;
  double wet_threshold_mm = 0.1;
  double intensity_period_hours = 9.0;

  void validate() const;
  bool operator==(const StormFieldConfig&) const = default;
};

struct SensorNoiseConfig {
  double station_multiplicative_sigma = 0.25;
  Interval station_bias_range{0.75, 1.15};
  double station_dropout_prob = 0.05;
  double station_outlier_prob = 0.01;
  Interval station_outlier_mm{4.0, 25.0};

  double radar_mp_a = 200.0;
  double radar_mp_b = 1.6;
  double radar_smoothing_sigma_cells = 1.5;
  double radar_gain_bias = 0.55;
  double radar_gain_jitter_sigma = 0.35;  // log-space, per hour
  int radar_blockage_sectors = 2;
  double radar_blockage_width_deg = 18.0;
  std::uint64_t radar_blockage_seed = 7;

  void validate() const;
  bool operator==(const SensorNoiseConfig&) const = default;
};

struct SplitPlan {
  int train_days = 12;
  int val_days = 2;
  int test_days = 2;
  int blackout_hours = 12;

  void validate() const;
  std::int64_t cycle_hours() const;
  bool operator==(const SplitPlan&) const = default;
};

struct StationLayoutConfig {
  int stations = 260;
  int urban_centers = 4;
  double urban_fraction = 0.7;
  double urban_sigma_cells = 2.5;
  bool operator==(const StationLayoutConfig&) const = default;
};

struct Station {
  std::int64_t id = 0;
  Cell cell;
};

std::vector<RainField> generate_truth_sequence(const StormFieldConfig& config, const GridSpec& spec, int hours,
                                               std::uint64_t seed);

// Stations cluster around urban centres with a uniform background.
std::vector<Station> draw_station_layout(const GridSpec& spec, const StationLayoutConfig& config, std::uint64_t seed);

// One observation list covering every hour of truth; timestep == hour index.
std::vector<StationObservation> simulate_stations(const std::vector<RainField>& truth,
                                                  const std::vector<Station>& layout, const SensorNoiseConfig& noise,
                                                  std::uint64_t seed);

// Z = a R^b and its inverse; zero reflectivity maps to zero rain.
double rain_to_reflectivity(double rain_mm, double a, double b);
double reflectivity_to_rain(double z, double a, double b);

RainField simulate_radar(const RainField& truth, const SensorNoiseConfig& noise, std::uint64_t seed);

// Median of co-located observations per cell and timestep.
std::vector<StationSlice> grid_stations(const std::vector<StationObservation>& observations, const GridSpec& spec,
                                        int timesteps);

enum class MaskingMode { Train, Validation, Test };

struct EpisodeInputs {
  GridSpec spec;
  std::vector<StationSlice> stations;  // T slices ending at the target hour
  RainField radar;
  Mask station_cells;  // every cell that hosts a station in the dataset
  Mask holdout;
  std::optional<RainField> truth;
};

// Floor-rounded number of context cells for a retain fraction.
std::size_t context_count(std::size_t available, double retain_fraction);

Episode build_episode(const EpisodeInputs& inputs, double retain_fraction, MaskingMode mode, std::uint64_t seed);

struct SplitBlock {
  Split split;
  std::int64_t begin = 0;  // inclusive hour
  std::int64_t end = 0;    // exclusive hour
};

struct Timeline {
  std::vector<SplitBlock> blocks;
  std::vector<std::int64_t> train, val, test;  // hours belonging to each split

  const std::vector<std::int64_t>& hours(Split s) const;
  // Target hours whose T-hour window stays inside one block.
  std::vector<std::int64_t> episode_hours(Split s, int timesteps) const;
};

// Repeating train/blackout/val/blackout/test/blackout cycles; only complete
// cycles are used (the last trailing blackout may be cut).
Timeline split_timeline(std::int64_t hours, const SplitPlan& plan);

// Nested random subsets: |mask(f)| = round(f N), smaller masks contained in
// larger ones. Output order follows `fractions`.
std::vector<std::vector<Cell>> nested_density_masks(const std::vector<Cell>& cells, const std::vector<double>& fractions,
                                                    std::uint64_t seed);

struct SyntheticDatasetConfig {
  GridSpec grid{32, 32, 4.0, 0.0, 0.0};
  StormFieldConfig storm;
  SensorNoiseConfig noise;
  StationLayoutConfig layout;
  SplitPlan plan;
  int cycles = 3;
  int timesteps = 4;
  double holdout_fraction = 0.2;
  Interval retain_fraction{0.3, 0.5};
  std::uint64_t seed = 2024;

  void validate() const;
};

nlohmann::json to_json(const SyntheticDatasetConfig& c);
SyntheticDatasetConfig dataset_config_from_json(const nlohmann::json& j);

struct Dataset {
  SyntheticDatasetConfig config;
  std::vector<Station> stations;
  Mask station_cells;
  Mask holdout;
  std::vector<Episode> train, val, test;

  const std::vector<Episode>& episodes(Split s) const;
};

Dataset generate_dataset(const SyntheticDatasetConfig& config);

// Directory layout: dataset.json + episodes/<split>/<hour>/ containers.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

// Re-draws the context of a stored episode with a fresh retain fraction; used
// by the trainer to sample a new masking every time an episode is visited.
Episode remask_episode(const Episode& episode, const Mask& station_cells, double retain_fraction, MaskingMode mode,
                       std::uint64_t seed);

// Keeps only context cells inside `allowed` (density sweep).
Episode restrict_context(const Episode& episode, const Mask& allowed);

}  // namespace d2g
