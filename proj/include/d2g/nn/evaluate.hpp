#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2g/metrics.hpp"
#include "d2g/nn/model.hpp"
#include "d2g/synthetic.hpp"

D2G_NN_BEGIN
namespace nn {

// Head output of every episode in eval mode, one Predictive per episode.
std::vector<Predictive> predict(const Model& model, std::span<const Episode> episodes, int batch_size = 16);

// Pools metrics over the targets of each episode (holdout cells on the test
// split). `predictions` align with `episodes`.
MetricReport evaluate_predictions(std::span<const Predictive> predictions, std::span<const Episode> episodes,
                                  const MetricConfig& config);
MetricReport evaluate_model(const Model& model, std::span<const Episode> episodes, const MetricConfig& config,
                            int batch_size = 16);
// EMA weights of the checkpoint.
MetricReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const Dataset& dataset, Split split,
                                 const MetricConfig& config);

// Point baseline: IDW of the last-hour context stations.
MetricReport evaluate_idw(std::span<const Episode> episodes, const MetricConfig& config);

// Named scalar view of a report: csi@<mm>, fbi@<mm>, fss@<mm>/<n>, csi_mean,
// fbi_mean, fss_mean, crps, mae, mse. Undefined scores are omitted.
std::map<std::string, double> flatten(const MetricReport& r);

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::vector<double> values;
};

// Per-metric mean and std across seeds; a metric appears only if every seed
// defines it.
std::map<std::string, Stat> aggregate(std::span<const MetricReport> reports);
nlohmann::json to_json(const std::map<std::string, Stat>& stats);

struct SweepLevel {
  double fraction = 0.0;
  std::int64_t context_stations = 0;
  MetricReport report;
};

// Nested station subsets of the non-holdout network; test episodes keep only
// context stations inside each subset.
std::vector<SweepLevel> density_sweep(const Model& model, const Dataset& dataset, std::span<const double> fractions,
                                      std::uint64_t seed, const MetricConfig& config);
nlohmann::json to_json(const std::vector<SweepLevel>& sweep);
std::vector<double> default_sweep_fractions();

// Per-cell mean predictive standard deviation over `episodes`.
Field<double> uncertainty_map(const Model& model, std::span<const Episode> episodes);

inline constexpr int kPredictionFormatVersion = 1;

// Directory layout: manifest.json plus <hour>/ holding raw.bin (head output,
// manifest dtype, (k, H, W)) and float32 mean.bin, std.bin, pi0.bin (H, W).
void export_predictions(const Model& model, std::span<const Episode> episodes, const std::filesystem::path& dir,
                        const nlohmann::json& info = nlohmann::json::object());

struct PredictionSet {
  nlohmann::json manifest;
  OutputKind kind = OutputKind::Zig;
  std::vector<std::int64_t> hours;
  std::vector<Predictive> predictions;  // rebuilt from raw.bin
  std::vector<Field<double>> means;     // mean.bin as stored
};
PredictionSet read_predictions(const std::filesystem::path& dir);

// Pairwise CSI of prediction means: entry [a][b] pools counts with set a as
// forecast and set b as reference over the hours both contain.
struct CompareTable {
  std::vector<std::string> names;
  std::vector<double> thresholds_mm;
  // [threshold][a][b]
  std::vector<std::vector<std::vector<std::optional<double>>>> csi;
};
CompareTable compare_predictions(const std::vector<std::pair<std::string, PredictionSet>>& sets,
                                 const std::vector<double>& thresholds_mm);
nlohmann::json to_json(const CompareTable& t);

}  // namespace nn
D2G_NN_END
