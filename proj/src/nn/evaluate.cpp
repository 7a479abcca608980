#include "d2g/nn/evaluate.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "d2g/episode_io.hpp"
#include "d2g/idw.hpp"
#include "d2g/json_io.hpp"
#include "d2g/nn/checkpoint.hpp"
#include "d2g/version.hpp"

D2G_NN_BEGIN
namespace nn {

namespace fs = std::filesystem;

namespace {

template <typename Fn>
void for_each_batch(const Model& model, std::span<const Episode> episodes, int batch_size, Fn&& fn) {
  if (batch_size < 1) throw Error("batch size must be positive");
  NoGradGuard ng;
  std::vector<const Episode*> group;
  for (std::size_t start = 0; start < episodes.size(); start += static_cast<std::size_t>(batch_size)) {
    group.clear();
    const std::size_t end = std::min(episodes.size(), start + static_cast<std::size_t>(batch_size));
    for (std::size_t k = start; k < end; ++k) group.push_back(&episodes[k]);
    const Batch b = make_batch(group, model.config());
    fn(start, model.forward(b));
  }
}

std::string threshold_key(double mm) {
  std::ostringstream s;
  s << mm;
  return s.str();
}

}  // namespace

std::vector<Predictive> predict(const Model& model, std::span<const Episode> episodes, int batch_size) {
  std::vector<Predictive> out;
  out.reserve(episodes.size());
  const ModelConfig& c = model.config();
  for_each_batch(model, episodes, batch_size, [&](std::size_t, const Tensor& raw) {
    for (std::int64_t b = 0; b < raw.dim(0); ++b) out.push_back(to_predictive(raw, c.output, b, c.gamma_zero_floor));
  });
  return out;
}

MetricReport evaluate_predictions(std::span<const Predictive> predictions, std::span<const Episode> episodes,
                                  const MetricConfig& config) {
  if (predictions.size() != episodes.size()) throw ShapeError("evaluate: predictions and episodes differ in number");
  MetricAccumulator acc(episodes.empty() ? config : config.for_grid(episodes.front().spec));
  for (std::size_t k = 0; k < episodes.size(); ++k) {
    const Episode& ep = episodes[k];
    const TargetSelection sel = select_targets(ep, false);
    assert_disjoint_from_inputs(sel, ep);
    if (sel.empty()) continue;
    const SparseTargets t = to_fields(sel, ep.spec);
    acc.add(predictions[k], t.values, t.valid);
  }
  return acc.report();
}

MetricReport evaluate_model(const Model& model, std::span<const Episode> episodes, const MetricConfig& config,
                            int batch_size) {
  const auto preds = predict(model, episodes, batch_size);
  return evaluate_predictions(preds, episodes, config);
}

MetricReport evaluate_checkpoint(const fs::path& checkpoint, const Dataset& dataset, Split split,
                                 const MetricConfig& config) {
  const Checkpoint c = load_checkpoint(checkpoint);
  const auto model = c.build_model(true);
  return evaluate_model(*model, dataset.episodes(split), config, c.train.eval_batch_size);
}

MetricReport evaluate_idw(std::span<const Episode> episodes, const MetricConfig& config) {
  MetricAccumulator acc(episodes.empty() ? config : config.for_grid(episodes.front().spec));
  for (const Episode& ep : episodes) {
    const TargetSelection sel = select_targets(ep, false);
    assert_disjoint_from_inputs(sel, ep);
    if (sel.empty()) continue;
    const SparseTargets t = to_fields(sel, ep.spec);
    acc.add_point(idw_densify(idw_inputs(ep), ep.spec), t.values, t.valid);
  }
  return acc.report();
}

std::map<std::string, double> flatten(const MetricReport& r) {
  std::map<std::string, double> out;
  const auto& th = r.config.thresholds_mm;
  const auto& ns = r.config.fss_neighborhoods;
  for (std::size_t t = 0; t < th.size(); ++t) {
    const std::string key = threshold_key(th[t]);
    if (r.csi[t]) out["csi@" + key] = *r.csi[t];
    if (r.fbi[t]) out["fbi@" + key] = *r.fbi[t];
    for (std::size_t n = 0; n < ns.size(); ++n)
      if (r.fss[t][n]) out["fss@" + key + "/" + std::to_string(ns[n])] = *r.fss[t][n];
  }
  if (r.csi_mean) out["csi_mean"] = *r.csi_mean;
  if (r.fbi_mean) out["fbi_mean"] = *r.fbi_mean;
  if (r.fss_mean) out["fss_mean"] = *r.fss_mean;
  out["crps"] = r.crps;
  out["mae"] = r.mae;
  out["mse"] = r.mse;
  return out;
}

std::map<std::string, Stat> aggregate(std::span<const MetricReport> reports) {
  std::map<std::string, Stat> out;
  if (reports.empty()) return out;
  std::vector<std::map<std::string, double>> flat;
  for (const auto& r : reports) flat.push_back(flatten(r));
  for (const auto& [key, _] : flat.front()) {
    Stat s;
    bool everywhere = true;
    for (const auto& f : flat) {
      const auto it = f.find(key);
      if (it == f.end()) {
        everywhere = false;
        break;
      }
      s.values.push_back(it->second);
    }
    if (!everywhere) continue;
    const double n = static_cast<double>(s.values.size());
    for (double v : s.values) s.mean += v / n;
    if (s.values.size() > 1) {
      double ss = 0.0;
      for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
      s.std = std::sqrt(ss / (n - 1.0));
    }
    out[key] = std::move(s);
  }
  return out;
}

nlohmann::json to_json(const std::map<std::string, Stat>& stats) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, s] : stats) j[k] = {{"mean", s.mean}, {"std", s.std}, {"values", s.values}};
  return j;
}

std::vector<double> default_sweep_fractions() { return {0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}; }

std::vector<SweepLevel> density_sweep(const Model& model, const Dataset& dataset, std::span<const double> fractions,
                                      std::uint64_t seed, const MetricConfig& config) {
  std::vector<Cell> available;
  for (const Cell& c : cells_of(dataset.station_cells))
    if (!dataset.holdout[c]) available.push_back(c);
  const std::vector<double> f(fractions.begin(), fractions.end());
  const auto masks = nested_density_masks(available, f, seed);
  std::vector<SweepLevel> out;
  const GridSpec& spec = dataset.config.grid;
  for (std::size_t level = 0; level < f.size(); ++level) {
    Mask allowed(spec.height, spec.width);
    for (const Cell& c : masks[level]) allowed[c] = 1;
    std::vector<Episode> restricted;
    restricted.reserve(dataset.test.size());
    for (const Episode& ep : dataset.test) restricted.push_back(restrict_context(ep, allowed));
    SweepLevel s;
    s.fraction = f[level];
    s.context_stations = static_cast<std::int64_t>(masks[level].size());
    s.report = evaluate_model(model, restricted, config);
    out.push_back(std::move(s));
  }
  return out;
}

nlohmann::json to_json(const std::vector<SweepLevel>& sweep) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& s : sweep) {
    const auto flat = flatten(s.report);
    const auto csi = s.report.csi_at(s.report.config.rain_event_threshold_mm);
    levels.push_back({{"fraction", s.fraction},
                      {"context_stations", s.context_stations},
                      {"csi", csi ? nlohmann::json(*csi) : nlohmann::json(nullptr)},
                      {"crps", s.report.crps},
                      {"report", to_json(s.report)}});
  }
  return {{"format", "d2g-density-sweep"}, {"version", 1}, {"levels", levels}};
}

Field<double> uncertainty_map(const Model& model, std::span<const Episode> episodes) {
  if (episodes.empty()) throw Error("uncertainty_map: no episodes");
  const GridSpec& spec = episodes.front().spec;
  Field<double> acc(spec.height, spec.width, 0.0);
  for (const Predictive& p : predict(model, episodes)) {
    const MomentFields m = p.moment_fields();
    for (std::size_t q = 0; q < acc.size(); ++q) acc.data()[q] += std::sqrt(std::max(0.0, m.variance.data()[q]));
  }
  for (double& v : acc.data()) v /= static_cast<double>(episodes.size());
  return acc;
}

namespace {

template <typename T>
void write_raw(const fs::path& file, std::span<const T> v) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + file.string() + " for writing");
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  if (!out) throw Error("write failed: " + file.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& file, std::size_t n) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("missing file " + file.string());
  std::vector<T> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(n * sizeof(T)) || in.peek() != EOF)
    throw FormatError("size mismatch in " + file.string());
  return v;
}

std::vector<float> to_f32(const Field<double>& f) { return std::vector<float>(f.data().begin(), f.data().end()); }

}  // namespace

void export_predictions(const Model& model, std::span<const Episode> episodes, const fs::path& dir,
                        const nlohmann::json& info) {
  if (episodes.empty()) throw Error("export_predictions: no episodes");
  fs::create_directories(dir);
  const ModelConfig& c = model.config();
  const GridSpec& spec = episodes.front().spec;
  const auto k = raw_channels(c.output);
  nlohmann::json list = nlohmann::json::array();
  std::set<std::int64_t> seen;
  for_each_batch(model, episodes, 16, [&](std::size_t start, const Tensor& raw) {
    const std::size_t per = static_cast<std::size_t>(k) * spec.cells();
    for (std::int64_t b = 0; b < raw.dim(0); ++b) {
      const Episode& ep = episodes[start + static_cast<std::size_t>(b)];
      if (!seen.insert(ep.hour).second) throw Error("export_predictions: duplicate hour " + std::to_string(ep.hour));
      const std::string name = std::to_string(ep.hour);
      const fs::path d = dir / name;
      fs::create_directories(d);
      write_raw<Scalar>(d / "raw.bin", raw.data().subspan(static_cast<std::size_t>(b) * per, per));
      const Predictive p = to_predictive(raw, c.output, b, c.gamma_zero_floor);
      const MomentFields m = p.moment_fields();
      Field<double> sd = m.variance;
      for (double& v : sd.data()) v = std::sqrt(std::max(0.0, v));
      write_f32(d / "mean.bin", to_f32(m.mean));
      write_f32(d / "std.bin", to_f32(sd));
      write_f32(d / "pi0.bin", c.output == OutputKind::Zig ? to_f32(p.pi0) : std::vector<float>(spec.cells(), 0.0f));
      list.push_back({{"hour", ep.hour}, {"split", to_string(ep.split)}, {"dir", name}});
    }
  });
  const nlohmann::json manifest = {{"format", "d2g-predictions"},
                                   {"version", kPredictionFormatVersion},
                                   {"software", {{"version", kVersion}, {"git", kGitDescribe}}},
                                   {"dtype", kScalarName},
                                   {"output", to_string(c.output)},
                                   {"raw_channels", k},
                                   {"gamma_zero_floor", c.gamma_zero_floor},
                                   {"grid", to_json(spec)},
                                   {"model", to_json(c)},
                                   {"info", info},
                                   {"episodes", list}};
  write_json_file(dir / "manifest.json", manifest);
}

PredictionSet read_predictions(const fs::path& dir) {
  PredictionSet s;
  s.manifest = read_json_file(dir / "manifest.json");
  try {
    if (s.manifest.at("format").get<std::string>() != "d2g-predictions")
      throw FormatError(dir.string() + " is not a prediction export");
    if (s.manifest.at("version").get<int>() != kPredictionFormatVersion)
      throw VersionError("unsupported prediction export version in " + dir.string());
    s.kind = output_kind_from_string(s.manifest.at("output").get<std::string>());
    const GridSpec spec = grid_from_json(s.manifest.at("grid"));
    const auto k = s.manifest.at("raw_channels").get<std::int64_t>();
    const double floor = s.manifest.at("gamma_zero_floor").get<double>();
    const std::string dtype = s.manifest.at("dtype").get<std::string>();
    const std::size_t n = static_cast<std::size_t>(k) * spec.cells();
    for (const auto& e : s.manifest.at("episodes")) {
      const fs::path d = dir / e.at("dir").get<std::string>();
      Buffer raw;
      if (dtype == "float32") {
        const auto v = read_raw<float>(d / "raw.bin", n);
        raw.assign(v.begin(), v.end());
      } else if (dtype == "float64") {
        const auto v = read_raw<double>(d / "raw.bin", n);
        raw.assign(v.begin(), v.end());
      } else {
        throw FormatError("unknown prediction dtype " + dtype);
      }
      const Tensor t = Tensor::from({1, k, spec.height, spec.width}, std::move(raw));
      s.hours.push_back(e.at("hour").get<std::int64_t>());
      s.predictions.push_back(to_predictive(t, s.kind, 0, floor));
      const auto mean = read_f32(d / "mean.bin", spec.cells());
      Field<double> m(spec.height, spec.width);
      std::copy(mean.begin(), mean.end(), m.data().begin());
      s.means.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad prediction manifest in " + dir.string() + ": " + e.what());
  }
  return s;
}

CompareTable compare_predictions(const std::vector<std::pair<std::string, PredictionSet>>& sets,
                                 const std::vector<double>& thresholds_mm) {
  CompareTable t;
  t.thresholds_mm = thresholds_mm;
  for (const auto& s : sets) t.names.push_back(s.first);
  const std::size_t n = sets.size();
  t.csi.assign(thresholds_mm.size(), std::vector<std::vector<std::optional<double>>>(n, std::vector<std::optional<double>>(n)));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const PredictionSet& A = sets[a].second;
      const PredictionSet& B = sets[b].second;
      std::map<std::int64_t, std::size_t> index;
      for (std::size_t k = 0; k < B.hours.size(); ++k) index[B.hours[k]] = k;
      for (std::size_t th = 0; th < thresholds_mm.size(); ++th) {
        Confusion total;
        bool any = false;
        for (std::size_t k = 0; k < A.hours.size(); ++k) {
          const auto it = index.find(A.hours[k]);
          if (it == index.end()) continue;
          const Field<double>& fa = A.means[k];
          const Field<double>& fb = B.means[it->second];
          if (!fa.same_shape(fb)) throw ShapeError("compare: prediction sets on different grids");
          total += confusion(fa, fb, Mask(fa.height(), fa.width(), 1), thresholds_mm[th]);
          any = true;
        }
        if (any) t.csi[th][a][b] = csi(total);
      }
    }
  return t;
}

nlohmann::json to_json(const CompareTable& t) {
  nlohmann::json by_threshold = nlohmann::json::array();
  for (std::size_t th = 0; th < t.thresholds_mm.size(); ++th) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : t.csi[th]) {
      nlohmann::json r = nlohmann::json::array();
      for (const auto& v : row) r.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
      rows.push_back(r);
    }
    by_threshold.push_back({{"threshold_mm", t.thresholds_mm[th]}, {"csi", rows}});
  }
  return {{"format", "d2g-compare"}, {"version", 1}, {"names", t.names}, {"tables", by_threshold}};
}

}  // namespace nn
D2G_NN_END
