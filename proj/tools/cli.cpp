#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "d2g/idw.hpp"
#include "d2g/json_io.hpp"
#include "d2g/nn/batch.hpp"
#include "d2g/nn/evaluate.hpp"
#include "d2g/nn/train.hpp"
#include "d2g/plot.hpp"
#include "d2g/train_config.hpp"
#include "d2g/version.hpp"

namespace d2g::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class MissingFile : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  const std::atomic<bool>* stop;
  std::vector<std::string> args;

  bool stopped() const { return stop != nullptr && stop->load(); }
};

// Options shared by the subcommands; each one registers the subset it uses.
struct Options {
  std::string profile = "desk";
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string ablation = "full";
  std::string checkpoint;
  std::string split = "test";
  std::string out;
  std::string data;
  std::optional<std::int64_t> hour;
  std::vector<double> fractions;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> ablations;
  std::vector<std::string> predictions;
  std::vector<std::string> names;
  std::vector<double> thresholds;
  std::string baseline;
  std::string sweep_file;
  int pixels = 8;
  double max_mm = 30.0;
  bool resume = false;
};

json software() { return {{"name", "d2g"}, {"version", kVersion}, {"git", kGitDescribe}}; }

json provenance(const Context& ctx) {
  std::string line = "d2g";
  for (const auto& a : ctx.args) line += " " + a;
  return {{"software", software()}, {"command", line}};
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingFile(what + " not found: " + p.string());
}

fs::path data_dir(const Options& o) {
  if (!o.data.empty()) return o.data;
  if (const char* root = std::getenv(kDataRootEnv); root != nullptr && *root != '\0') return root;
  throw UsageError(std::string("no dataset given: pass --data or set ") + kDataRootEnv);
}

Dataset load_dataset(const Options& o) {
  const fs::path dir = data_dir(o);
  require_file(dir / "dataset.json", "dataset manifest");
  return read_dataset(dir);
}

json read_config_file(const fs::path& file) {
  require_file(file, "config file");
  std::ifstream in(file);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + file.string() + ": " + e.what());
  }
}

Profile resolve_profile(const Options& o) {
  try {
    Profile p = profile_by_name(o.profile);
    if (!o.config.empty()) p = apply_config(p, read_config_file(o.config));
    if (o.seed) {
      p.train.seed = *o.seed;
      p.data.seed = *o.seed;
    }
    p.data.validate();
    p.model.validate();
    p.train.validate();
    return p;
  } catch (const MissingFile&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

void write_json(const fs::path& file, const json& j) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw Error("cannot write " + file.string());
    f << j.dump(2) << '\n';
  }
  fs::rename(tmp, file);
}

// Stdout when --out is absent, otherwise the file (and a one-line note).
void emit(const Context& ctx, const Options& o, const json& j) {
  if (o.out.empty()) {
    ctx.out << j.dump(2) << '\n';
  } else {
    write_json(o.out, j);
    ctx.out << "wrote " << o.out << '\n';
  }
}

void check_compatible(const ModelConfig& m, const Dataset& ds, const std::string& what) {
  if (m.timesteps != ds.config.timesteps)
    throw ConfigError(what + " expects " + std::to_string(m.timesteps) + " timesteps, the dataset has " +
                      std::to_string(ds.config.timesteps));
  if (m.attention == AttentionKind::Standard &&
      (m.grid_height != ds.config.grid.height || m.grid_width != ds.config.grid.width))
    throw ConfigError(what + " uses absolute positions for a " + std::to_string(m.grid_height) + "x" +
                      std::to_string(m.grid_width) + " grid");
}

nn::Checkpoint load_ckpt(const Options& o) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  require_file(o.checkpoint, "checkpoint");
  return nn::load_checkpoint(o.checkpoint);
}

std::vector<Episode> select_episodes(const Dataset& ds, const Options& o) {
  const auto& eps = ds.episodes(split_from_string(o.split));
  if (!o.hour) return eps;
  for (const Episode& e : eps)
    if (e.hour == *o.hour) return {e};
  throw UsageError("no " + o.split + " episode at hour " + std::to_string(*o.hour));
}

MetricConfig metric_config(const Dataset& ds, const Options& o) {
  MetricConfig m;
  if (!o.thresholds.empty()) m.thresholds_mm = o.thresholds;
  return m.for_grid(ds.config.grid);
}

json report_json(const MetricReport& r) {
  json j = to_json(r);
  j["summary"] = nn::flatten(r);
  return j;
}

// --- data synth -------------------------------------------------------------

int cmd_synth(const Context& ctx, const Options& o) {
  const Profile p = resolve_profile(o);
  fs::path dir = o.out.empty() ? data_dir(o) : fs::path(o.out);
  const Dataset ds = generate_dataset(p.data);
  write_dataset(ds, dir);
  json run = provenance(ctx);
  run["profile"] = p.name;
  run["data"] = to_json(p.data);
  write_json(dir / "synth_run.json", run);
  ctx.out << "dataset " << dir.string() << ": " << ds.train.size() << " train, " << ds.val.size() << " val, "
          << ds.test.size() << " test episodes, " << count(ds.station_cells) << " station cells, "
          << count(ds.holdout) << " holdout\n";
  return kOk;
}

// --- train ------------------------------------------------------------------

nn::TrainResult train_one(const Context& ctx, const Profile& p, const std::string& ablation, const Dataset& ds,
                          const fs::path& dir, const json& extra) {
  ModelConfig mc = apply_ablation(p.model, AblationSpec::parse(ablation));
  mc.grid_height = ds.config.grid.height;
  mc.grid_width = ds.config.grid.width;
  check_compatible(mc, ds, "model");
  json run = provenance(ctx);
  run["profile"] = to_json(p);
  run["ablation"] = ablation;
  run["model"] = to_json(mc);
  run.update(extra);
  fs::create_directories(dir);
  write_json(dir / "run.json", run);

  nn::TrainOptions opt;
  opt.out_dir = dir;
  opt.stop = ctx.stop;
  opt.info = run;
  opt.on_record = [&](const nn::LogRecord& r) {
    if (r.step % 50 == 0 || r.val_loss || r.step == p.train.max_steps) {
      ctx.err << "[" << ablation << " seed " << p.train.seed << "] step " << r.step << " lr " << r.lr << " loss "
              << r.train_loss;
      if (r.val_loss) ctx.err << " val " << *r.val_loss;
      ctx.err << '\n';
    }
  };
  return nn::train(mc, ds, p.train, opt);
}

int cmd_train(const Context& ctx, const Options& o) {
  const Profile p = resolve_profile(o);
  const Dataset ds = load_dataset(o);
  const fs::path dir =
      o.out.empty() ? fs::path("runs") / (o.ablation + "_seed" + std::to_string(p.train.seed)) : fs::path(o.out);
  const auto r = train_one(ctx, p, o.ablation, ds, dir, {{"data_dir", data_dir(o).string()}});
  ctx.out << "best checkpoint " << r.best_checkpoint.string() << " (step " << r.best_step << ", val loss "
          << r.best_val_loss << ")\n";
  return kOk;
}

// --- eval -------------------------------------------------------------------

int cmd_eval(const Context& ctx, const Options& o) {
  const Dataset ds = load_dataset(o);
  const Split split = split_from_string(o.split);
  const MetricConfig mc = metric_config(ds, o);
  json j = provenance(ctx);
  j["format"] = "d2g-eval";
  j["version"] = 1;
  j["split"] = o.split;
  j["data_dir"] = data_dir(o).string();
  if (o.baseline == "idw") {
    j["method"] = "idw";
    j["report"] = report_json(nn::evaluate_idw(ds.episodes(split), mc));
  } else if (!o.baseline.empty()) {
    throw UsageError("unknown baseline '" + o.baseline + "' (expected idw)");
  } else {
    const nn::Checkpoint ck = load_ckpt(o);
    check_compatible(ck.model, ds, "checkpoint");
    j["method"] = ck.model.ablation;
    j["checkpoint"] = {{"path", o.checkpoint}, {"step", ck.step}, {"val_loss", ck.val_loss},
                       {"model", to_json(ck.model)},  {"train", to_json(ck.train)}};
    j["report"] = report_json(nn::evaluate_checkpoint(o.checkpoint, ds, split, mc));
  }
  emit(ctx, o, j);
  return kOk;
}

// --- densify / export ---------------------------------------------------------

int cmd_export(const Context& ctx, const Options& o, bool single) {
  if (o.out.empty()) throw UsageError("--out is required");
  const Dataset ds = load_dataset(o);
  const nn::Checkpoint ck = load_ckpt(o);
  check_compatible(ck.model, ds, "checkpoint");
  std::vector<Episode> eps = select_episodes(ds, o);
  if (single && eps.size() > 1) eps.resize(1);
  const auto model = ck.build_model(true);
  json info = provenance(ctx);
  info["checkpoint"] = o.checkpoint;
  info["split"] = o.split;
  info["model"] = to_json(ck.model);
  nn::export_predictions(*model, eps, o.out, info);
  ctx.out << "exported " << eps.size() << " episode(s) to " << o.out << '\n';
  return kOk;
}

// --- sweep ------------------------------------------------------------------

int cmd_sweep(const Context& ctx, const Options& o) {
  const Dataset ds = load_dataset(o);
  const nn::Checkpoint ck = load_ckpt(o);
  check_compatible(ck.model, ds, "checkpoint");
  const auto model = ck.build_model(true);
  const std::vector<double> fr = o.fractions.empty() ? nn::default_sweep_fractions() : o.fractions;
  const auto levels = nn::density_sweep(*model, ds, fr, o.seed.value_or(0), metric_config(ds, o));
  json j = nn::to_json(levels);
  j["provenance"] = provenance(ctx);
  j["checkpoint"] = o.checkpoint;
  emit(ctx, o, j);
  return kOk;
}

// --- ablate -----------------------------------------------------------------

int cmd_ablate(const Context& ctx, const Options& o) {
  const Profile base = resolve_profile(o);
  const Dataset ds = load_dataset(o);
  const fs::path root = o.out.empty() ? fs::path("runs/ablate") : fs::path(o.out);
  const std::vector<std::string> names = o.ablations.empty() ? ablation_names() : o.ablations;
  const MetricConfig mc = metric_config(ds, o);
  const Split split = split_from_string(o.split);

  json result = provenance(ctx);
  result["format"] = "d2g-ablation";
  result["version"] = 1;
  result["profile"] = to_json(base);
  result["seeds"] = o.seeds;
  result["split"] = o.split;
  const MetricReport idw = nn::evaluate_idw(ds.episodes(split), mc);
  result["idw"] = report_json(idw);
  for (const std::string& name : names) {
    std::vector<MetricReport> reports;
    json per_seed = json::array();
    for (std::uint64_t seed : o.seeds) {
      if (ctx.stopped()) throw nn::Interrupted("ablation run interrupted");
      Profile p = base;
      p.train.seed = seed;
      const fs::path dir = root / name / ("seed" + std::to_string(seed));
      fs::path best = dir / "best.ckpt";
      if (!(o.resume && fs::exists(dir / "last.ckpt"))) best = train_one(ctx, p, name, ds, dir, {}).best_checkpoint;
      reports.push_back(nn::evaluate_checkpoint(best, ds, split, mc));
      per_seed.push_back({{"seed", seed}, {"checkpoint", best.string()}, {"summary", nn::flatten(reports.back())}});
    }
    result["ablations"][name] = {{"runs", per_seed}, {"aggregate", nn::to_json(nn::aggregate(reports))}};
    write_json(root / "ablation.json", result);
  }
  ctx.out << std::left << std::setw(16) << "method" << std::setw(20) << "csi@0.2" << "crps\n";
  const auto fmt = [](const nn::Stat& s) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << s.mean << " +- " << s.std;
    return os.str();
  };
  const auto idw_flat = nn::flatten(idw);
  ctx.out << std::setw(16) << "idw" << std::setw(20) << (idw_flat.count("csi@0.2") ? idw_flat.at("csi@0.2") : NAN)
          << idw_flat.at("crps") << '\n';
  for (const std::string& name : names) {
    const auto& agg = result["ablations"][name]["aggregate"];
    nn::Stat csi, crps;
    if (agg.contains("csi@0.2")) csi = {agg["csi@0.2"]["mean"], agg["csi@0.2"]["std"], {}};
    crps = {agg["crps"]["mean"], agg["crps"]["std"], {}};
    ctx.out << std::setw(16) << name << std::setw(20) << fmt(csi) << fmt(crps) << '\n';
  }
  ctx.out << "wrote " << (root / "ablation.json").string() << '\n';
  return kOk;
}

// --- plot -------------------------------------------------------------------

Field<double> to_double(const Field<float>& f) {
  Field<double> out(f.height(), f.width());
  std::copy(f.data().begin(), f.data().end(), out.data().begin());
  return out;
}

int cmd_plot(const Context& ctx, const Options& o) {
  if (o.out.empty()) throw UsageError("--out is required");
  if (!o.sweep_file.empty()) {
    const json j = read_config_file(o.sweep_file);
    plot::Series s;
    try {
      if (j.value("format", "") != "d2g-density-sweep") throw FormatError("not a density sweep file: " + o.sweep_file);
      for (const auto& lvl : j.at("levels")) {
        if (lvl.at("csi").is_null()) continue;
        s.x.push_back(lvl.at("fraction").get<double>());
        s.y.push_back(lvl.at("csi").get<double>());
      }
    } catch (const json::exception& e) {
      throw FormatError("not a density sweep file: " + o.sweep_file + " (" + e.what() + ")");
    }
    plot::write_png(plot::line_chart({s}, 480, 320), o.out);
    ctx.out << "wrote " << o.out << '\n';
    return kOk;
  }

  const Dataset ds = load_dataset(o);
  const std::vector<Episode> eps = select_episodes(ds, o);
  const Episode& ep = eps.front();
  const GridSpec& g = ep.spec;
  const plot::RainScale scale{0.1, o.max_mm};
  std::vector<plot::Image> panels;

  // Station input: context stations at the target hour, other cells blank.
  Field<double> st = to_double(ep.last_stations().values);
  panels.push_back(plot::render_rain(st, ep.last_context(), scale, o.pixels));
  panels.push_back(plot::render_rain(to_double(ep.radar.values), ep.radar.valid, scale, o.pixels));

  std::optional<Predictive> pred;
  if (!o.predictions.empty()) {
    require_file(fs::path(o.predictions.front()) / "manifest.json", "prediction manifest");
    const nn::PredictionSet set = nn::read_predictions(o.predictions.front());
    for (std::size_t k = 0; k < set.hours.size(); ++k)
      if (set.hours[k] == ep.hour) pred = set.predictions[k];
    if (!pred) throw UsageError("prediction set has no episode at hour " + std::to_string(ep.hour));
  } else if (!o.checkpoint.empty()) {
    const nn::Checkpoint ck = load_ckpt(o);
    check_compatible(ck.model, ds, "checkpoint");
    pred = nn::predict(*ck.build_model(true), std::span<const Episode>(&ep, 1)).front();
  }
  const Mask all(g.height, g.width, 1);
  if (pred) {
    const MomentFields m = pred->moment_fields();
    Field<double> sd(g.height, g.width);
    double top = 0.0;
    for (std::size_t k = 0; k < sd.size(); ++k) top = std::max(top, sd.data()[k] = std::sqrt(m.variance.data()[k]));
    panels.push_back(plot::render_rain(m.mean, all, scale, o.pixels));
    panels.push_back(plot::render_linear(sd, all, top, o.pixels));
  }
  if (ep.truth) panels.push_back(plot::render_rain(to_double(ep.truth->values), ep.truth->valid, scale, o.pixels));
  const plot::Image strip = plot::hstack(panels, 4);
  const plot::Image img = plot::vstack({strip, plot::rain_colorbar(scale, std::min(strip.width, 256), 10)}, 6);
  plot::write_png(img, o.out);
  json legend = provenance(ctx);
  legend["panels"] = json::array({"stations", "radar"});
  if (pred) legend["panels"].insert(legend["panels"].end(), {"mean", "std"});
  if (ep.truth) legend["panels"].push_back("truth");
  legend["hour"] = ep.hour;
  legend["rain_scale_mm"] = {scale.wet_mm, scale.max_mm};
  write_json(fs::path(o.out).replace_extension(".json"), legend);
  ctx.out << "wrote " << o.out << '\n';
  return kOk;
}

// --- compare ----------------------------------------------------------------

int cmd_compare(const Context& ctx, const Options& o) {
  if (o.predictions.size() < 2) throw UsageError("compare needs at least two --predictions directories");
  if (!o.names.empty() && o.names.size() != o.predictions.size())
    throw UsageError("--names must list one name per prediction set");
  std::vector<std::pair<std::string, nn::PredictionSet>> sets;
  for (std::size_t k = 0; k < o.predictions.size(); ++k) {
    require_file(fs::path(o.predictions[k]) / "manifest.json", "prediction manifest");
    const std::string name = o.names.empty() ? fs::path(o.predictions[k]).filename().string() : o.names[k];
    sets.emplace_back(name, nn::read_predictions(o.predictions[k]));
  }
  const std::vector<double> th = o.thresholds.empty() ? MetricConfig{}.thresholds_mm : o.thresholds;
  const nn::CompareTable t = nn::compare_predictions(sets, th);
  json j = nn::to_json(t);
  j["provenance"] = provenance(ctx);
  if (o.out.empty()) {
    for (std::size_t th_i = 0; th_i < t.thresholds_mm.size(); ++th_i) {
      ctx.out << "CSI @ " << std::defaultfloat << t.thresholds_mm[th_i] << " mm (row: forecast, column: reference)\n";
      ctx.out << std::setw(14) << "";
      for (const auto& n : t.names) ctx.out << std::setw(14) << n;
      ctx.out << '\n';
      for (std::size_t a = 0; a < t.names.size(); ++a) {
        ctx.out << std::setw(14) << t.names[a];
        for (std::size_t b = 0; b < t.names.size(); ++b) {
          const auto& v = t.csi[th_i][a][b];
          if (v)
            ctx.out << std::setw(14) << std::fixed << std::setprecision(4) << *v;
          else
            ctx.out << std::setw(14) << "-";
        }
        ctx.out << '\n';
      }
    }
    ctx.out.unsetf(std::ios::floatfield);
  } else {
    emit(ctx, o, j);
  }
  return kOk;
}

int diagnose(std::ostream& err, int code, const std::string& kind, const std::string& what) {
  err << "d2g: " << kind << ": " << what << '\n';
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const std::atomic<bool>* stop) {
  Context ctx{out, err, stop, args};
  Options o;
  CLI::App app{"Probabilistic rainfall densification from sparse gauges and radar", "d2g"};
  app.set_version_flag("--version", std::string(kVersion) + " (" + kGitDescribe + ")");
  app.require_subcommand(1);

  const auto add_profile = [&](CLI::App* c) {
    c->add_option("--profile", o.profile, "Configuration profile")->check(CLI::IsMember({"desk", "paper"}));
    c->add_option("--config", o.config, "JSON config with optional data/model/train sections");
    c->add_option("--seed", o.seed, "Seed override");
  };
  const auto add_data = [&](CLI::App* c) {
    c->add_option("--data", o.data, std::string("Dataset directory (default: $") + kDataRootEnv + ")");
  };
  const auto add_split = [&](CLI::App* c) {
    c->add_option("--split", o.split, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  };

  auto* data = app.add_subcommand("data", "Dataset tools");
  data->require_subcommand(1);
  auto* synth = data->add_subcommand("synth", "Generate a synthetic dataset");
  add_profile(synth);
  add_data(synth);
  synth->add_option("--out", o.out, "Output directory (default: the data root)");

  auto* train = app.add_subcommand("train", "Train one model");
  add_profile(train);
  add_data(train);
  train->add_option("--ablation", o.ablation, "Ablation variant")->check(CLI::IsMember(ablation_names()));
  train->add_option("--out", o.out, "Run directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or the IDW baseline");
  add_data(eval);
  add_split(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  eval->add_option("--baseline", o.baseline, "Evaluate a baseline instead of a checkpoint (idw)");
  eval->add_option("--thresholds", o.thresholds, "Thresholds in mm");
  eval->add_option("--out", o.out, "Report file (default: stdout)");

  auto* densify = app.add_subcommand("densify", "Mean, std and zero-probability rasters for one episode");
  add_data(densify);
  add_split(densify);
  densify->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  densify->add_option("--hour", o.hour, "Episode hour (default: first episode of the split)");
  densify->add_option("--out", o.out, "Output directory")->required();

  auto* exp = app.add_subcommand("export", "Prediction rasters for every episode of a split");
  add_data(exp);
  add_split(exp);
  exp->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  exp->add_option("--out", o.out, "Output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Station-density sweep on the test split");
  add_data(sweep);
  sweep->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  sweep->add_option("--seed", o.seed, "Mask seed");
  sweep->add_option("--fractions", o.fractions, "Context fractions");
  sweep->add_option("--out", o.out, "Sweep file (default: stdout)");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the ablation matrix over several seeds");
  ablate->add_option("--profile", o.profile, "Configuration profile")->check(CLI::IsMember({"desk", "paper"}));
  ablate->add_option("--config", o.config, "JSON config with optional data/model/train sections");
  add_data(ablate);
  add_split(ablate);
  ablate->add_option("--seeds", o.seeds, "Training seeds");
  ablate->add_option("--ablation", o.ablations, "Variants (default: all)")->check(CLI::IsMember(ablation_names()));
  ablate->add_flag("--resume", o.resume, "Reuse finished runs");
  ablate->add_option("--out", o.out, "Output directory");

  auto* plot = app.add_subcommand("plot", "PNG panels for one episode, or a sweep curve");
  add_data(plot);
  add_split(plot);
  plot->add_option("--hour", o.hour, "Episode hour");
  plot->add_option("--checkpoint", o.checkpoint, "Checkpoint to predict with");
  plot->add_option("--predictions", o.predictions, "Exported prediction directory");
  plot->add_option("--sweep", o.sweep_file, "Density sweep file to draw instead of maps");
  plot->add_option("--pixels", o.pixels, "Pixels per grid cell")->check(CLI::Range(1, 64));
  plot->add_option("--max-mm", o.max_mm, "Top of the rain colour scale")->check(CLI::PositiveNumber);
  plot->add_option("--out", o.out, "PNG file")->required();

  auto* compare = app.add_subcommand("compare", "Pairwise CSI across saved prediction sets");
  compare->add_option("--predictions", o.predictions, "Prediction directories")->required();
  compare->add_option("--names", o.names, "Display names");
  compare->add_option("--thresholds", o.thresholds, "Thresholds in mm");
  compare->add_option("--out", o.out, "Table file (default: text on stdout)");

  if (!args.empty() && !args.front().starts_with("-") && app.get_subcommand_no_throw(args.front()) == nullptr) {
    err << "d2g: usage: unknown command '" << args.front() << "'\n" << app.help();
    return kUsage;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "d2g: usage: " << e.what() << '\n' << app.help();
    return kUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(ctx, o);
    if (train->parsed()) return cmd_train(ctx, o);
    if (eval->parsed()) return cmd_eval(ctx, o);
    if (densify->parsed()) return cmd_export(ctx, o, true);
    if (exp->parsed()) return cmd_export(ctx, o, false);
    if (sweep->parsed()) return cmd_sweep(ctx, o);
    if (ablate->parsed()) return cmd_ablate(ctx, o);
    if (plot->parsed()) return cmd_plot(ctx, o);
    if (compare->parsed()) return cmd_compare(ctx, o);
    return diagnose(err, kUsage, "usage", "no command given");
  } catch (const nn::Interrupted& e) {
    return diagnose(err, kInterrupted, "interrupted", e.what());
  } catch (const UsageError& e) {
    return diagnose(err, kUsage, "usage", e.what());
  } catch (const MissingFile& e) {
    return diagnose(err, kMissingFile, "missing file", e.what());
  } catch (const ConfigError& e) {
    return diagnose(err, kBadConfig, "invalid config", e.what());
  } catch (const VersionError& e) {
    return diagnose(err, kIncompatibleVersion, "incompatible version", e.what());
  } catch (const FormatError& e) {
    return diagnose(err, kBadFormat, "bad file format", e.what());
  } catch (const nn::NumericalError& e) {
    return diagnose(err, kNumerical, "numerical failure", e.what());
  } catch (const json::exception& e) {
    return diagnose(err, kBadFormat, "bad file format", e.what());
  } catch (const std::exception& e) {
    return diagnose(err, kFailure, "error", e.what());
  }
}

}  // namespace d2g::cli
