// Acceptance runner: one PASS/FAIL line per criterion. Trained checkpoints are
// cached under the work directory, keyed by their full configuration, so a
// second invocation only re-evaluates.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "acceptance.hpp"
#include "oracles.hpp"

#include "d2g/distributions.hpp"
#include "d2g/metrics.hpp"
#include "d2g/nn/checkpoint.hpp"
#include "d2g/nn/evaluate.hpp"
#include "d2g/nn/layers.hpp"
#include "d2g/nn/train.hpp"
#include "d2g/train_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace d2g;
using d2g::acceptance::Outcome;

namespace {

constexpr const char* kWorkEnv = "D2G_ACCEPTANCE_WORK";

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
};

Stat stat_of(const std::vector<double>& v) {
  Stat s;
  for (double x : v) s.mean += x / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

double pooled_std(const Stat& a, const Stat& b) { return std::sqrt((a.std * a.std + b.std * b.std) / 2.0); }

std::string show(const Stat& s) { return fmt(s.mean) + " +/- " + fmt(s.std, 2); }

Outcome zig_moment_oracle() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr int kCases = 20, kDraws = 1'000'000;
  ZigParams z(1, kCases);
  for (int k = 0; k < kCases; ++k) {
    z.pi0(0, k) = u(rng);
    z.alpha(0, k) = 0.3 + 5.7 * u(rng);
    z.beta(0, k) = 0.2 + 3.8 * u(rng);
  }
  const MomentFields m = zig_mean_variance(z);
  double worst = 0.0;
  int wet = 0, failures = 0;
  for (int k = 0; k < kCases; ++k) {
    const auto mc = oracle::mc_zig_moments(z.pi0(0, k), z.alpha(0, k), z.beta(0, k), kDraws, 200 + k);
    const auto z_score = [](double a, double b, double se) {
      if (a == b) return 0.0;
      return se > 0.0 ? std::abs(a - b) / se : std::numeric_limits<double>::infinity();
    };
    const double zm = z_score(m.mean(0, k), mc.mean, mc.mean_se);
    const double zv = z_score(m.variance(0, k), mc.variance, mc.variance_se);
    worst = std::max({worst, zm, zv});
    if (zm > 4.0 || zv > 4.0) ++failures;
    if (mc.mean > 0.0) ++wet;
  }
  return {failures == 0, std::to_string(kCases) + " cases (" + std::to_string(wet) + " with the rain indicator on), " +
                             "1e6 draws each, worst deviation " + fmt(worst, 3) + " standard errors (limit 4)"};
}

Outcome crps_oracle() {
  std::mt19937_64 rng(102);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr int kDraws = 2'000'000;
  struct Case {
    double alpha, beta, y;
  };
  std::vector<Case> cases{{1.0, 1.0, 0.0}};
  while (cases.size() < 20) {
    const double a = 0.4 + 4.6 * u(rng), b = 0.3 + 3.7 * u(rng);
    cases.push_back({a, b, u(rng) < 0.3 ? 0.0 : 3.0 * a / b * u(rng)});
  }
  double worst = 0.0;
  int failures = 0;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const auto& c = cases[k];
    const double mc = oracle::mc_crps_gamma(c.alpha, c.beta, c.y, kDraws, 300 + k);
    const double rel = std::abs(crps_gamma(c.alpha, c.beta, c.y) - mc) / std::abs(mc);
    worst = std::max(worst, rel);
    if (rel > 0.01) ++failures;
  }
  const double anchor = crps_gamma(1.0, 1.0, 0.0);
  const bool anchor_ok = std::abs(anchor - 0.5) <= 1e-12;
  return {failures == 0 && anchor_ok, "20 cases, 2e6 draws each, worst relative deviation " + fmt(worst * 100, 3) +
                                          "% (limit 1%); crps(alpha=1, beta=1, y=0) = " + fmt(anchor, 15)};
}

Outcome metric_oracle() {
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::gamma_distribution<double> rain(0.8, 2.5);
  MetricConfig config;
  config.thresholds_mm = {0.2, 1.0, 2.0, 5.0};
  config.fss_neighborhoods = {1, 3, 5};
  double worst = 0.0;
  int compared = 0;
  bool shape_ok = true;
  const auto compare = [&](std::optional<double> ref, std::optional<double> got) {
    if (ref.has_value() != got.has_value()) {
      shape_ok = false;
      return;
    }
    if (ref) {
      worst = std::max(worst, std::abs(*ref - *got));
      ++compared;
    }
  };
  for (int k = 0; k < 10; ++k) {
    ZigParams z(8, 8);
    Field<double> obs(8, 8), mean(8, 8);
    Mask valid(8, 8);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        z.pi0(i, j) = u(rng);
        z.alpha(i, j) = 0.5 + 3.5 * u(rng);
        z.beta(i, j) = 0.3 + 2.7 * u(rng);
        mean(i, j) = z.pi0(i, j) <= 0.5 ? z.alpha(i, j) / z.beta(i, j) : 0.0;
        obs(i, j) = u(rng) < 0.4 ? 0.0 : rain(rng);
        valid(i, j) = u(rng) < 0.85 ? 1 : 0;
      }
    const MetricReport r = evaluate(Predictive::from_zig(z), obs, valid, config);
    for (std::size_t t = 0; t < config.thresholds_mm.size(); ++t) {
      const double thr = config.thresholds_mm[t];
      const auto counts = oracle::naive_counts(mean, obs, valid, thr);
      compare(oracle::naive_csi(counts), r.csi[t]);
      compare(oracle::naive_fbi(counts), r.fbi[t]);
      for (std::size_t n = 0; n < config.fss_neighborhoods.size(); ++n)
        compare(oracle::naive_fss(mean, obs, valid, thr, config.fss_neighborhoods[n]), r.fss[t][n]);
    }
    double abs_sum = 0.0, sq_sum = 0.0;
    int cells = 0;
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        if (valid(i, j)) {
          const double e = mean(i, j) - obs(i, j);
          abs_sum += std::abs(e);
          sq_sum += e * e;
          ++cells;
        }
    compare(abs_sum / cells, r.mae);
    compare(sq_sum / cells, r.mse);
  }
  return {shape_ok && worst <= 1e-10, "10 cases, " + std::to_string(compared) + " scores compared, max abs diff " +
                                          fmt(worst, 3) + " (limit 1e-10)" +
                                          (shape_ok ? "" : "; defined/undefined mismatch")};
}

Outcome parameter_count() {
  const auto paper = nn::make_model(paper_model_config(), 0);
  const auto desk = nn::make_model(desk_model_config(), 0);
  const std::int64_t n = nn::count_parameters(paper->parameters());
  const std::int64_t d = nn::count_parameters(desk->parameters());
  return {n >= 172'800 && n <= 211'200, "paper profile " + std::to_string(n) + " trainable parameters (192K +/- 10%); "
                                            "desk profile " + std::to_string(d)};
}

struct Work {
  fs::path root;
  Profile profile = desk_profile();
  Dataset data;
  MetricConfig metric;
};

void progress(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

void load_data(Work& w) {
  const fs::path dir = w.root / "data";
  if (fs::exists(dir / "dataset.json")) {
    try {
      Dataset d = read_dataset(dir);
      if (to_json(d.config) == to_json(w.profile.data)) {
        w.data = std::move(d);
        w.metric = MetricConfig{}.for_grid(w.data.config.grid);
        return;
      }
    } catch (const Error& e) {
      progress(std::string("regenerating dataset: ") + e.what());
    }
  }
  progress("generating the desk dataset");
  fs::remove_all(dir);
  w.data = generate_dataset(w.profile.data);
  write_dataset(w.data, dir);
  w.metric = MetricConfig{}.for_grid(w.data.config.grid);
}

fs::path ensure_run(const Work& w, const std::string& ablation, std::uint64_t seed) {
  const fs::path dir = w.root / "runs" / (ablation + "_seed" + std::to_string(seed));
  ModelConfig mc = apply_ablation(w.profile.model, AblationSpec::parse(ablation));
  TrainConfig tc = w.profile.train;
  tc.seed = seed;
  const json key = {{"ablation", ablation}, {"seed", seed},         {"model", to_json(mc)},
                    {"train", to_json(tc)}, {"data", to_json(w.profile.data)}};
  const fs::path key_file = dir / "key.json";
  if (fs::exists(key_file) && fs::exists(dir / "best.ckpt")) {
    try {
      if (json::parse(std::ifstream(key_file)) == key) return dir / "best.ckpt";
    } catch (const json::exception&) {
    }
  }
  fs::remove_all(dir);
  fs::create_directories(dir);
  progress("training " + ablation + " seed " + std::to_string(seed) + " for " + std::to_string(tc.max_steps) + " steps");
  const auto t0 = std::chrono::steady_clock::now();
  nn::TrainOptions o;
  o.out_dir = dir;
  o.on_record = [&](const nn::LogRecord& r) {
    if (r.step % 250 == 0)
      progress("  " + ablation + " seed " + std::to_string(seed) + " step " + std::to_string(r.step) + " loss " +
          fmt(r.train_loss) +
          (r.val_loss ? " val " + fmt(*r.val_loss) : std::string()) + " elapsed " +
          fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 5) + " s");
  };
  const nn::TrainResult res = nn::train(mc, w.data, tc, o);
  std::ofstream(key_file) << key.dump(2);
  return res.best_checkpoint;
}

double csi_of(const MetricReport& r) { return r.csi_at(0.2).value_or(0.0); }

// Mean predictive std near the densest station cluster against the cells
// farthest from any station that can enter the context.
std::string uncertainty_note(const Work& w, const fs::path& checkpoint) {
  const auto model = nn::load_checkpoint(checkpoint).build_model();
  const Field<double> sd = nn::uncertainty_map(*model, w.data.test);
  const GridSpec& g = w.data.config.grid;
  std::vector<Cell> context_cells;
  for (const Cell& c : cells_of(w.data.station_cells))
    if (!w.data.holdout[c]) context_cells.push_back(c);
  struct Score {
    double distance;
    int neighbours;
    double sd;
  };
  std::vector<Score> s;
  for (int i = 0; i < g.height; ++i)
    for (int j = 0; j < g.width; ++j) {
      double nearest = std::numeric_limits<double>::infinity();
      int nb = 0;
      for (const Cell& c : context_cells) {
        const double d = std::hypot(c.i - i, c.j - j);
        nearest = std::min(nearest, d);
        if (d <= 2.0) ++nb;
      }
      s.push_back({nearest, nb, sd(i, j)});
    }
  const std::size_t decile = std::max<std::size_t>(1, s.size() / 10);
  const auto mean_top = [&](auto key) {
    std::sort(s.begin(), s.end(), [&](const Score& a, const Score& b) { return key(a) > key(b); });
    double m = 0.0;
    for (std::size_t k = 0; k < decile; ++k) m += s[k].sd / static_cast<double>(decile);
    return m;
  };
  const double far = mean_top([](const Score& x) { return x.distance; });
  const double dense = mean_top([](const Score& x) { return static_cast<double>(x.neighbours); });
  return "mean predictive std " + fmt(far) + " mm on the 10% of cells farthest from stations vs " + fmt(dense) +
         " mm in the densest 10%";
}

struct Family {
  std::map<std::string, std::vector<double>> csi;
  std::map<std::string, std::vector<fs::path>> checkpoints;
  double idw = 0.0;
  json reports = json::object();
};

Family run_family(const Work& w, int seeds) {
  Family f;
  for (const std::string abl : {"full", "no_bottleneck", "target_inputs", "gamma", "gaussian"})
    for (int s = 0; s < seeds; ++s) {
      const fs::path ckpt = ensure_run(w, abl, static_cast<std::uint64_t>(s));
      const MetricReport r = nn::evaluate_checkpoint(ckpt, w.data, Split::Test, w.metric);
      f.csi[abl].push_back(csi_of(r));
      f.checkpoints[abl].push_back(ckpt);
      f.reports[abl].push_back(to_json(r));
      progress(abl + " seed " + std::to_string(s) + " test CSI@0.2 " + fmt(csi_of(r)));
    }
  const MetricReport idw = nn::evaluate_idw(w.data.test, w.metric);
  f.idw = csi_of(idw);
  f.reports["idw"] = to_json(idw);
  return f;
}

Outcome ordering_vs_baselines(const Family& f) {
  const Stat full = stat_of(f.csi.at("full")), nb = stat_of(f.csi.at("no_bottleneck"));
  const Stat idw{f.idw, 0.0};
  const double pa = pooled_std(full, idw), pb = pooled_std(full, nb);
  const bool a = full.mean - idw.mean > pa, b = full.mean - nb.mean > pb;
  return {a && b, "holdout CSI@0.2 over " + std::to_string(f.csi.at("full").size()) + " seeds: full " + show(full) +
                      "; (a) IDW " + fmt(idw.mean) + ", margin " + fmt(full.mean - idw.mean, 3) + " vs pooled std " +
                      fmt(pa, 3) + (a ? "" : " [not met]") + "; (b) no_bottleneck " + show(nb) + ", margin " +
                      fmt(full.mean - nb.mean, 3) + " vs pooled std " + fmt(pb, 3) + (b ? "" : " [not met]")};
}

Outcome target_inputs_degradation(const Family& f) {
  const Stat full = stat_of(f.csi.at("full")), ti = stat_of(f.csi.at("target_inputs"));
  return {ti.mean < full.mean, "holdout CSI@0.2: target_inputs " + show(ti) + " vs full " + show(full)};
}

Outcome output_distribution_order(const Family& f) {
  const Stat full = stat_of(f.csi.at("full")), gamma = stat_of(f.csi.at("gamma")),
             gauss = stat_of(f.csi.at("gaussian"));
  return {gauss.mean < gamma.mean && gamma.mean < full.mean,
          "holdout CSI@0.2: gaussian " + show(gauss) + " < gamma " + show(gamma) + " < zig " + show(full)};
}

Outcome density_sweep(const Work& w, const Family& f, json& out) {
  const std::vector<double> fractions = nn::default_sweep_fractions();
  std::vector<std::vector<double>> per_level(fractions.size());
  std::vector<std::int64_t> stations(fractions.size());
  for (const fs::path& ckpt : f.checkpoints.at("full")) {
    const auto model = nn::load_checkpoint(ckpt).build_model();
    const auto levels = nn::density_sweep(*model, w.data, fractions, 0, w.metric);
    for (std::size_t k = 0; k < levels.size(); ++k) {
      per_level[k].push_back(csi_of(levels[k].report));
      stations[k] = levels[k].context_stations;
    }
    out.push_back(nn::to_json(levels));
  }
  std::vector<Stat> st;
  for (const auto& v : per_level) st.push_back(stat_of(v));
  const bool ends = st.back().mean >= st.front().mean;
  bool monotone = true;
  std::ostringstream d;
  d << "CSI@0.2 by context fraction:";
  for (std::size_t k = 0; k < st.size(); ++k) {
    d << " " << fmt(fractions[k], 2) << " (" << stations[k] << " st) " << fmt(st[k].mean);
    if (k > 0 && st[k].mean < st[k - 1].mean - pooled_std(st[k], st[k - 1])) {
      monotone = false;
      d << " [drop]";
    }
  }
  d << "; 100% " << fmt(st.back().mean) << (ends ? " >= " : " < ") << "5% " << fmt(st.front().mean);
  return {ends && monotone, d.str()};
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Outcome determinism_and_round_trips(const fs::path& root) {
  SyntheticDatasetConfig data;
  data.grid.height = data.grid.width = 16;
  data.layout.stations = 64;
  data.plan = {2, 1, 1, 6};
  data.cycles = 1;
  data.seed = 17;
  const Dataset ds = generate_dataset(data);
  ModelConfig mc = desk_model_config();
  mc.grid_height = mc.grid_width = 16;
  mc.timesteps = data.timesteps;
  TrainConfig tc = desk_profile().train;
  tc.max_steps = 20;
  tc.batch_size = 8;
  tc.val_every_steps = 10;
  tc.seed = 3;

  std::vector<std::string> problems;
  std::vector<nn::TrainResult> runs;
  for (const char* name : {"a", "b"}) {
    nn::TrainOptions o;
    o.out_dir = root / "determinism" / name;
    fs::remove_all(o.out_dir);
    runs.push_back(nn::train(mc, ds, tc, o));
  }
  const std::string log_a = read_text(runs[0].log_file), log_b = read_text(runs[1].log_file);
  if (log_a.empty() || log_a != log_b) problems.push_back("training logs differ");
  if (read_text(runs[0].last_checkpoint) != read_text(runs[1].last_checkpoint))
    problems.push_back("checkpoints of identical runs differ");

  const nn::Checkpoint c = nn::load_checkpoint(runs[0].last_checkpoint);
  const fs::path copy = root / "determinism" / "copy.ckpt";
  nn::save_checkpoint(c, copy);
  const nn::Checkpoint back = nn::load_checkpoint(copy);
  if (read_text(copy) != read_text(runs[0].last_checkpoint)) problems.push_back("re-saved checkpoint bytes differ");
  if (!(back.model == c.model && back.train == c.train && back.step == c.step && back.val_loss == c.val_loss &&
        back.adam_steps == c.adam_steps && back.ema_updates == c.ema_updates && back.names == c.names &&
        back.params == c.params && back.ema == c.ema && back.adam_m == c.adam_m && back.adam_v == c.adam_v))
    problems.push_back("checkpoint fields changed in the round trip");

  const MetricConfig metric = MetricConfig{}.for_grid(data.grid);
  const auto model = c.build_model();
  const fs::path dir = root / "determinism" / "export";
  fs::remove_all(dir);
  nn::export_predictions(*model, ds.test, dir);
  const nn::PredictionSet set = nn::read_predictions(dir);
  const std::vector<Predictive> direct = nn::predict(*model, ds.test);
  bool same = set.predictions.size() == direct.size();
  for (std::size_t k = 0; same && k < direct.size(); ++k) {
    const Predictive &p = set.predictions[k], &q = direct[k];
    same = p.kind == q.kind && p.a == q.a && p.b == q.b && p.pi0 == q.pi0;
    const Field<double> mean = q.moment_fields().mean;
    for (std::size_t i = 0; same && i < mean.size(); ++i)
      same = static_cast<double>(static_cast<float>(mean.data()[i])) == set.means[k].data()[i];
  }
  if (!same) problems.push_back("exported predictions differ from direct inference");
  if (to_json(nn::evaluate_predictions(set.predictions, ds.test, metric)) !=
      to_json(nn::evaluate_predictions(direct, ds.test, metric)))
    problems.push_back("evaluation of exported predictions differs");

  std::string d = "two seeded runs of " + std::to_string(tc.max_steps) + " steps: logs " +
                  (log_a == log_b ? "bit-identical" : "differ") + " (" + std::to_string(log_a.size()) +
                  " bytes); checkpoint and export (" + std::to_string(set.predictions.size()) + " episodes) round trips " +
                  (problems.empty() ? "lossless" : "lossy");
  for (const auto& p : problems) d += "; " + p;
  return {problems.empty(), d};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::string work_dir;
  std::vector<int> only;
  int seeds = 3;
  app.add_option("--work", work_dir, "cache directory for datasets and checkpoints (default $" + std::string(kWorkEnv) +
                                         " or ./acceptance_work)");
  app.add_option("--only", only, "criterion numbers to run")->check(CLI::Range(1, 11));
  app.add_option("--seeds", seeds, "seeds per run family")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  if (work_dir.empty()) {
    const char* env = std::getenv(kWorkEnv);
    work_dir = env != nullptr ? env : "acceptance_work";
  }
  const std::set<int> selected(only.begin(), only.end());
  const auto wanted = [&](int n) { return selected.empty() || selected.count(n) > 0; };

  Work w;
  w.root = fs::absolute(work_dir);
  fs::create_directories(w.root);
  json summary = json::object();
  int failed = 0;
  const auto report = [&](int n, const Outcome& o) {
    std::cout << "criterion " << n << (o.pass ? " PASS: " : " FAIL: ") << o.detail << std::endl;
    summary["criteria"][std::to_string(n)] = {{"pass", o.pass}, {"detail", o.detail}};
    if (!o.pass) ++failed;
  };
  const auto guarded = [&](int n, auto&& check) {
    if (!wanted(n)) return;
    try {
      report(n, check());
    } catch (const std::exception& e) {
      report(n, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, zig_moment_oracle);
  guarded(2, crps_oracle);
  guarded(3, acceptance::gradient_fidelity);
  guarded(4, acceptance::translation_equivariance);
  guarded(5, metric_oracle);
  guarded(6, parameter_count);

  if (wanted(7) || wanted(8) || wanted(9) || wanted(10)) {
    std::optional<Family> family;
    std::string error;
    try {
      load_data(w);
      family = run_family(w, seeds);
      summary["family"] = {{"csi", family->csi}, {"idw_csi", family->idw}, {"reports", family->reports}};
    } catch (const std::exception& e) {
      error = std::string("error: ") + e.what();
    }
    const auto family_check = [&](int n, auto&& check) {
      if (!wanted(n)) return;
      if (!family) return report(n, {false, error});
      guarded(n, [&] { return check(*family); });
    };
    family_check(7, ordering_vs_baselines);
    family_check(8, target_inputs_degradation);
    family_check(9, [&](const Family& f) {
      json sweeps = json::array();
      Outcome o = density_sweep(w, f, sweeps);
      summary["sweeps"] = sweeps;
      return o;
    });
    family_check(10, output_distribution_order);
    if (family) {
      try {
        const std::string note = uncertainty_note(w, family->checkpoints.at("full").front());
        std::cout << "note: " << note << std::endl;
        summary["uncertainty_note"] = note;
      } catch (const std::exception& e) {
        std::cout << "note: uncertainty map unavailable: " << e.what() << std::endl;
      }
    }
  }

  guarded(11, [&] { return determinism_and_round_trips(w.root); });

  std::ofstream(w.root / "acceptance.json") << summary.dump(2);
  std::cout << (failed == 0 ? "all selected criteria passed" : std::to_string(failed) + " criteria failed")
            << std::endl;
  return failed == 0 ? 0 : 1;
}
