#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "doctest.h"
#include "json.hpp"

#include "d2g/episode_io.hpp"
#include "d2g/rng.hpp"
#include "d2g/synthetic.hpp"

using namespace d2g;
namespace fs = std::filesystem;

namespace {

GridSpec small_grid(int n = 16) { return GridSpec{n, n, 4.0, 0.0, 0.0}; }

SensorNoiseConfig clean_noise() {
  SensorNoiseConfig n;
  n.station_multiplicative_sigma = 0.0;
  n.station_bias_range = {1.0, 1.0};
  n.station_dropout_prob = 0.0;
  n.station_outlier_prob = 0.0;
  n.radar_smoothing_sigma_cells = 0.0;
  n.radar_gain_bias = 1.0;
  n.radar_gain_jitter_sigma = 0.0;
  n.radar_blockage_sectors = 0;
  return n;
}

RainField ramp_field(const GridSpec& g) {
  RainField f(g);
  for (int i = 0; i < g.height; ++i)
    for (int j = 0; j < g.width; ++j) f.values(i, j) = 0.05f * static_cast<float>(i * g.width + j);
  return f;
}

// 100 station cells on a 16 x 16 grid, the first 20 of them held out.
EpisodeInputs hundred_station_inputs(int timesteps = 2) {
  const GridSpec g = small_grid();
  EpisodeInputs in;
  in.spec = g;
  in.station_cells = Mask(g.height, g.width);
  in.holdout = Mask(g.height, g.width);
  for (int n = 0; n < 100; ++n) {
    const Cell c{n / 10, n % 10};
    in.station_cells[c] = 1;
  }
  REQUIRE(count(in.station_cells) == 100);
  const auto cells = cells_of(in.station_cells);
  for (int n = 0; n < 20; ++n) in.holdout[cells[static_cast<std::size_t>(n * 5)]] = 1;
  for (int t = 0; t < timesteps; ++t) {
    StationSlice s{Field<float>(g.height, g.width), Mask(g.height, g.width)};
    for (const Cell& c : cells) {
      s.values[c] = 0.5f + static_cast<float>(t);
      s.present[c] = 1;
    }
    in.stations.push_back(std::move(s));
  }
  in.radar = RainField(g, 0.3f);
  in.truth = RainField(g, 0.7f);
  return in;
}

SyntheticDatasetConfig smoke_dataset_config() {
  SyntheticDatasetConfig c;
  c.grid = small_grid();
  c.layout.stations = 70;
  c.plan = {2, 1, 1, 6};
  c.cycles = 1;
  c.seed = 5;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("d2g_data_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("grid validation") {
  CHECK_NOTHROW(small_grid().validate());
  CHECK_THROWS_AS((GridSpec{0, 16, 4.0, 0.0, 0.0}.validate()), Error);
  CHECK_THROWS_AS((GridSpec{16, 16, -1.0, 0.0, 0.0}.validate()), Error);
  RainField f(small_grid());
  f.values(2, 3) = -1.0f;
  CHECK_THROWS_AS(f.validate(), Error);
  f.values(2, 3) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(f.validate(), Error);
  f.valid(2, 3) = 0;
  CHECK_NOTHROW(f.validate());
}

TEST_CASE("split names round trip") {
  for (Split s : {Split::Train, Split::Validation, Split::Test}) CHECK(split_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(split_from_string("holdout"), Error);
}

TEST_CASE("zig moments") {
  SUBCASE("dry indicator zeroes both moments") {
    const Moments m = zig_moments(0.9, 2.0, 4.0);
    CHECK(m.mean == 0.0);
    CHECK(m.variance == 0.0);
  }
  SUBCASE("wet indicator gives the gamma moments") {
    const Moments m = zig_moments(0.2, 2.0, 4.0);
    CHECK(m.mean == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(m.variance == doctest::Approx(0.125).epsilon(1e-15));
  }
  SUBCASE("tie at one half counts as rain") {
    CHECK(rain_indicator(0.5));
    const Moments m = zig_moments(0.5, 1.0, 1.0);
    CHECK(m.mean == 1.0);
    CHECK(m.variance == 1.0);
  }
  SUBCASE("mean is scale consistent in beta") {
    for (double s : {0.5, 2.0, 10.0}) {
      const Moments a = zig_moments(0.1, 3.0, 1.5), b = zig_moments(0.1, 3.0, 1.5 * s);
      CHECK(b.mean == doctest::Approx(a.mean / s));
      CHECK(b.variance == doctest::Approx(a.variance / (s * s)));
    }
  }
  SUBCASE("field version matches the scalar one") {
    ZigParams p(3, 4);
    Rng rng(1);
    for (std::size_t k = 0; k < p.pi0.size(); ++k) {
      p.pi0.data()[k] = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      p.alpha.data()[k] = std::uniform_real_distribution<double>(0.1, 5.0)(rng);
      p.beta.data()[k] = std::uniform_real_distribution<double>(0.1, 5.0)(rng);
    }
    const MomentFields f = zig_mean_variance(p);
    for (std::size_t k = 0; k < p.pi0.size(); ++k) {
      const Moments m = zig_moments(p.pi0.data()[k], p.alpha.data()[k], p.beta.data()[k]);
      CHECK(f.mean.data()[k] == m.mean);
      CHECK(f.variance.data()[k] == m.variance);
    }
  }
  SUBCASE("invalid parameters are rejected") {
    ZigParams p(2, 2);
    p.alpha(0, 0) = 0.0;
    CHECK_THROWS_AS(p.validate(), Error);
    ZigParams q(2, 2);
    q.pi0(1, 1) = 1.5;
    CHECK_THROWS_AS(q.validate(), Error);
  }
}

TEST_CASE("zig sampling") {
  const GridSpec g{100, 100, 1.0, 0.0, 0.0};
  SUBCASE("saturated zero probability gives a dry field") {
    ZigParams p(g.height, g.width, 1.0, 2.0, 4.0);
    const RainField f = zig_sample(p, g, 3);
    std::size_t wet = 0;
    for (float v : f.values.data()) wet += v > 0.0f;
    CHECK(wet <= 1);
  }
  SUBCASE("wet draws follow the gamma law") {
    ZigParams p(g.height, g.width, 0.0, 2.0, 4.0);
    double sum = 0.0, sq = 0.0;
    const int reps = 100;
    for (int r = 0; r < reps; ++r) {
      const RainField f = zig_sample(p, g, static_cast<std::uint64_t>(r));
      for (float v : f.values.data()) {
        sum += v;
        sq += static_cast<double>(v) * v;
      }
    }
    const double n = static_cast<double>(reps) * static_cast<double>(g.cells());
    const double mean = sum / n, var = sq / n - mean * mean;
    const double se = std::sqrt(0.125 / n);
    CHECK(std::abs(mean - 0.5) < 3.0 * se);
    CHECK(var == doctest::Approx(0.125).epsilon(0.01));
  }
  SUBCASE("zero fraction tracks pi0") {
    ZigParams p(g.height, g.width, 0.3, 1.0, 1.0);
    const RainField f = zig_sample(p, g, 9);
    std::size_t dry = 0;
    for (float v : f.values.data()) dry += v == 0.0f;
    const double frac = static_cast<double>(dry) / static_cast<double>(g.cells());
    CHECK(std::abs(frac - 0.3) < 4.0 * std::sqrt(0.3 * 0.7 / static_cast<double>(g.cells())));
  }
  SUBCASE("same seed gives the same field") {
    ZigParams p(g.height, g.width, 0.4, 1.5, 2.0);
    CHECK(zig_sample(p, g, 17) == zig_sample(p, g, 17));
    CHECK_FALSE(zig_sample(p, g, 17) == zig_sample(p, g, 18));
  }
  SUBCASE("shape mismatch throws") {
    ZigParams p(4, 4);
    CHECK_THROWS_AS(zig_sample(p, g, 1), ShapeError);
  }
}

TEST_CASE("truth generator") {
  const GridSpec g{32, 32, 4.0, 0.0, 0.0};
  SUBCASE("always dry") {
    StormFieldConfig c;
    c.dry_probability = 1.0;
    for (const RainField& f : generate_truth_sequence(c, g, 50, 1))
      for (float v : f.values.data()) CHECK(v == 0.0f);
  }
  SUBCASE("a single still cell stays put") {
    StormFieldConfig c;
    c.dry_probability = 0.0;
    c.n_cells_range = {1, 1};
    c.advection_velocity_kmph = {0.0, 0.0};
    c.regime_hours = 48;
    const auto seq = generate_truth_sequence(c, g, 24, 4);
    const auto argmax = [](const RainField& f) {
      return std::max_element(f.values.data().begin(), f.values.data().end()) - f.values.data().begin();
    };
    const auto loc = argmax(seq.front());
    CHECK(seq.front().values.data()[static_cast<std::size_t>(loc)] > 0.0f);
    for (const RainField& f : seq) CHECK(argmax(f) == loc);
  }
  SUBCASE("default zero fraction") {
    const auto seq = generate_truth_sequence(StormFieldConfig{}, g, 100, 2024);
    std::size_t zeros = 0, total = 0;
    for (const RainField& f : seq) {
      for (float v : f.values.data()) zeros += v == 0.0f;
      total += f.values.size();
      CHECK_NOTHROW(f.validate());
    }
    const double frac = static_cast<double>(zeros) / static_cast<double>(total);
    MESSAGE("zero fraction over 100 h, seed 2024: " << frac);
    CHECK(frac >= 0.5);
    CHECK(frac <= 0.95);
  }
  SUBCASE("deterministic") {
    CHECK(generate_truth_sequence(StormFieldConfig{}, g, 30, 8) == generate_truth_sequence(StormFieldConfig{}, g, 30, 8));
  }
}

TEST_CASE("station simulation") {
  const GridSpec g = small_grid();
  const std::vector<RainField> truth{ramp_field(g), ramp_field(g)};
  const std::vector<Station> layout{{0, {1, 2}}, {1, {5, 5}}, {2, {15, 0}}};
  SUBCASE("clean sensors observe the truth") {
    const auto obs = simulate_stations(truth, layout, clean_noise(), 3);
    REQUIRE(obs.size() == 6);
    for (const auto& o : obs) CHECK(o.value == truth[static_cast<std::size_t>(o.timestep)].values[o.cell]);
  }
  SUBCASE("full dropout gives no observations") {
    auto n = clean_noise();
    n.station_dropout_prob = 1.0;
    CHECK(simulate_stations(truth, layout, n, 3).empty());
  }
  SUBCASE("fixed bias scales every reading") {
    auto n = clean_noise();
    n.station_bias_range = {2.0, 2.0};
    for (const auto& o : simulate_stations(truth, layout, n, 3))
      CHECK(o.value == 2.0f * truth[static_cast<std::size_t>(o.timestep)].values[o.cell]);
  }
  SUBCASE("noisy readings stay non-negative and reproducible") {
    const auto a = simulate_stations(truth, layout, SensorNoiseConfig{}, 11);
    const auto b = simulate_stations(truth, layout, SensorNoiseConfig{}, 11);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      CHECK(a[k].value >= 0.0f);
      CHECK(a[k].value == b[k].value);
    }
  }
  SUBCASE("layout stays on the grid") {
    for (const Station& s : draw_station_layout(g, StationLayoutConfig{}, 1)) CHECK(g.contains(s.cell));
  }
}

TEST_CASE("radar simulation") {
  const GridSpec g = small_grid();
  const RainField truth = ramp_field(g);
  SUBCASE("reflectivity law") {
    CHECK(rain_to_reflectivity(1.0, 200.0, 1.6) == 200.0);
    CHECK(reflectivity_to_rain(200.0, 200.0, 1.6) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(reflectivity_to_rain(0.0, 200.0, 1.6) == 0.0);
  }
  SUBCASE("no perturbation is the identity") {
    const RainField r = simulate_radar(truth, clean_noise(), 1);
    for (std::size_t k = 0; k < r.values.size(); ++k)
      CHECK(r.values.data()[k] == doctest::Approx(truth.values.data()[k]).epsilon(1e-6));
  }
  SUBCASE("gain bias rescales the recovered rate") {
    auto n = clean_noise();
    n.radar_gain_bias = 0.5;
    const double factor = std::pow(0.5, 1.0 / 1.6);
    CHECK(factor == doctest::Approx(0.648).epsilon(1e-3));
    const RainField r = simulate_radar(truth, n, 1);
    for (std::size_t k = 0; k < r.values.size(); ++k)
      CHECK(r.values.data()[k] == doctest::Approx(factor * truth.values.data()[k]).epsilon(1e-6));
  }
  SUBCASE("blockage zeroes sectors and blur preserves mass of a flat field") {
    auto n = clean_noise();
    n.radar_blockage_sectors = 2;
    const RainField flat(g, 2.0f);
    const RainField r = simulate_radar(flat, n, 1);
    std::size_t zeros = 0;
    for (float v : r.values.data()) zeros += v == 0.0f;
    CHECK(zeros > 0);
    CHECK(zeros < g.cells() / 2);
    auto m = clean_noise();
    m.radar_smoothing_sigma_cells = 1.5;
    const RainField smooth = simulate_radar(flat, m, 1);
    for (float v : smooth.values.data()) CHECK(v == doctest::Approx(2.0f).epsilon(1e-5));
  }
}

TEST_CASE("station gridding takes the median") {
  const GridSpec g = small_grid(8);
  const auto grid_one = [&](std::vector<float> values) {
    std::vector<StationObservation> obs;
    for (std::size_t k = 0; k < values.size(); ++k)
      obs.push_back({{3, 4}, 0, values[k], static_cast<std::int64_t>(k)});
    const auto slices = grid_stations(obs, g, 1);
    CHECK(slices[0].present(3, 4) == 1);
    CHECK(count(slices[0].present) == 1);
    return slices[0].values(3, 4);
  };
  CHECK(grid_one({1, 2, 9}) == 2.0f);
  CHECK(grid_one({3.7f}) == 3.7f);
  CHECK(grid_one({0, 0, 5, 6}) == 2.5f);

  std::vector<float> v{4.0f, 0.5f, 8.0f, 1.0f, 1.5f, 0.0f};
  const float reference = [&] {
    auto s = v;
    std::sort(s.begin(), s.end());
    return 0.5f * (s[2] + s[3]);
  }();
  Rng rng(3);
  for (int r = 0; r < 5; ++r) {
    std::shuffle(v.begin(), v.end(), rng);
    CHECK(grid_one(v) == reference);
  }
  CHECK_THROWS_AS(grid_stations({{{9, 0}, 0, 1.0f, 0}}, g, 1), Error);
  CHECK_THROWS_AS(grid_stations({{{0, 0}, 2, 1.0f, 0}}, g, 1), Error);
}

TEST_CASE("episode construction") {
  const EpisodeInputs in = hundred_station_inputs();
  SUBCASE("context size is floor-rounded") {
    CHECK(context_count(80, 0.4) == 32);
    CHECK(context_count(80, 0.33) == 26);
    const Episode ep = build_episode(in, 0.4, MaskingMode::Train, 7);
    CHECK(count(ep.last_context()) == 32);
    CHECK(count(ep.target) == 80 - 32);
    CHECK_NOTHROW(ep.validate());
  }
  SUBCASE("empty context leaves every non-holdout station as target") {
    const Episode ep = build_episode(in, 0.0, MaskingMode::Train, 7);
    CHECK(count(ep.last_context()) == 0);
    for (const Cell& c : cells_of(in.station_cells)) CHECK(ep.target[c] == !in.holdout[c]);
  }
  SUBCASE("context, target and holdout are disjoint") {
    for (MaskingMode mode : {MaskingMode::Train, MaskingMode::Validation}) {
      const Episode ep = build_episode(in, 0.45, mode, 2);
      for (std::size_t k = 0; k < ep.target.size(); ++k) {
        CHECK(!(ep.target.data()[k] && ep.last_context().data()[k]));
        CHECK(!(ep.holdout.data()[k] && ep.last_context().data()[k]));
        CHECK(!(ep.holdout.data()[k] && ep.target.data()[k]));
      }
    }
  }
  SUBCASE("test mode predicts the holdout from every other station") {
    const Episode ep = build_episode(in, 0.4, MaskingMode::Test, 7);
    CHECK(ep.split == Split::Test);
    CHECK(count(ep.last_context()) == 80);
    CHECK(ep.target == in.holdout);
    for (const Cell& c : cells_of(ep.last_context())) CHECK(!in.holdout[c]);
  }
  SUBCASE("masking is seeded") {
    CHECK(build_episode(in, 0.4, MaskingMode::Train, 7) == build_episode(in, 0.4, MaskingMode::Train, 7));
    CHECK_FALSE(build_episode(in, 0.4, MaskingMode::Train, 7).context ==
                build_episode(in, 0.4, MaskingMode::Train, 8).context);
  }
  SUBCASE("absent readings leave context cells out of that hour") {
    EpisodeInputs gap = in;
    gap.stations[0].present.fill(0);
    const Episode ep = build_episode(gap, 0.4, MaskingMode::Train, 7);
    CHECK(count(ep.context[0]) == 0);
    CHECK(count(ep.context[1]) == 32);
  }
  SUBCASE("remask and restrict keep the invariants") {
    const Episode ep = build_episode(in, 0.4, MaskingMode::Train, 7);
    const Episode again = remask_episode(ep, in.station_cells, 0.3, MaskingMode::Train, 99);
    CHECK(count(again.last_context()) == 24);
    CHECK_NOTHROW(again.validate());
    const Episode test = build_episode(in, 0.4, MaskingMode::Test, 7);
    Mask allowed(16, 16);
    const auto ctx = cells_of(test.last_context());
    for (std::size_t k = 0; k < 10; ++k) allowed[ctx[k]] = 1;
    const Episode thin = restrict_context(test, allowed);
    CHECK(count(thin.last_context()) == 10);
    CHECK(thin.target == test.target);
  }
  SUBCASE("no stations left throws") {
    EpisodeInputs all_out = in;
    all_out.holdout = all_out.station_cells;
    CHECK_THROWS_AS(build_episode(all_out, 0.4, MaskingMode::Train, 1), Error);
  }
}

TEST_CASE("timeline splits") {
  const SplitPlan plan{12, 2, 2, 12};
  SUBCASE("one cycle has one block per split") {
    const Timeline tl = split_timeline(plan.cycle_hours(), plan);
    REQUIRE(tl.blocks.size() == 3);
    CHECK(tl.blocks[0].split == Split::Train);
    CHECK(tl.blocks[1].split == Split::Validation);
    CHECK(tl.blocks[2].split == Split::Test);
    CHECK(tl.train.size() == 288);
    CHECK(tl.val.size() == 48);
    CHECK(tl.test.size() == 48);
  }
  SUBCASE("splits are separated by the blackout") {
    const Timeline tl = split_timeline(3 * plan.cycle_hours(), plan);
    for (const SplitBlock& a : tl.blocks)
      for (const SplitBlock& b : tl.blocks) {
        if (a.split == b.split) continue;
        const std::int64_t gap = a.end <= b.begin ? b.begin - (a.end - 1) : a.begin - (b.end - 1);
        CHECK(gap > plan.blackout_hours);
      }
  }
  SUBCASE("two cycles give 576 training hours") {
    const Timeline tl = split_timeline(2 * plan.cycle_hours(), plan);
    CHECK(tl.train.size() == 576);
    std::set<std::int64_t> seen(tl.train.begin(), tl.train.end());
    seen.insert(tl.val.begin(), tl.val.end());
    seen.insert(tl.test.begin(), tl.test.end());
    CHECK(seen.size() == tl.train.size() + tl.val.size() + tl.test.size());
  }
  SUBCASE("episode windows stay inside a block") {
    const Timeline tl = split_timeline(plan.cycle_hours(), plan);
    const auto hours = tl.episode_hours(Split::Validation, 4);
    CHECK(hours.size() == 48 - 3);
    CHECK(hours.front() - 3 == tl.blocks[1].begin);
  }
  SUBCASE("too short a record throws") {
    CHECK_THROWS_AS(split_timeline(100, plan), Error);
  }
}

TEST_CASE("nested density masks") {
  std::vector<Cell> cells;
  for (int n = 0; n < 100; ++n) cells.push_back({n / 10, n % 10});
  CHECK(nested_density_masks(cells, {1.0}, 3)[0] == cells);
  const auto m = nested_density_masks(cells, {0.05, 0.3, 1.0}, 3);
  REQUIRE(m.size() == 3);
  CHECK(m[0].size() == 5);
  CHECK(m[1].size() == 30);
  CHECK(m[2].size() == 100);
  CHECK(std::includes(m[1].begin(), m[1].end(), m[0].begin(), m[0].end()));
  CHECK(std::includes(m[2].begin(), m[2].end(), m[1].begin(), m[1].end()));
  CHECK(nested_density_masks(cells, {0.05, 0.3, 1.0}, 3) == m);
  CHECK_FALSE(nested_density_masks(cells, {0.3}, 4)[0] == m[1]);
  CHECK_THROWS_AS(nested_density_masks(cells, {0.0}, 3), Error);
}

TEST_CASE("episode container round trip") {
  EpisodeInputs in = hundred_station_inputs(4);
  in.radar.valid(0, 0) = 0;
  Episode ep = build_episode(in, 0.35, MaskingMode::Validation, 21);
  ep.hour = 77;
  const fs::path dir = scratch("episode");
  write_episode(ep, dir);
  const Episode back = read_episode(dir);
  CHECK(back == ep);

  ep.truth.reset();
  write_episode(ep, dir / "no_truth");
  CHECK(read_episode(dir / "no_truth") == ep);

  SUBCASE("version mismatch") {
    nlohmann::json m;
    std::ifstream(dir / "manifest.json") >> m;
    m["format_version"] = 99;
    std::ofstream(dir / "manifest.json") << m.dump();
    CHECK_THROWS_AS(read_episode(dir), VersionError);
  }
  SUBCASE("truncated payload") {
    fs::resize_file(dir / "radar.bin", 10);
    CHECK_THROWS_AS(read_episode(dir), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("synthetic dataset") {
  const SyntheticDatasetConfig c = smoke_dataset_config();
  const Dataset ds = generate_dataset(c);
  CHECK(ds.train.size() == 48 - 3);
  CHECK(ds.val.size() == 24 - 3);
  CHECK(ds.test.size() == 24 - 3);
  CHECK(count(ds.holdout) == static_cast<std::size_t>(std::floor(0.2 * static_cast<double>(count(ds.station_cells)))));

  for (Split s : {Split::Train, Split::Validation, Split::Test})
    for (const Episode& ep : ds.episodes(s)) {
      CHECK(ep.split == s);
      CHECK(ep.holdout == ds.holdout);
      for (const Mask& ctx : ep.context)
        for (std::size_t k = 0; k < ctx.size(); ++k) CHECK(!(ctx.data()[k] && ds.holdout.data()[k]));
    }

  SUBCASE("generation is reproducible") {
    const Dataset again = generate_dataset(c);
    CHECK(again.train == ds.train);
    CHECK(again.test == ds.test);
  }
  SUBCASE("config json round trip") {
    const auto j = to_json(c);
    CHECK(to_json(dataset_config_from_json(j)) == j);
  }
  SUBCASE("disk round trip") {
    const fs::path dir = scratch("dataset");
    write_dataset(ds, dir);
    const Dataset back = read_dataset(dir);
    CHECK(back.holdout == ds.holdout);
    CHECK(back.station_cells == ds.station_cells);
    CHECK(back.train == ds.train);
    CHECK(back.val == ds.val);
    CHECK(back.test == ds.test);

    nlohmann::json m;
    std::ifstream(dir / "dataset.json") >> m;
    m["format_version"] = 0;
    std::ofstream(dir / "dataset.json") << m.dump();
    CHECK_THROWS_AS(read_dataset(dir), VersionError);
    fs::remove_all(dir);
  }
}
