#include "d2g/episode_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "d2g/json_io.hpp"

namespace d2g {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

void write_f32(const fs::path& file, std::span<const float> values) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + file.string() + " for writing");
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  if (!out) throw Error("write failed: " + file.string());
}

std::vector<float> read_f32(const fs::path& file, std::size_t expected) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("missing file " + file.string());
  std::vector<float> v(expected);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(expected * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(expected * sizeof(float)) || in.peek() != EOF)
    throw FormatError("size mismatch in " + file.string());
  return v;
}

void write_u8(const fs::path& file, std::span<const std::uint8_t> values) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + file.string() + " for writing");
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
  if (!out) throw Error("write failed: " + file.string());
}

std::vector<std::uint8_t> read_u8(const fs::path& file, std::size_t expected) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("missing file " + file.string());
  std::vector<std::uint8_t> v(expected);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(expected));
  if (in.gcount() != static_cast<std::streamsize>(expected) || in.peek() != EOF)
    throw FormatError("size mismatch in " + file.string());
  return v;
}

void write_episode(const Episode& ep, const fs::path& dir) {
  ep.validate();
  fs::create_directories(dir);
  const std::size_t n = ep.spec.cells();
  const auto T = static_cast<std::size_t>(ep.timesteps);

  std::vector<float> sv;
  std::vector<std::uint8_t> sm, cm;
  sv.reserve(T * n);
  sm.reserve(T * n);
  cm.reserve(T * n);
  for (std::size_t t = 0; t < T; ++t) {
    sv.insert(sv.end(), ep.stations[t].values.data().begin(), ep.stations[t].values.data().end());
    sm.insert(sm.end(), ep.stations[t].present.data().begin(), ep.stations[t].present.data().end());
    cm.insert(cm.end(), ep.context[t].data().begin(), ep.context[t].data().end());
  }
  write_f32(dir / "stations_values.bin", sv);
  write_u8(dir / "stations_mask.bin", sm);
  write_u8(dir / "context_mask.bin", cm);
  write_f32(dir / "radar.bin", ep.radar.values.data());
  const bool radar_fully_valid = count(ep.radar.valid) == n;
  if (!radar_fully_valid) write_u8(dir / "radar_mask.bin", ep.radar.valid.data());
  write_u8(dir / "target_mask.bin", ep.target.data());
  write_u8(dir / "holdout_mask.bin", ep.holdout.data());
  if (ep.truth) write_f32(dir / "truth.bin", ep.truth->values.data());

  nlohmann::json m;
  m["format"] = "d2g-episode";
  m["format_version"] = kEpisodeFormatVersion;
  m["grid"] = to_json(ep.spec);
  m["timesteps"] = ep.timesteps;
  m["hour"] = ep.hour;
  m["split"] = to_string(ep.split);
  m["seed"] = ep.seed;
  m["has_truth"] = ep.truth.has_value();
  m["radar_fully_valid"] = radar_fully_valid;
  write_json_file(dir / "manifest.json", m);
}

Episode read_episode(const fs::path& dir) {
  const nlohmann::json m = read_json_file(dir / "manifest.json");
  if (m.value("format", "") != "d2g-episode") throw FormatError("not an episode container: " + dir.string());
  if (m.at("format_version").get<int>() != kEpisodeFormatVersion)
    throw VersionError("unsupported episode format version in " + dir.string());

  Episode ep;
  ep.spec = grid_from_json(m.at("grid"));
  ep.spec.validate();
  ep.timesteps = m.at("timesteps").get<int>();
  ep.hour = m.at("hour").get<std::int64_t>();
  ep.split = split_from_string(m.at("split").get<std::string>());
  ep.seed = m.at("seed").get<std::uint64_t>();
  const int H = ep.spec.height, W = ep.spec.width;
  const std::size_t n = ep.spec.cells();
  const auto T = static_cast<std::size_t>(ep.timesteps);

  const auto sv = read_f32(dir / "stations_values.bin", T * n);
  const auto sm = read_u8(dir / "stations_mask.bin", T * n);
  const auto cm = read_u8(dir / "context_mask.bin", T * n);
  for (std::size_t t = 0; t < T; ++t) {
    StationSlice s{Field<float>(H, W), Mask(H, W)};
    Mask c(H, W);
    std::copy_n(sv.begin() + static_cast<std::ptrdiff_t>(t * n), n, s.values.data().begin());
    std::copy_n(sm.begin() + static_cast<std::ptrdiff_t>(t * n), n, s.present.data().begin());
    std::copy_n(cm.begin() + static_cast<std::ptrdiff_t>(t * n), n, c.data().begin());
    ep.stations.push_back(std::move(s));
    ep.context.push_back(std::move(c));
  }
  ep.radar = RainField(ep.spec);
  ep.radar.values.storage() = read_f32(dir / "radar.bin", n);
  if (!m.at("radar_fully_valid").get<bool>()) ep.radar.valid.storage() = read_u8(dir / "radar_mask.bin", n);
  ep.target = Mask(H, W);
  ep.target.storage() = read_u8(dir / "target_mask.bin", n);
  ep.holdout = Mask(H, W);
  ep.holdout.storage() = read_u8(dir / "holdout_mask.bin", n);
  if (m.at("has_truth").get<bool>()) {
    RainField truth(ep.spec);
    truth.values.storage() = read_f32(dir / "truth.bin", n);
    ep.truth = std::move(truth);
  }
  ep.validate();
  return ep;
}

}  // namespace d2g
