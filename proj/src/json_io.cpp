#include "d2g/json_io.hpp"

#include <fstream>

namespace d2g {

nlohmann::json to_json(const GridSpec& spec) {
  return {{"height", spec.height},
          {"width", spec.width},
          {"cell_size_km", spec.cell_size_km},
          {"origin_northing_km", spec.origin_northing_km},
          {"origin_easting_km", spec.origin_easting_km}};
}

GridSpec grid_from_json(const nlohmann::json& j) {
  GridSpec s;
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.cell_size_km = j.value("cell_size_km", 4.0);
  s.origin_northing_km = j.value("origin_northing_km", 0.0);
  s.origin_easting_km = j.value("origin_easting_km", 0.0);
  return s;
}

nlohmann::json read_json_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("missing file " + file.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("malformed JSON in " + file.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& file, const nlohmann::json& j) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error("cannot open " + file.string() + " for writing");
  out << j.dump(2) << '\n';
}

nlohmann::json cells_to_json(const std::vector<Cell>& cells) {
  nlohmann::json a = nlohmann::json::array();
  for (const Cell& c : cells) a.push_back({c.i, c.j});
  return a;
}

std::vector<Cell> cells_from_json(const nlohmann::json& j) {
  std::vector<Cell> out;
  out.reserve(j.size());
  for (const auto& e : j) out.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  return out;
}

}  // namespace d2g
