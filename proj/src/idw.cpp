#include "d2g/idw.hpp"

#include <cmath>

namespace d2g {

Field<double> idw_densify(const std::vector<IdwStation>& stations, const GridSpec& spec, const IdwConfig& config) {
  if (stations.empty()) throw Error("idw_densify: no stations");
  if (!(config.power > 0.0)) throw Error("idw_densify: power must be positive");
  if (!(config.max_radius_km > 0.0)) throw Error("idw_densify: max radius must be positive");
  for (const IdwStation& s : stations)
    if (!spec.contains(s.cell)) throw Error("idw_densify: station outside grid");
  Field<double> out(spec.height, spec.width, 0.0);
  for (int i = 0; i < spec.height; ++i)
    for (int j = 0; j < spec.width; ++j) {
      double num = 0.0, den = 0.0;
      bool exact = false;
      for (const IdwStation& s : stations) {
        const double di = (s.cell.i - i) * spec.cell_size_km, dj = (s.cell.j - j) * spec.cell_size_km;
        const double d = std::hypot(di, dj);
        if (d == 0.0) {
          out(i, j) = s.value;
          exact = true;
          break;
        }
        if (d > config.max_radius_km) continue;
        const double w = std::pow(d, -config.power);
        num += w * s.value;
        den += w;
      }
      if (!exact) out(i, j) = den > 0.0 ? num / den : 0.0;
    }
  return out;
}

std::vector<IdwStation> idw_inputs(const Episode& ep) {
  std::vector<IdwStation> out;
  const StationSlice& last = ep.last_stations();
  for (const Cell c : cells_of(ep.last_context())) out.push_back({c, last.values[c]});
  return out;
}

}  // namespace d2g
