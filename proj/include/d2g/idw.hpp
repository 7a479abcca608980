#pragma once

#include <limits>
#include <vector>

#include "d2g/grid.hpp"

namespace d2g {

struct IdwConfig {
  double power = 2.0;
  double max_radius_km = std::numeric_limits<double>::infinity();
};

struct IdwStation {
  Cell cell;
  double value = 0.0;
};

// Distances are measured between cell centres in km. A query on a station
// cell returns that station's value; cells with no station within
// max_radius_km are 0.
Field<double> idw_densify(const std::vector<IdwStation>& stations, const GridSpec& spec, const IdwConfig& config = {});

// Inputs of the last timestep (context cells only).
std::vector<IdwStation> idw_inputs(const Episode& ep);

}  // namespace d2g
