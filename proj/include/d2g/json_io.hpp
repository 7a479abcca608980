#pragma once

#include <filesystem>

#include "json.hpp"

#include "d2g/grid.hpp"

namespace d2g {

nlohmann::json to_json(const GridSpec& spec);
GridSpec grid_from_json(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& file);
void write_json_file(const std::filesystem::path& file, const nlohmann::json& j);

nlohmann::json cells_to_json(const std::vector<Cell>& cells);
std::vector<Cell> cells_from_json(const nlohmann::json& j);

}  // namespace d2g
