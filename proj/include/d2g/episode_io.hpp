#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "d2g/grid.hpp"

namespace d2g {

inline constexpr int kEpisodeFormatVersion = 1;

// Episode container: a directory holding manifest.json plus one raw file per
// field. Floats are little-endian IEEE-754 binary32, masks are one byte per
// cell, all arrays row-major in (T, H, W) or (H, W) order.
//
//   stations_values.bin  float32 (T, H, W)
//   stations_mask.bin    uint8   (T, H, W)
//   radar.bin            float32 (H, W)
//   radar_mask.bin       uint8   (H, W)   only written when some radar cell is invalid
//   context_mask.bin     uint8   (T, H, W)
//   target_mask.bin      uint8   (H, W)
//   holdout_mask.bin     uint8   (H, W)
//   truth.bin            float32 (H, W)   optional
void write_episode(const Episode& episode, const std::filesystem::path& dir);
Episode read_episode(const std::filesystem::path& dir);

// Raw little-endian helpers shared by the prediction export.
void write_f32(const std::filesystem::path& file, std::span<const float> values);
std::vector<float> read_f32(const std::filesystem::path& file, std::size_t expected);
void write_u8(const std::filesystem::path& file, std::span<const std::uint8_t> values);
std::vector<std::uint8_t> read_u8(const std::filesystem::path& file, std::size_t expected);

}  // namespace d2g
