#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "d2g/model_config.hpp"
#include "d2g/synthetic.hpp"

namespace d2g {

struct TrainConfig {
  std::int64_t max_steps = 50000;
  int batch_size = 32;
  double lr_init = 3e-4;  // cosine-annealed to 0 at max_steps
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double ema_decay = 0.999;
  std::int64_t val_every_steps = 1000;
  std::uint64_t seed = 0;
  double grad_clip_norm = 1.0;
  int eval_batch_size = 16;
  // Draw a fresh context subset every time a training episode is visited.
  bool remask_train = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Everything a run needs besides the data on disk.
struct Profile {
  std::string name;
  SyntheticDatasetConfig data;
  ModelConfig model;
  TrainConfig train;
};

// desk: 32x32 grid, 2000 steps, batch 16, T = 4. paper: 96x96 grid, 50K steps, batch 32.
Profile desk_profile();
Profile paper_profile();
Profile profile_by_name(const std::string& name);

// Overrides present keys of `profile` from a config document with optional
// "data", "model" and "train" sections.
Profile apply_config(Profile profile, const nlohmann::json& config);
nlohmann::json to_json(const Profile& p);

}  // namespace d2g
