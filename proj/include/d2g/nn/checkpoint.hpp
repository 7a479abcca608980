#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2g/model_config.hpp"
#include "d2g/nn/model.hpp"
#include "d2g/train_config.hpp"

D2G_NN_BEGIN
namespace nn {

inline constexpr int kCheckpointVersion = 1;

// Binary container:
//   8 bytes   magic "D2GCKPT\0"
//   uint32    format version
//   uint64    header length n
//   n bytes   JSON header (configs, counters, tensor manifest, dtype)
//   arrays    params, ema, adam_m, adam_v; each tensor in manifest order as
//             little-endian values of the header dtype
struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  nlohmann::json data = nlohmann::json::object();  // dataset config echo
  nlohmann::json info = nlohmann::json::object();  // free-form provenance
  std::int64_t step = 0;
  double val_loss = 0.0;
  std::int64_t adam_steps = 0;
  std::int64_t ema_updates = 0;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<Buffer> params, ema, adam_m, adam_v;

  // Model holding the EMA weights (the evaluation weights) or the raw ones.
  std::unique_ptr<Model> build_model(bool use_ema = true) const;
};

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& file);
// Throws FormatError for foreign or truncated files and VersionError for a
// container written by another format version.
Checkpoint load_checkpoint(const std::filesystem::path& file);

// Tensor manifest of a parameter list.
void set_manifest(Checkpoint& c, const ParameterList& params);

}  // namespace nn
D2G_NN_END
