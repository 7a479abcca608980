#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "d2g/nn/checkpoint.hpp"
#include "d2g/synthetic.hpp"
#include "d2g/train_config.hpp"

D2G_NN_BEGIN
namespace nn {

// Raised when the training loss stops being finite; the offending batch has
// been dumped next to the log.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Raised when the stop flag is set; the log has been flushed.
class Interrupted : public Error {
 public:
  using Error::Error;
};

struct LogRecord {
  std::int64_t step = 0;  // 1-based update count
  double lr = 0.0;        // rate used by this update
  double train_loss = 0.0;
  double grad_norm = 0.0;
  std::optional<double> val_loss;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // best.ckpt, last.ckpt, train_log.jsonl
  const std::atomic<bool>* stop = nullptr;
  std::function<void(const LogRecord&)> on_record;
  nlohmann::json info = nlohmann::json::object();  // copied into checkpoints
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path log_file;
  std::vector<LogRecord> log;
  double best_val_loss = 0.0;
  std::int64_t best_step = 0;
};

// Target-weighted mean NLL over `episodes` in eval mode.
double mean_nll(const Model& model, std::span<const Episode> episodes, int batch_size);

// AdamW + cosine schedule + gradient clipping + EMA; validation on the EMA
// weights every val_every_steps and at the last step; best-by-val checkpoint.
TrainResult train(const ModelConfig& model_config, const Dataset& dataset, const TrainConfig& config,
                  const TrainOptions& options);

}  // namespace nn
D2G_NN_END
