#include "d2g/train_config.hpp"

namespace d2g {

void TrainConfig::validate() const {
  if (max_steps < 1 || batch_size < 1 || eval_batch_size < 1 || val_every_steps < 1)
    throw Error("TrainConfig: step counts and batch sizes must be positive");
  if (!(lr_init > 0.0) || !(weight_decay >= 0.0) || !(adam_epsilon > 0.0) || !(grad_clip_norm > 0.0))
    throw Error("TrainConfig: learning rate, epsilon and clip norm must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw Error("TrainConfig: betas must lie in (0, 1)");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw Error("TrainConfig: ema_decay must lie in (0, 1)");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"max_steps", c.max_steps},
          {"batch_size", c.batch_size},
          {"lr_init", c.lr_init},
          {"weight_decay", c.weight_decay},
          {"betas", {c.beta1, c.beta2}},
          {"adam_epsilon", c.adam_epsilon},
          {"ema_decay", c.ema_decay},
          {"val_every_steps", c.val_every_steps},
          {"seed", c.seed},
          {"grad_clip_norm", c.grad_clip_norm},
          {"eval_batch_size", c.eval_batch_size},
          {"remask_train", c.remask_train}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (!j.is_object()) throw FormatError("train config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "max_steps") c.max_steps = value.get<std::int64_t>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "lr_init") c.lr_init = value.get<double>();
    else if (key == "weight_decay") c.weight_decay = value.get<double>();
    else if (key == "betas") {
      if (!value.is_array() || value.size() != 2) throw FormatError("train config: betas must be a pair");
      c.beta1 = value[0].get<double>();
      c.beta2 = value[1].get<double>();
    } else if (key == "adam_epsilon") c.adam_epsilon = value.get<double>();
    else if (key == "ema_decay") c.ema_decay = value.get<double>();
    else if (key == "val_every_steps") c.val_every_steps = value.get<std::int64_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "grad_clip_norm") c.grad_clip_norm = value.get<double>();
    else if (key == "eval_batch_size") c.eval_batch_size = value.get<int>();
    else if (key == "remask_train") c.remask_train = value.get<bool>();
    else throw FormatError("train config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

Profile desk_profile() {
  Profile p;
  p.name = "desk";
  p.model = desk_model_config();
  p.train.max_steps = 2000;
  p.train.batch_size = 16;
  p.train.val_every_steps = 200;
  // 2000-step schedule; chosen on validation NLL of the full model.
  p.train.lr_init = 1e-3;
  return p;
}

Profile paper_profile() {
  Profile p;
  p.name = "paper";
  p.data.grid = GridSpec{96, 96, 4.0, 0.0, 0.0};
  p.data.layout.stations = 1800;
  p.model = paper_model_config();
  return p;
}

Profile profile_by_name(const std::string& name) {
  if (name == "desk") return desk_profile();
  if (name == "paper") return paper_profile();
  throw Error("unknown profile '" + name + "' (expected desk or paper)");
}

Profile apply_config(Profile p, const nlohmann::json& config) {
  if (!config.is_object()) throw FormatError("config must be a JSON object");
  for (const auto& [key, value] : config.items()) {
    if (key == "data") {
      nlohmann::json merged = to_json(p.data);
      merged.merge_patch(value);
      p.data = dataset_config_from_json(merged);
    } else if (key == "model") {
      nlohmann::json merged = to_json(p.model);
      merged.merge_patch(value);
      p.model = model_config_from_json(merged);
    } else if (key == "train") {
      nlohmann::json merged = to_json(p.train);
      merged.merge_patch(value);
      p.train = train_config_from_json(merged);
    } else if (key == "profile") {
      continue;
    } else {
      throw FormatError("config: unknown section '" + key + "'");
    }
  }
  p.model.grid_height = p.data.grid.height;
  p.model.grid_width = p.data.grid.width;
  p.model.validate();
  return p;
}

nlohmann::json to_json(const Profile& p) {
  return {{"profile", p.name}, {"data", to_json(p.data)}, {"model", to_json(p.model)}, {"train", to_json(p.train)}};
}

}  // namespace d2g
