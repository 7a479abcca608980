#include "d2g/nn/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "d2g/episode_io.hpp"
#include "d2g/nn/optim.hpp"

D2G_NN_BEGIN
namespace nn {

namespace fs = std::filesystem;

nlohmann::json LogRecord::to_json() const {
  nlohmann::json j = {{"step", step}, {"lr", lr}, {"train_loss", train_loss}, {"grad_norm", grad_norm}};
  if (val_loss) j["val_loss"] = *val_loss;
  return j;
}

double mean_nll(const Model& model, std::span<const Episode> episodes, int batch_size) {
  NoGradGuard ng;
  double total = 0.0;
  std::size_t count = 0;
  std::vector<const Episode*> group;
  for (std::size_t start = 0; start < episodes.size(); start += static_cast<std::size_t>(batch_size)) {
    group.clear();
    for (std::size_t k = start; k < std::min(episodes.size(), start + static_cast<std::size_t>(batch_size)); ++k)
      group.push_back(&episodes[k]);
    const Batch b = make_batch(group, model.config());
    if (b.targets.empty()) continue;
    const Tensor raw = model.forward(b);
    const double nll = distribution_nll(raw, model.config().output, b.targets, b.y, model.config().gamma_zero_floor).item();
    total += nll * static_cast<double>(b.targets.size());
    count += b.targets.size();
  }
  if (count == 0) throw Error("mean_nll: no target cells in the evaluated episodes");
  return total / static_cast<double>(count);
}

namespace {

void dump_batch(const fs::path& dir, std::int64_t step, double loss, const std::vector<const Episode*>& episodes) {
  fs::create_directories(dir);
  nlohmann::json j = {{"step", step}, {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(nullptr)}};
  nlohmann::json eps = nlohmann::json::array();
  for (std::size_t k = 0; k < episodes.size(); ++k) {
    eps.push_back({{"hour", episodes[k]->hour}, {"seed", episodes[k]->seed}, {"dir", std::to_string(k)}});
    write_episode(*episodes[k], dir / std::to_string(k));
  }
  j["episodes"] = eps;
  std::ofstream(dir / "batch.json") << j.dump(2) << '\n';
}

Checkpoint make_checkpoint(const ModelConfig& mc, const TrainConfig& tc, const Dataset& data, const TrainOptions& opt,
                           const ParameterList& params, const AdamW& adam, const Ema& ema, std::int64_t step,
                           double val_loss) {
  Checkpoint c;
  c.model = mc;
  c.train = tc;
  c.data = to_json(data.config);
  c.info = opt.info;
  c.step = step;
  c.val_loss = val_loss;
  c.adam_steps = adam.steps();
  c.ema_updates = ema.updates();
  set_manifest(c, params);
  c.params = snapshot(params);
  c.ema = ema.shadow();
  c.adam_m = adam.first_moment();
  c.adam_v = adam.second_moment();
  return c;
}

}  // namespace

TrainResult train(const ModelConfig& mc, const Dataset& data, const TrainConfig& tc, const TrainOptions& opt) {
  mc.validate();
  tc.validate();
  if (data.train.empty() || data.val.empty()) throw Error("train: dataset needs train and validation episodes");
  if (opt.out_dir.empty()) throw Error("train: no output directory");
  fs::create_directories(opt.out_dir);

  TrainResult result;
  result.best_checkpoint = opt.out_dir / "best.ckpt";
  result.last_checkpoint = opt.out_dir / "last.ckpt";
  result.log_file = opt.out_dir / "train_log.jsonl";
  std::ofstream log(result.log_file, std::ios::trunc);
  if (!log) throw Error("cannot open " + result.log_file.string());

  auto model = make_model(mc, mix_seed(tc.seed, 0x1417));
  const ParameterList params = model->parameters();
  AdamW adam(params, {tc.beta1, tc.beta2, tc.adam_epsilon, tc.weight_decay});
  Ema ema(params, tc.ema_decay);
  Rng order_rng(mix_seed(tc.seed, 1));
  Rng dropout_rng(mix_seed(tc.seed, 2));
  Rng mask_rng(mix_seed(tc.seed, 3));
  std::uniform_real_distribution<double> retain(data.config.retain_fraction.lo, data.config.retain_fraction.hi);

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  double best = std::numeric_limits<double>::infinity();
  std::vector<Episode> drawn;
  std::vector<const Episode*> group;
  for (std::int64_t step = 1; step <= tc.max_steps; ++step) {
    if (opt.stop != nullptr && opt.stop->load()) {
      log.flush();
      throw Interrupted("training interrupted at step " + std::to_string(step));
    }
    drawn.clear();
    group.clear();
    for (int k = 0; k < tc.batch_size; ++k) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const Episode& ep = data.train[order[cursor++]];
      if (tc.remask_train)
        drawn.push_back(remask_episode(ep, data.station_cells, retain(mask_rng), MaskingMode::Train, mask_rng()));
      else
        drawn.push_back(ep);
    }
    for (const Episode& e : drawn) group.push_back(&e);

    const double lr = cosine_lr(tc.lr_init, step - 1, tc.max_steps);
    const Batch batch = make_batch(group, mc);
    for (const auto& p : params) const_cast<Tensor&>(p.tensor).zero_grad();
    ForwardOptions fo;
    fo.train = true;
    fo.rng = &dropout_rng;
    const Tensor loss = distribution_nll(model->forward(batch, fo), mc.output, batch.targets, batch.y, mc.gamma_zero_floor);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      log.flush();
      dump_batch(opt.out_dir / "nonfinite_batch", step, value, group);
      throw NumericalError("non-finite training loss at step " + std::to_string(step) + "; batch dumped to " +
                           (opt.out_dir / "nonfinite_batch").string());
    }
    loss.backward();
    LogRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.train_loss = value;
    rec.grad_norm = clip_grad_norm(params, tc.grad_clip_norm);
    if (!std::isfinite(rec.grad_norm)) {
      log.flush();
      dump_batch(opt.out_dir / "nonfinite_batch", step, value, group);
      throw NumericalError("non-finite gradient at step " + std::to_string(step));
    }
    adam.step(params, lr);
    ema.update(params);

    if (step % tc.val_every_steps == 0 || step == tc.max_steps) {
      const auto current = snapshot(params);
      restore(params, ema.shadow());
      rec.val_loss = mean_nll(*model, data.val, tc.eval_batch_size);
      restore(params, current);
      if (*rec.val_loss < best) {
        best = *rec.val_loss;
        result.best_step = step;
        save_checkpoint(make_checkpoint(mc, tc, data, opt, params, adam, ema, step, best), result.best_checkpoint);
      }
    }
    log << rec.to_json().dump() << '\n';
    if (rec.val_loss) log.flush();
    if (opt.on_record) opt.on_record(rec);
    result.log.push_back(rec);
  }
  const double last_val = result.log.back().val_loss.value_or(best);
  save_checkpoint(make_checkpoint(mc, tc, data, opt, params, adam, ema, tc.max_steps, last_val), result.last_checkpoint);
  if (!std::isfinite(best)) {
    // Every validation loss was NaN; keep the final state as the reference.
    fs::copy_file(result.last_checkpoint, result.best_checkpoint, fs::copy_options::overwrite_existing);
    result.best_step = tc.max_steps;
  }
  result.best_val_loss = best;
  return result;
}

}  // namespace nn
D2G_NN_END
