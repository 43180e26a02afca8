// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "upcycle/checkpoint.hpp"
#include "upcycle/dataset.hpp"
#include "upcycle/lora.hpp"
#include "upcycle/moe.hpp"

namespace upcycle {

// Training masters are double precision; checkpoints snapshot to f32. Frozen
// parameters are never written, so they stay bit-identical across training.
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> value;
  bool trainable = false;

  std::size_t size() const { return value.size(); }
};

using GradMap = std::map<std::string, std::vector<double>>;

enum class Schedule { warmup_cosine, warmup_plateau };

struct TrainConfig {
  int steps = 0;
  int batch_size = 32;
  double peak_lr = 1e-2;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::warmup_cosine;
  int warmup_steps = -1;     // -1: floor(warmup_frac * steps)
  double warmup_frac = 0.1;

  int resolved_warmup() const;
};

// Linear 0 -> peak over warmup steps, then peak * (1 + cos(pi*progress)) / 2.
double lr_warmup_cosine(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                        double peak);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t t = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// Decoupled weight decay: param -= lr * (mhat/(sqrt(vhat)+eps) + wd*param).
// Updates exactly the params that appear in grads.
void adamw_step(std::vector<Param>& params, const GradMap& grads, AdamState& state, double lr,
                double weight_decay, const AdamConfig& adam = {});

// Reduce-on-plateau controller: an improvement must be strictly greater than
// the best seen; `patience` stagnant rounds halve the multiplier; the
// max_reductions-th reduction also signals stop.
struct EarlyStopConfig {
  int warmup = 50;
  int eval_every = 5;
  int patience = 3;
  double factor = 0.5;
  int max_reductions = 4;
};

struct EarlyStopState {
  double best_val = 0.0;
  bool has_best = false;
  int stagnant = 0;
  int reductions = 0;
  double multiplier = 1.0;
  bool stopped = false;
};

// Returns the current lr multiplier after consuming one validation score.
double early_stop_update(EarlyStopState& state, const EarlyStopConfig& cfg, double val_acc);

struct BatchItem {
  const Example* ex;
  const std::string* task;
};

// Tanh MLP backbone with per-task linear heads; dense, LoRA-adapted, or
// MoE-fied. Backbone parameter names are "backbone.<i>.w"/".b" (i from 1),
// heads "head.<task>.w"/".b", adapters "lora.<layer>.A"/".B", MoE parameters
// "moe.<layer>.router" and "moe.<layer>.expert<t>.A"/".B".
class Model {
 public:
  enum class Mode { dense, lora, moe };

  static Model from_checkpoint(const Checkpoint& ckpt);
  static Model with_lora(const Checkpoint& base, const LoraModel& lm);
  static Model with_moe(const MoeModel& mm);

  Mode mode() const { return mode_; }
  std::size_t input_dim() const { return input_dim_; }
  std::vector<std::string> tasks() const;
  int n_classes(const std::string& task) const;

  void set_trainable(const std::function<bool(const std::string&)>& pred);
  void set_trainable_backbone();          // FFT: backbone.* only
  void set_trainable_adapters();          // lora.* / moe.* only
  void set_trainable_backbone_and_heads();  // pretraining
  void set_trainable_head(const std::string& task);
  void freeze_all();

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  const Param& param(const std::string& name) const;

  std::vector<double> logits(std::span<const float> x, const std::string& task) const;
  std::vector<double> probabilities(std::span<const float> x, const std::string& task) const;
  int predict(std::span<const float> x, const std::string& task) const;

  struct LossResult {
    double loss = 0.0;
    std::vector<double> per_example;
  };
  LossResult forward_loss(std::span<const BatchItem> batch) const;
  // Accumulates gradients for trainable params only (mean-loss scaling).
  LossResult forward_backward(std::span<const BatchItem> batch, GradMap& grads) const;

  Checkpoint snapshot() const;      // dense mode
  LoraModel lora_snapshot() const;  // lora mode
  MoeModel moe_snapshot() const;    // moe mode

  std::map<std::string, std::string>& meta() { return meta_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }

 private:
  struct HiddenLayer {
    std::string w, b;               // base params
    bool adapted = false;           // lora mode
    std::string la, lb;             // lora.<layer>.A / .B
    bool moe = false;
    std::string router;
    std::vector<std::pair<std::string, std::string>> experts;  // (A, B) per t
  };

  Model() = default;
  void build_backbone(const Checkpoint& ckpt);
  std::size_t idx(const std::string& name) const;

  struct Fwd;  // per-example forward cache
  void forward_cached(const Example& ex, const std::string& task, Fwd& cache) const;
  void backward_cached(const Fwd& cache, const std::string& task, std::vector<double> dlogits,
                       GradMap& grads) const;

  Mode mode_ = Mode::dense;
  std::size_t input_dim_ = 0;
  std::vector<HiddenLayer> hidden_;
  std::map<std::string, std::pair<std::string, std::string>> heads_;  // task -> (w, b)
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
  int lora_rank_ = 0;
  double lora_scale_ = 1.0;
  int top_k_ = 2;
  std::size_t n_experts_ = 0;
  std::map<std::string, std::string> meta_;
};

double accuracy(const Model& model, const Split& split, const std::string& task);
std::vector<int> predictions(const Model& model, const Split& split, const std::string& task);
std::map<std::uint64_t, double> per_example_losses(const Model& model, const Split& split,
                                                   const std::string& task);

struct TrainHooks {
  std::function<void(int step, double lr, double train_loss)> on_step;
  std::vector<int> snapshot_steps;  // ascending; 0 fires before the first update
  std::function<void(int step, Model&)> on_snapshot;
};

struct TaskSlice {
  const Split* split;
  std::string task;
};

struct TrainResult {
  int steps_run = 0;
  double final_loss = 0.0;
};

// Deterministic given (seed, config, data): fixed epoch shuffling, fixed
// init. steps == 0 returns the model unchanged. Non-finite loss raises
// TrainingError with the step index.
TrainResult train(Model& model, const Split& data, const std::string& task,
                  const TrainConfig& cfg, const TrainHooks& hooks = {});
TrainResult train_mixture(Model& model, std::span<const TaskSlice> sources, const TrainConfig& cfg,
                          const TrainHooks& hooks = {});

struct EarlyStopRun {
  int stop_step = 0;
  double best_val = 0.0;
  int reductions = 0;
  bool stopped_early = false;
  // (step, val_acc, multiplier) per evaluation round
  std::vector<std::tuple<int, double, double>> trace;
};

// Linear warmup to peak_lr over es.warmup steps, then constant peak times the
// controller multiplier; validation every es.eval_every steps after warmup.
// cfg.steps caps the run.
EarlyStopRun train_early_stop(Model& model, const TaskData& data, const TrainConfig& cfg,
                              const EarlyStopConfig& es, const TrainHooks& hooks = {});

}  // namespace upcycle
