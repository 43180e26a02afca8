// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "upcycle/dataset.hpp"
#include "upcycle/difficulty.hpp"
#include "upcycle/merging.hpp"
#include "upcycle/trainer.hpp"

namespace upcycle {

struct MoeSweepConfig {
  int top_k = 2;
  int post_train_steps = 400;
  double peak_lr = 2e-3;
  int batch_size = 32;
};

struct PhaseConfig {
  int steps = 0;
  int batch_size = 32;
  double peak_lr = 1e-2;
  double weight_decay = 0.0;
};

struct DifficultyConfig {
  int probe_step = 32;
  int n_seeds = 5;
  int n_bins = 10;
  double probe_peak_lr = 5e-3;
  std::vector<int> prune_max_percentiles{100, 99, 98, 95, 90};
  int prune_duration = 256;
};

struct ExperimentConfig {
  std::vector<TaskSpec> tasks;
  std::string mode = "fft";  // fft | lora
  std::vector<std::pair<int, double>> lora_pairs{{8, 32.0}};
  std::vector<int> durations{2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048};
  std::vector<std::string> merge_methods{"average", "task_arithmetic", "ties", "dare"};
  MoeSweepConfig moe;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int backbone_width = 64;
  PhaseConfig pretrain{1500, 64, 5e-3, 0.0};
  PhaseConfig head_fit{300, 64, 5e-3, 0.0};
  PhaseConfig finetune{0, 32, 1e-2, 0.0};       // steps come from the duration grid
  PhaseConfig finetune_lora{0, 32, 2e-2, 0.0};  // lora runs use their own peak
  EarlyStopConfig early_stop;
  int early_stop_max_steps = 0;  // 0: use the longest duration
  std::uint64_t base_seed = 7;
  DifficultyConfig difficulty;
  std::string output_dir = "out";

  void validate() const;
};

ExperimentConfig default_config();
ExperimentConfig config_from_json_file(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

// Work directory with a manifest of completed cells. Re-running a pipeline
// skips completed cells and reproduces byte-identical reports.
class Workdir {
 public:
  Workdir(std::filesystem::path root, const ExperimentConfig& cfg);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path file(const std::string& rel) const;
  bool done(const std::string& cell) const;
  void mark_done(const std::string& cell);

  // cell result payloads (small JSON fragments used to assemble reports)
  void write_cell(const std::string& cell, const std::string& json_payload);
  std::string read_cell(const std::string& cell) const;

 private:
  void save_manifest() const;
  std::filesystem::path root_;
  std::string config_hash_;
  std::map<std::string, bool> cells_;
  mutable std::mutex mu_;
};

// row of the duration-sweep report (one per seed x duration x method)
struct MergeRow {
  std::uint64_t seed = 0;
  int duration = 0;
  int rank = 0;  // 0 for fft
  std::string method;
  double alpha = 0.0;
  double keep_pct = 0.0;
  double drop_prob = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;         // mean raw test accuracy over tasks
  double expert_own_acc = 0.0;   // mean expert own-task test accuracy
};

struct DurationSweepResult {
  std::vector<MergeRow> rows;
  // (seed, duration, task) -> expert own-task test accuracy
  std::map<std::string, double> expert_accs;
};

struct MoeRow {
  std::uint64_t seed = 0;
  int duration = 0;
  double initial_acc = 0.0;
  double final_acc = 0.0;
};

struct EarlyStopRow {
  std::string setting;  // overtrained | best_fixed | early_stop
  std::string method;
  int steps = 0;  // representative duration (overtrained/best); 0 for early stop
  double test_acc = 0.0;
};

struct DifficultyResult {
  // task -> per-example scores
  std::map<std::string, DifficultyScores> scores;
  std::map<std::string, std::map<std::uint64_t, int>> bins;
  // per (task, step): loss shares
  std::vector<std::tuple<std::string, int, std::vector<double>>> loss_shares;
  // per (seed, method): forgotten counts by bin
  std::map<std::string, std::map<int, int>> forgotten_by_bin;
  std::map<std::string, int> forgotten_total;
  // per (seed, max_percentile): TA merge accuracy on pruned training
  std::vector<std::tuple<std::uint64_t, int, double>> prune_rows;
};

// pipeline entry points; `jobs` bounds worker threads
std::vector<TaskData> ensure_datasets(const ExperimentConfig& cfg, Workdir& wd);
Checkpoint ensure_pretrained(const ExperimentConfig& cfg, Workdir& wd,
                             const std::vector<TaskData>& tasks);
void run_finetune(const ExperimentConfig& cfg, Workdir& wd, const std::vector<TaskData>& tasks,
                  const Checkpoint& base, int jobs);
DurationSweepResult run_duration_sweep(const ExperimentConfig& cfg, Workdir& wd, int jobs);
DurationSweepResult run_rank_sweep(const ExperimentConfig& cfg, Workdir& wd, int jobs);
std::vector<MoeRow> run_moe_sweep(const ExperimentConfig& cfg, Workdir& wd, int jobs);
DifficultyResult run_difficulty_analysis(const ExperimentConfig& cfg, Workdir& wd, int jobs);

struct EarlyStopOutcome {
  std::vector<EarlyStopRow> rows;
  // (task, seed) -> stopping step
  std::map<std::string, int> stop_steps;
  std::vector<MoeRow> moe_rows;  // lora mode only: overtrained/best/early-stop MoE
};
EarlyStopOutcome run_early_stop(const ExperimentConfig& cfg, Workdir& wd, int jobs);

// Assembles all reports found in the workdir into CSV files under
// <root>/reports; byte-deterministic given the same completed cells.
void write_reports(const ExperimentConfig& cfg, Workdir& wd);

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace upcycle
