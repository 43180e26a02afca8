// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "upcycle/dataset.hpp"

namespace upcycle {

// Euclidean norm of (predicted class probabilities - one-hot label).
// Bounded by sqrt(2) for distributions summing to one.
double el2n(std::span<const double> probs, int label);

struct DifficultyScores {
  std::map<std::uint64_t, double> scores;
  int probe_step = 32;
  int n_seeds = 10;
};

// A probe trainer maps a seed index to a predictor (class probabilities for
// an example) taken at probe_step; scores average el2n over the seeds.
using Predictor = std::function<std::vector<double>(const Example&)>;
using ProbeTrainer = std::function<Predictor(int seed_index)>;

DifficultyScores score_dataset(const ProbeTrainer& train_probe, const Split& dataset, int n_seeds,
                               int probe_step);

// Ascending-score quantile bins, 1-based. Remainder examples go to the
// lowest bins; score ties break by example id.
std::map<std::uint64_t, int> bin_examples(const DifficultyScores& scores, int n_bins = 10);

struct LossShares {
  std::vector<double> shares;  // indexed by bin-1, sums to 1
  bool zero_loss_uniform = false;
};

// fraction_b = sum of losses in bin b / total loss. Zero total loss yields
// uniform shares with the flag set.
LossShares loss_share_by_bin(const std::map<std::uint64_t, double>& per_example_loss,
                             const std::map<std::uint64_t, int>& bins, int n_bins);

// One task's per-example evaluation: an example is forgotten iff the expert
// predicted its label and the merged model did not.
struct TaskEval {
  std::string task;
  std::vector<std::uint64_t> ids;
  std::vector<int> labels;
  std::vector<int> expert_pred;
  std::vector<int> merged_pred;
  const std::map<std::uint64_t, int>* bins = nullptr;
};

struct ForgottenResult {
  std::vector<std::pair<std::string, std::uint64_t>> forgotten;  // (task, example id)
  std::map<int, int> by_bin;
};

ForgottenResult forgotten_examples(std::span<const TaskEval> tasks);

// Removes the ceil(pct% * n) highest-score examples; ties remove the higher
// example id first.
Split prune_hardest(const Split& dataset, const DifficultyScores& scores, double pct);

}  // namespace upcycle
