// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "upcycle/checkpoint.hpp"

namespace upcycle {

enum class MergeMethod { average, task_arithmetic, ties, dare };

std::string to_string(MergeMethod m);
MergeMethod merge_method_from_string(const std::string& s);

struct MergeConfig {
  MergeMethod method = MergeMethod::average;
  double alpha = 1.0;       // ignored for average
  double keep_pct = 100.0;  // ties only: retained fraction k, in (0, 100]
  double drop_prob = 0.0;   // dare only: p, in [0, 1)
  std::uint64_t seed = 0;   // dare only: mask seed

  std::string describe() const;
};

// deltas[n] = expert[n] - base[n] exactly (f32 subtraction).
TaskVector compute_task_vector(const Checkpoint& expert, const Checkpoint& base);

// Per-parameter arithmetic mean, double accumulation in expert order.
Checkpoint merge_average(std::span<const Checkpoint> experts);

// base + alpha * sum(tvs), double accumulation, rounded once per entry.
Checkpoint merge_task_arithmetic(const Checkpoint& base, std::span<const TaskVector> tvs,
                                 double alpha);

// Keeps the ceil(keep_pct% * total entries) largest-magnitude entries across
// all tensors of the task vector (one global threshold), zeroes the rest.
// Ties at the threshold keep earlier (name, flat index) entries.
TaskVector ties_trim(const TaskVector& tv, double keep_pct);

// Per coordinate: elected sign = sign of the value sum; output = mean of the
// nonzero values matching that sign; exact cancellation elects zero.
TaskVector ties_elect_and_merge(std::span<const TaskVector> trimmed);

Checkpoint merge_ties(const Checkpoint& base, std::span<const TaskVector> tvs, double alpha,
                      double keep_pct);

// Entry i of tensor `name` is zeroed when counter_uniform(seed, fnv1a(name), i)
// < drop_prob; survivors are rescaled by 1/(1-drop_prob).
TaskVector dare_drop_rescale(const TaskVector& tv, double drop_prob, std::uint64_t seed);

// Task vector t is masked with seed + t, then combined as task arithmetic.
Checkpoint merge_dare(const Checkpoint& base, std::span<const TaskVector> tvs, double alpha,
                      double drop_prob, std::uint64_t seed);

// Dispatch on cfg.method. Average is reconstructed as base + mean(tvs), which
// coincides with merge_average of the original experts up to accumulation
// order; the harness merges experts directly for the average method.
Checkpoint merge(const Checkpoint& base, std::span<const TaskVector> tvs, const MergeConfig& cfg);

// Appendix grids: TA alpha 0.05..1.0 step 0.05; TIES alpha 0.5..1.5 step 0.1
// with k in {10,20,30}; DARE alpha 0.05..0.55 step 0.05 with retained k in
// {10,20,30} mapped to drop_prob = 1 - k/100. Alpha-major order.
std::vector<MergeConfig> default_grid(MergeMethod method);

// Evaluates each grid config's merge with the callback and returns the config
// with maximal score; ties go to the earliest grid position.
std::pair<MergeConfig, double> tune(MergeMethod method, const Checkpoint& base,
                                    std::span<const TaskVector> tvs,
                                    std::span<const MergeConfig> grid,
                                    const std::function<double(const Checkpoint&)>& evaluate);

}  // namespace upcycle
