// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "upcycle/checkpoint.hpp"
#include "upcycle/tensor.hpp"

namespace upcycle {

// Low-rank pair for one linear layer: a is r x n_in, b is n_out x r.
// The effective weight update is (scale / rank) * b * a.
struct LoraAdapter {
  Tensor a;
  Tensor b;
  int rank = 0;
  double scale = 1.0;
  std::string layer_name;

  std::size_t n_in() const { return a.cols(); }
  std::size_t n_out() const { return b.rows(); }
  void validate() const;
  bool zero_delta() const;  // true iff b (or a) is identically zero
};

struct LoraModel {
  std::map<std::string, LoraAdapter> adapters;  // layer_name -> adapter
  std::string base_ref;
  int rank = 0;
  double scale = 1.0;
};

// a entries ~ seeded Gaussian with std 1/sqrt(n_in); b all zeros, so every
// initial delta is exactly zero. layer_shapes maps name -> (n_out, n_in).
LoraModel lora_init(const std::map<std::string, std::pair<std::size_t, std::size_t>>& layer_shapes,
                    int rank, double scale, std::uint64_t seed, const std::string& base_ref = "");

Tensor materialize_delta(const LoraAdapter& ad);

// Adapted layers = base + delta; untouched layers copied verbatim.
Checkpoint apply(const Checkpoint& base, const LoraModel& lm);

// Materialized deltas on adapted layers, exact zeros elsewhere. Merging
// always operates on these products, never on A/B factors separately.
TaskVector lora_task_vector(const LoraModel& lm, const Checkpoint& base);

// y = w x + bias + sum_t weight_t * (scale_t/rank_t) b_t (a_t x), all in
// double, rounded once per output entry. Contributions are added in the
// order given.
Tensor routed_linear_forward(const Tensor& w, const Tensor& bias,
                             std::span<const LoraAdapter* const> experts,
                             std::span<const double> weights, const Tensor& x);

// Single adapter with weight one: y = w x + bias + (scale/rank) b (a x).
// moe_forward with a single expert reduces to this bit-exactly.
Tensor lora_forward(const Tensor& w, const Tensor& bias, const LoraAdapter& ad, const Tensor& x);

// UPCK-v1 with taskvector semantics; tensors "<layer>.A" / "<layer>.B",
// meta keys rank and scale.
void save(const LoraModel& lm, const std::filesystem::path& path);
LoraModel load_lora(const std::filesystem::path& path);

}  // namespace upcycle
