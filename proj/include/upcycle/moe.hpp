// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "upcycle/checkpoint.hpp"
#include "upcycle/lora.hpp"
#include "upcycle/tensor.hpp"

namespace upcycle {

// A linear layer replaced by a mixture over LoRA experts. w and bias stay
// frozen; the router matrix has one row per expert.
struct MoELayer {
  Tensor w;                         // d_out x d_in
  Tensor bias;                      // d_out
  std::vector<LoraAdapter> experts; // length |T|
  Tensor router;                    // |T| x d_in
  int top_k = 2;

  std::size_t d_in() const { return w.cols(); }
  std::size_t d_out() const { return w.rows(); }
  std::size_t n_experts() const { return experts.size(); }
  void validate() const;
};

struct RoutingDecision {
  Tensor probs;                  // full softmax over all experts
  std::vector<int> selected;     // ascending expert indices, size min(top_k, |T|)
  std::vector<double> weights;   // renormalized, parallel to selected, sums to 1
};

// probs = softmax(router x); selected = top_k largest probs (ties to the
// lower index); weights renormalized over the selection.
RoutingDecision route(const MoELayer& layer, const Tensor& x);

// y = w x + bias + sum_{t in selected} weight_t (scale/rank) b_t a_t x
Tensor moe_forward(const MoELayer& layer, const Tensor& x);

// Top right-singular vector of the expert's materialized delta; unit norm,
// largest-magnitude entry positive. Throws DegenerateExpertError when the
// delta is identically zero (callers fall back to a seeded random unit row).
Tensor arrow_row(const LoraAdapter& expert, int iters = 64, std::uint64_t seed = 0);

// Router matrix with row t = arrow_row(experts[t]).
Tensor arrow_init(std::span<const LoraAdapter> experts, std::uint64_t seed = 0);

// Seeded random unit row used when an expert delta is zero.
Tensor random_unit_row(std::size_t d_in, std::uint64_t seed);

// Full MoE-fied model: frozen base checkpoint plus one MoELayer per adapted
// layer. Layer keys are the 2-d parameter names of the base.
struct MoeModel {
  Checkpoint base;
  std::map<std::string, MoELayer> layers;
  int top_k = 2;
  std::string init_method = "arrow";
};

// Every layer adapted by the expert models becomes a MoELayer with an
// Arrow-initialized router (seeded random unit rows for zero-delta experts).
// All expert models must cover the same layers. The bias paired with weight
// "<stem>.w" is "<stem>.b" when present, otherwise zeros.
MoeModel moefy(const Checkpoint& base, std::span<const LoraModel> expert_models, int top_k,
               std::uint64_t seed = 0);

// UPCK-v1 checkpoint with reserved prefixes "moe.<layer>.router" and
// "moe.<layer>.expert<t>.A/B"; meta records top_k and init method.
void save(const MoeModel& m, const std::filesystem::path& path);
MoeModel load_moe(const std::filesystem::path& path);

}  // namespace upcycle
