// SPDX-License-Identifier: Apache-2.0
#include "upcycle/merging.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "upcycle/errors.hpp"
#include "upcycle/rng.hpp"

namespace upcycle {

namespace {

void check_compatible(const std::map<std::string, Tensor>& a, const std::map<std::string, Tensor>& b,
                      const char* what) {
  std::string offending;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ia == a.end() || (ib != b.end() && ib->first < ia->first)) {
      offending += (offending.empty() ? "" : ", ") + ib->first + " (missing on left)";
      ++ib;
    } else if (ib == b.end() || ia->first < ib->first) {
      offending += (offending.empty() ? "" : ", ") + ia->first + " (missing on right)";
      ++ia;
    } else {
      if (!ia->second.same_shape(ib->second)) {
        offending += (offending.empty() ? "" : ", ") + ia->first + " (shape mismatch)";
      }
      ++ia;
      ++ib;
    }
  }
  if (!offending.empty()) {
    throw IncompatibilityError(std::string(what) + ": incompatible parameters: " + offending);
  }
}

const std::map<std::string, Tensor>& tensors_of(const Checkpoint& c) { return c.params; }
const std::map<std::string, Tensor>& tensors_of(const TaskVector& t) { return t.deltas; }

template <typename Seq>
void check_all_compatible(const std::map<std::string, Tensor>& ref, const Seq& seq,
                          const char* what) {
  for (const auto& item : seq) check_compatible(ref, tensors_of(item), what);
}

}  // namespace

std::string to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::average: return "average";
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::ties: return "ties";
    case MergeMethod::dare: return "dare";
  }
  return "?";
}

MergeMethod merge_method_from_string(const std::string& s) {
  if (s == "average") return MergeMethod::average;
  if (s == "task_arithmetic" || s == "ta") return MergeMethod::task_arithmetic;
  if (s == "ties") return MergeMethod::ties;
  if (s == "dare") return MergeMethod::dare;
  throw ArgumentError("unknown merge method: " + s);
}

std::string MergeConfig::describe() const {
  char buf[160];
  switch (method) {
    case MergeMethod::average:
      std::snprintf(buf, sizeof(buf), "average");
      break;
    case MergeMethod::task_arithmetic:
      std::snprintf(buf, sizeof(buf), "task_arithmetic(alpha=%g)", alpha);
      break;
    case MergeMethod::ties:
      std::snprintf(buf, sizeof(buf), "ties(alpha=%g, keep_pct=%g)", alpha, keep_pct);
      break;
    case MergeMethod::dare:
      std::snprintf(buf, sizeof(buf), "dare(alpha=%g, drop_prob=%g, seed=%llu)", alpha, drop_prob,
                    static_cast<unsigned long long>(seed));
      break;
  }
  return buf;
}

TaskVector compute_task_vector(const Checkpoint& expert, const Checkpoint& base) {
  check_compatible(base.params, expert.params, "compute_task_vector");
  TaskVector tv;
  auto it = expert.meta.find("task_id");
  if (it != expert.meta.end()) tv.source_task = it->second;
  for (const auto& [name, bt] : base.params) {
    tv.deltas.emplace(name, sub(expert.params.at(name), bt));
  }
  return tv;
}

Checkpoint merge_average(std::span<const Checkpoint> experts) {
  if (experts.empty()) throw ArgumentError("merge_average: empty expert sequence");
  const Checkpoint& ref = experts[0];
  check_all_compatible(ref.params, experts, "merge_average");

  Checkpoint out;
  out.meta = ref.meta;
  out.meta["merge.method"] = "average";
  std::string ids;
  for (const auto& e : experts) {
    auto it = e.meta.find("task_id");
    ids += (ids.empty() ? "" : ",") + (it == e.meta.end() ? std::string("?") : it->second);
  }
  out.meta["merge.experts"] = ids;

  const double inv = 1.0 / static_cast<double>(experts.size());
  for (const auto& [name, t0] : ref.params) {
    Tensor acc = Tensor::zeros(t0.shape);
    for (std::size_t i = 0; i < t0.size(); ++i) {
      double s = 0.0;
      for (const auto& e : experts) s += static_cast<double>(e.params.at(name).data[i]);
      acc.data[i] = static_cast<float>(s * inv);
    }
    out.params.emplace(name, std::move(acc));
  }
  return out;
}

namespace {

Checkpoint apply_scaled_sum(const Checkpoint& base, std::span<const TaskVector> tvs, double alpha,
                            const char* method_name) {
  check_all_compatible(base.params, tvs, method_name);
  Checkpoint out;
  out.meta = base.meta;
  out.meta["merge.method"] = method_name;
  std::string ids;
  for (const auto& tv : tvs) ids += (ids.empty() ? "" : ",") + tv.source_task;
  out.meta["merge.experts"] = ids;
  for (const auto& [name, bt] : base.params) {
    Tensor acc = Tensor::zeros(bt.shape);
    for (std::size_t i = 0; i < bt.size(); ++i) {
      double s = 0.0;
      for (const auto& tv : tvs) s += static_cast<double>(tv.deltas.at(name).data[i]);
      acc.data[i] = static_cast<float>(static_cast<double>(bt.data[i]) + alpha * s);
    }
    out.params.emplace(name, std::move(acc));
  }
  return out;
}

}  // namespace

Checkpoint merge_task_arithmetic(const Checkpoint& base, std::span<const TaskVector> tvs,
                                 double alpha) {
  return apply_scaled_sum(base, tvs, alpha, "task_arithmetic");
}

TaskVector ties_trim(const TaskVector& tv, double keep_pct) {
  if (!(keep_pct > 0.0 && keep_pct <= 100.0)) {
    throw ArgumentError("ties_trim: keep_pct must be in (0, 100]");
  }
  std::size_t total = 0;
  for (const auto& [_, t] : tv.deltas) total += t.size();
  if (total == 0) return tv;
  auto keep = static_cast<std::size_t>(std::ceil(keep_pct / 100.0 * static_cast<double>(total)));
  if (keep >= total) return tv;

  // (magnitude, tensor ordinal, flat index); ties keep earlier entries
  struct Entry {
    float mag;
    std::uint32_t tensor;
    std::uint64_t index;
  };
  std::vector<Entry> entries;
  entries.reserve(total);
  std::uint32_t ord = 0;
  for (const auto& [_, t] : tv.deltas) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      entries.push_back({std::abs(t.data[i]), ord, i});
    }
    ++ord;
  }
  auto better = [](const Entry& a, const Entry& b) {
    if (a.mag != b.mag) return a.mag > b.mag;
    if (a.tensor != b.tensor) return a.tensor < b.tensor;
    return a.index < b.index;
  };
  std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep - 1),
                   entries.end(), better);

  TaskVector out;
  out.source_task = tv.source_task;
  for (const auto& [name, t] : tv.deltas) out.deltas.emplace(name, Tensor::zeros(t.shape));
  std::vector<std::map<std::string, Tensor>::iterator> slots;
  for (auto it = out.deltas.begin(); it != out.deltas.end(); ++it) slots.push_back(it);
  auto src = tv.deltas.begin();
  std::vector<const Tensor*> srcs;
  for (; src != tv.deltas.end(); ++src) srcs.push_back(&src->second);
  for (std::size_t k = 0; k < keep; ++k) {
    const Entry& e = entries[k];
    slots[e.tensor]->second.data[e.index] = srcs[e.tensor]->data[e.index];
  }
  return out;
}

TaskVector ties_elect_and_merge(std::span<const TaskVector> trimmed) {
  if (trimmed.empty()) throw ArgumentError("ties_elect_and_merge: empty sequence");
  const TaskVector& ref = trimmed[0];
  check_all_compatible(ref.deltas, trimmed, "ties_elect_and_merge");

  TaskVector out;
  out.source_task = "ties";
  for (const auto& [name, t0] : ref.deltas) {
    Tensor merged = Tensor::zeros(t0.shape);
    for (std::size_t i = 0; i < t0.size(); ++i) {
      double sum = 0.0;
      for (const auto& tv : trimmed) sum += static_cast<double>(tv.deltas.at(name).data[i]);
      if (sum == 0.0) continue;  // exact cancellation elects zero
      const double sign = sum > 0.0 ? 1.0 : -1.0;
      double acc = 0.0;
      std::size_t count = 0;
      for (const auto& tv : trimmed) {
        float v = tv.deltas.at(name).data[i];
        if (v != 0.0f && (static_cast<double>(v) > 0.0) == (sign > 0.0)) {
          acc += static_cast<double>(v);
          ++count;
        }
      }
      merged.data[i] = count == 0 ? 0.0f : static_cast<float>(acc / static_cast<double>(count));
    }
    out.deltas.emplace(name, std::move(merged));
  }
  return out;
}

Checkpoint merge_ties(const Checkpoint& base, std::span<const TaskVector> tvs, double alpha,
                      double keep_pct) {
  check_all_compatible(base.params, tvs, "merge_ties");
  std::vector<TaskVector> trimmed;
  trimmed.reserve(tvs.size());
  for (const auto& tv : tvs) trimmed.push_back(ties_trim(tv, keep_pct));
  TaskVector elected = ties_elect_and_merge(trimmed);
  std::span<const TaskVector> one(&elected, 1);
  Checkpoint out = apply_scaled_sum(base, one, alpha, "ties");
  std::string ids;
  for (const auto& tv : tvs) ids += (ids.empty() ? "" : ",") + tv.source_task;
  out.meta["merge.experts"] = ids;
  return out;
}

TaskVector dare_drop_rescale(const TaskVector& tv, double drop_prob, std::uint64_t seed) {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) {
    throw ArgumentError("dare_drop_rescale: drop_prob must be in [0, 1)");
  }
  const double rescale = 1.0 / (1.0 - drop_prob);
  TaskVector out;
  out.source_task = tv.source_task;
  for (const auto& [name, t] : tv.deltas) {
    Tensor masked = Tensor::zeros(t.shape);
    const std::uint64_t stream = fnv1a64(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (counter_uniform(seed, stream, i) < drop_prob) continue;
      masked.data[i] = static_cast<float>(static_cast<double>(t.data[i]) * rescale);
    }
    out.deltas.emplace(name, std::move(masked));
  }
  return out;
}

Checkpoint merge_dare(const Checkpoint& base, std::span<const TaskVector> tvs, double alpha,
                      double drop_prob, std::uint64_t seed) {
  check_all_compatible(base.params, tvs, "merge_dare");
  std::vector<TaskVector> masked;
  masked.reserve(tvs.size());
  for (std::size_t t = 0; t < tvs.size(); ++t) {
    masked.push_back(dare_drop_rescale(tvs[t], drop_prob, seed + t));
  }
  Checkpoint out = merge_task_arithmetic(base, masked, alpha);
  out.meta["merge.method"] = "dare";
  return out;
}

Checkpoint merge(const Checkpoint& base, std::span<const TaskVector> tvs, const MergeConfig& cfg) {
  switch (cfg.method) {
    case MergeMethod::average: {
      // base + mean(tvs): the task-vector form of Eq. 1
      if (tvs.empty()) throw ArgumentError("merge: empty task-vector sequence");
      return apply_scaled_sum(base, tvs, 1.0 / static_cast<double>(tvs.size()), "average");
    }
    case MergeMethod::task_arithmetic:
      return merge_task_arithmetic(base, tvs, cfg.alpha);
    case MergeMethod::ties:
      return merge_ties(base, tvs, cfg.alpha, cfg.keep_pct);
    case MergeMethod::dare:
      return merge_dare(base, tvs, cfg.alpha, cfg.drop_prob, cfg.seed);
  }
  throw ArgumentError("merge: unknown method");
}

std::vector<MergeConfig> default_grid(MergeMethod method) {
  std::vector<MergeConfig> grid;
  switch (method) {
    case MergeMethod::average:
      grid.push_back({MergeMethod::average});
      break;
    case MergeMethod::task_arithmetic:
      for (int i = 1; i <= 20; ++i) {
        grid.push_back({MergeMethod::task_arithmetic, 0.05 * i});
      }
      break;
    case MergeMethod::ties:
      for (int i = 0; i <= 10; ++i) {
        for (double k : {10.0, 20.0, 30.0}) {
          grid.push_back({MergeMethod::ties, 0.5 + 0.1 * i, k});
        }
      }
      break;
    case MergeMethod::dare:
      for (int i = 1; i <= 11; ++i) {
        for (double k : {10.0, 20.0, 30.0}) {
          MergeConfig c{MergeMethod::dare, 0.05 * i};
          c.drop_prob = 1.0 - k / 100.0;
          grid.push_back(c);
        }
      }
      break;
  }
  return grid;
}

std::pair<MergeConfig, double> tune(MergeMethod method, const Checkpoint& base,
                                    std::span<const TaskVector> tvs,
                                    std::span<const MergeConfig> grid,
                                    const std::function<double(const Checkpoint&)>& evaluate) {
  if (grid.empty()) throw ArgumentError("tune: empty grid");
  MergeConfig best;
  double best_score = 0.0;
  bool have_best = false;
  for (const auto& cfg : grid) {
    if (cfg.method != method) {
      throw ArgumentError("tune: grid entry method differs from tuned method");
    }
    double score;
    try {
      score = evaluate(merge(base, tvs, cfg));
    } catch (const std::exception& e) {
      throw Error("tune: evaluation failed for config " + cfg.describe() + ": " + e.what());
    }
    if (!have_best || score > best_score) {
      best = cfg;
      best_score = score;
      have_best = true;
    }
  }
  return {best, best_score};
}

}  // namespace upcycle
