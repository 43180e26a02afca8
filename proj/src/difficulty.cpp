// SPDX-License-Identifier: Apache-2.0
#include "upcycle/difficulty.hpp"

#include <algorithm>
#include <cmath>

#include "upcycle/errors.hpp"

namespace upcycle {

double el2n(std::span<const double> probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
    throw ArgumentError("el2n: label out of range");
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    const double d = probs[c] - (static_cast<std::size_t>(label) == c ? 1.0 : 0.0);
    acc += d * d;
  }
  return std::sqrt(acc);
}

DifficultyScores score_dataset(const ProbeTrainer& train_probe, const Split& dataset, int n_seeds,
                               int probe_step) {
  if (n_seeds < 1) throw ArgumentError("score_dataset: n_seeds must be >= 1");
  if (dataset.examples.empty()) throw ArgumentError("score_dataset: empty dataset");
  DifficultyScores out;
  out.probe_step = probe_step;
  out.n_seeds = n_seeds;
  std::map<std::uint64_t, double> sums;
  for (int s = 0; s < n_seeds; ++s) {
    Predictor predict = train_probe(s);
    for (const Example& ex : dataset.examples) {
      sums[ex.id] += el2n(predict(ex), ex.label);
    }
  }
  for (auto& [id, sum] : sums) out.scores[id] = sum / static_cast<double>(n_seeds);
  return out;
}

std::map<std::uint64_t, int> bin_examples(const DifficultyScores& scores, int n_bins) {
  if (n_bins < 1) throw ArgumentError("bin_examples: n_bins must be >= 1");
  if (scores.scores.empty()) throw ArgumentError("bin_examples: empty scores");
  std::vector<std::pair<double, std::uint64_t>> order;
  order.reserve(scores.scores.size());
  for (const auto& [id, s] : scores.scores) order.emplace_back(s, id);
  std::sort(order.begin(), order.end());  // (score, id) ascending

  const std::size_t n = order.size();
  const std::size_t base = n / static_cast<std::size_t>(n_bins);
  const std::size_t remainder = n % static_cast<std::size_t>(n_bins);
  std::map<std::uint64_t, int> bins;
  std::size_t pos = 0;
  for (int b = 1; b <= n_bins; ++b) {
    std::size_t size = base + (static_cast<std::size_t>(b) <= remainder ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i) bins[order[pos++].second] = b;
  }
  return bins;
}

LossShares loss_share_by_bin(const std::map<std::uint64_t, double>& per_example_loss,
                             const std::map<std::uint64_t, int>& bins, int n_bins) {
  if (n_bins < 1) throw ArgumentError("loss_share_by_bin: n_bins must be >= 1");
  LossShares out;
  out.shares.assign(static_cast<std::size_t>(n_bins), 0.0);
  double total = 0.0;
  for (const auto& [id, loss] : per_example_loss) {
    auto bit = bins.find(id);
    if (bit == bins.end()) {
      throw ArgumentError("loss_share_by_bin: example " + std::to_string(id) + " has no bin");
    }
    out.shares[static_cast<std::size_t>(bit->second - 1)] += loss;
    total += loss;
  }
  if (total == 0.0) {
    out.zero_loss_uniform = true;
    std::fill(out.shares.begin(), out.shares.end(), 1.0 / static_cast<double>(n_bins));
    return out;
  }
  for (double& s : out.shares) s /= total;
  return out;
}

ForgottenResult forgotten_examples(std::span<const TaskEval> tasks) {
  ForgottenResult out;
  for (const TaskEval& te : tasks) {
    if (te.ids.size() != te.labels.size() || te.ids.size() != te.expert_pred.size() ||
        te.ids.size() != te.merged_pred.size()) {
      throw ArgumentError("forgotten_examples: per-task vectors must align");
    }
    for (std::size_t i = 0; i < te.ids.size(); ++i) {
      const bool expert_correct = te.expert_pred[i] == te.labels[i];
      const bool merged_correct = te.merged_pred[i] == te.labels[i];
      if (expert_correct && !merged_correct) {
        out.forgotten.emplace_back(te.task, te.ids[i]);
        if (te.bins) {
          auto bit = te.bins->find(te.ids[i]);
          if (bit == te.bins->end()) {
            throw ArgumentError("forgotten_examples: example has no bin");
          }
          out.by_bin[bit->second] += 1;
        }
      }
    }
  }
  return out;
}

Split prune_hardest(const Split& dataset, const DifficultyScores& scores, double pct) {
  if (!(pct >= 0.0 && pct < 100.0)) {
    throw ArgumentError("prune_hardest: pct must be in [0, 100)");
  }
  const std::size_t n = dataset.examples.size();
  const auto k = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
  if (k == 0) return dataset;

  // (score desc, id desc) so the higher id is removed first on ties
  std::vector<std::pair<double, std::uint64_t>> order;
  order.reserve(n);
  for (const Example& ex : dataset.examples) {
    auto sit = scores.scores.find(ex.id);
    if (sit == scores.scores.end()) {
      throw ArgumentError("prune_hardest: example " + std::to_string(ex.id) + " has no score");
    }
    order.emplace_back(sit->second, ex.id);
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  });
  std::set<std::uint64_t> removed;
  for (std::size_t i = 0; i < k; ++i) removed.insert(order[i].second);

  Split out;
  out.examples.reserve(n - k);
  for (const Example& ex : dataset.examples) {
    if (!removed.count(ex.id)) out.examples.push_back(ex);
  }
  return out;
}

}  // namespace upcycle
