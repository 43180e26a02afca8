// SPDX-License-Identifier: Apache-2.0
#include "upcycle/moe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "upcycle/errors.hpp"
#include "upcycle/rng.hpp"

namespace upcycle {

void MoELayer::validate() const {
  if (w.rank() != 2 || bias.rank() != 1 || bias.size() != w.rows()) {
    throw DimensionError("moe layer: w must be rank 2 with matching bias");
  }
  if (experts.empty()) throw ArgumentError("moe layer: needs at least one expert");
  if (top_k < 1 || static_cast<std::size_t>(top_k) > experts.size()) {
    throw ArgumentError("moe layer: top_k must be in [1, |T|]");
  }
  for (const auto& e : experts) {
    e.validate();
    if (e.n_in() != d_in() || e.n_out() != d_out()) {
      throw DimensionError("moe layer: expert shape mismatch");
    }
  }
  if (router.rank() != 2 || router.rows() != experts.size() || router.cols() != d_in()) {
    throw DimensionError("moe layer: router must be |T| x d_in");
  }
}

RoutingDecision route(const MoELayer& layer, const Tensor& x) {
  layer.validate();
  require_finite(x, "route input");
  RoutingDecision d;
  d.probs = softmax(matvec(layer.router, x));

  const std::size_t k = std::min<std::size_t>(layer.top_k, layer.n_experts());
  std::vector<int> order(layer.n_experts());
  std::iota(order.begin(), order.end(), 0);
  // descending prob, ties to the lower index
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return d.probs[a] > d.probs[b]; });
  d.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(d.selected.begin(), d.selected.end());

  double denom = 0.0;
  for (int t : d.selected) denom += static_cast<double>(d.probs[t]);
  d.weights.reserve(k);
  for (int t : d.selected) d.weights.push_back(static_cast<double>(d.probs[t]) / denom);
  return d;
}

Tensor moe_forward(const MoELayer& layer, const Tensor& x) {
  RoutingDecision d = route(layer, x);
  std::vector<const LoraAdapter*> sel;
  sel.reserve(d.selected.size());
  for (int t : d.selected) sel.push_back(&layer.experts[static_cast<std::size_t>(t)]);
  return routed_linear_forward(layer.w, layer.bias, sel, d.weights, x);
}

Tensor arrow_row(const LoraAdapter& expert, int iters, std::uint64_t seed) {
  expert.validate();
  if (expert.zero_delta()) {
    throw DegenerateExpertError(
        "arrow_row: expert '" + expert.layer_name +
        "' has an identically zero delta; fall back to a seeded random unit row");
  }
  return top_right_singular_vector(materialize_delta(expert), iters, seed);
}

Tensor arrow_init(std::span<const LoraAdapter> experts, std::uint64_t seed) {
  if (experts.empty()) throw ArgumentError("arrow_init: empty expert sequence");
  const std::size_t d_in = experts[0].n_in();
  Tensor router = Tensor::zeros({experts.size(), d_in});
  for (std::size_t t = 0; t < experts.size(); ++t) {
    if (experts[t].n_in() != d_in) throw DimensionError("arrow_init: expert d_in mismatch");
    Tensor row = arrow_row(experts[t], 64, hash_combine(seed, t));
    std::copy(row.data.begin(), row.data.end(), router.data.begin() + static_cast<std::ptrdiff_t>(t * d_in));
  }
  return router;
}

Tensor random_unit_row(std::size_t d_in, std::uint64_t seed) {
  SplitMix64 rng(hash_combine(seed, 0xA44077ull));
  std::vector<double> v(d_in);
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& x : v) {
      x = rng.gaussian();
      n2 += x * x;
    }
  } while (n2 == 0.0);
  const double inv = 1.0 / std::sqrt(n2);
  Tensor out = Tensor::zeros({d_in});
  for (std::size_t i = 0; i < d_in; ++i) out.data[i] = static_cast<float>(v[i] * inv);
  return out;
}

MoeModel moefy(const Checkpoint& base, std::span<const LoraModel> expert_models, int top_k,
               std::uint64_t seed) {
  if (expert_models.empty()) throw ArgumentError("moefy: no expert models");
  if (top_k < 1 || static_cast<std::size_t>(top_k) > expert_models.size()) {
    throw ArgumentError("moefy: top_k must be in [1, |T|]");
  }
  for (const auto& [name, _] : base.params) {
    if (name.rfind("moe.", 0) == 0) {
      throw IncompatibilityError("moefy: base uses reserved name prefix 'moe.': " + name);
    }
  }
  // all expert models must cover the same layers
  const auto& ref = expert_models[0];
  for (const auto& lm : expert_models) {
    if (lm.adapters.size() != ref.adapters.size()) {
      throw IncompatibilityError("moefy: expert models cover different layer sets");
    }
    for (const auto& [name, _] : ref.adapters) {
      if (!lm.adapters.count(name)) {
        throw IncompatibilityError("moefy: expert model missing layer '" + name + "'");
      }
    }
  }

  MoeModel model;
  model.base = base;
  model.top_k = top_k;
  for (const auto& [layer_name, _] : ref.adapters) {
    auto wit = base.params.find(layer_name);
    if (wit == base.params.end()) {
      throw IncompatibilityError("moefy: layer '" + layer_name + "' not present in base");
    }
    MoELayer layer;
    layer.w = wit->second;
    layer.top_k = top_k;
    // bias convention: "<stem>.w" pairs with "<stem>.b"
    std::string bias_name = layer_name;
    if (bias_name.size() >= 2 && bias_name.compare(bias_name.size() - 2, 2, ".w") == 0) {
      bias_name.replace(bias_name.size() - 1, 1, "b");
    } else {
      bias_name.clear();
    }
    auto bit = bias_name.empty() ? base.params.end() : base.params.find(bias_name);
    layer.bias = bit != base.params.end() ? bit->second : Tensor::zeros({layer.w.rows()});

    layer.router = Tensor::zeros({expert_models.size(), layer.w.cols()});
    for (std::size_t t = 0; t < expert_models.size(); ++t) {
      const LoraAdapter& ad = expert_models[t].adapters.at(layer_name);
      if (ad.n_in() != layer.w.cols() || ad.n_out() != layer.w.rows()) {
        throw IncompatibilityError("moefy: adapter shape mismatch on layer '" + layer_name + "'");
      }
      layer.experts.push_back(ad);
      Tensor row;
      try {
        row = arrow_row(ad, 64, hash_combine(seed, hash_combine(fnv1a64(layer_name), t)));
      } catch (const DegenerateExpertError&) {
        row = random_unit_row(layer.w.cols(),
                              hash_combine(seed, hash_combine(fnv1a64(layer_name), t)));
      }
      std::copy(row.data.begin(), row.data.end(),
                layer.router.data.begin() + static_cast<std::ptrdiff_t>(t * layer.w.cols()));
    }
    layer.validate();
    model.layers.emplace(layer_name, std::move(layer));
  }
  return model;
}

void save(const MoeModel& m, const std::filesystem::path& path) {
  UpckFile file;
  file.kind = UpckKind::checkpoint;
  file.meta = m.base.meta;
  file.meta["moe.top_k"] = std::to_string(m.top_k);
  file.meta["moe.init"] = m.init_method;
  int rank = 0;
  double scale = 1.0;
  for (const auto& [name, t] : m.base.params) file.tensors.emplace(name, t);
  for (const auto& [layer_name, layer] : m.layers) {
    file.tensors.emplace("moe." + layer_name + ".router", layer.router);
    for (std::size_t t = 0; t < layer.experts.size(); ++t) {
      const LoraAdapter& ad = layer.experts[t];
      rank = ad.rank;
      scale = ad.scale;
      file.tensors.emplace("moe." + layer_name + ".expert" + std::to_string(t) + ".A", ad.a);
      file.tensors.emplace("moe." + layer_name + ".expert" + std::to_string(t) + ".B", ad.b);
    }
  }
  file.meta["moe.rank"] = std::to_string(rank);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", scale);
  file.meta["moe.scale"] = buf;
  save_upck(file, path);
}

MoeModel load_moe(const std::filesystem::path& path) {
  UpckFile file = load_upck(path);
  if (file.kind != UpckKind::checkpoint) {
    throw FormatError("kind", "moe file must use checkpoint kind");
  }
  auto meta_int = [&](const char* key) {
    auto it = file.meta.find(key);
    if (it == file.meta.end()) throw FormatError("meta", std::string("missing ") + key);
    return std::stoi(it->second);
  };
  MoeModel m;
  m.top_k = meta_int("moe.top_k");
  int rank = meta_int("moe.rank");
  double scale = std::stod(file.meta.at("moe.scale"));
  auto init_it = file.meta.find("moe.init");
  if (init_it != file.meta.end()) m.init_method = init_it->second;

  // split tensors into base params and moe.<layer>.<part>
  struct Parts {
    Tensor router;
    std::map<int, std::pair<Tensor, Tensor>> experts;  // t -> (A, B)
    bool has_router = false;
  };
  std::map<std::string, Parts> layer_parts;
  for (auto& [name, t] : file.tensors) {
    if (name.rfind("moe.", 0) != 0) {
      m.base.params.emplace(name, std::move(t));
      continue;
    }
    std::string rest = name.substr(4);
    if (rest.size() > 7 && rest.compare(rest.size() - 7, 7, ".router") == 0) {
      Parts& p = layer_parts[rest.substr(0, rest.size() - 7)];
      p.router = std::move(t);
      p.has_router = true;
      continue;
    }
    auto dot = rest.rfind('.');
    if (dot == std::string::npos || dot + 1 >= rest.size()) {
      throw FormatError("tensors", "malformed moe tensor name: " + name);
    }
    char part = rest[dot + 1];
    std::string head = rest.substr(0, dot);  // "<layer>.expert<t>"
    auto epos = head.rfind(".expert");
    if (epos == std::string::npos) throw FormatError("tensors", "malformed moe tensor name: " + name);
    std::string layer = head.substr(0, epos);
    int idx = std::stoi(head.substr(epos + 7));
    Parts& p = layer_parts[layer];
    if (part == 'A') {
      p.experts[idx].first = std::move(t);
    } else if (part == 'B') {
      p.experts[idx].second = std::move(t);
    } else {
      throw FormatError("tensors", "malformed moe tensor name: " + name);
    }
  }
  for (auto& [k, v] : file.meta) {
    if (k.rfind("moe.", 0) != 0) m.base.meta.emplace(k, v);
  }

  for (auto& [layer_name, parts] : layer_parts) {
    if (!parts.has_router) throw FormatError("tensors", "layer '" + layer_name + "' missing router");
    auto wit = m.base.params.find(layer_name);
    if (wit == m.base.params.end()) {
      throw FormatError("tensors", "moe layer '" + layer_name + "' has no base weight");
    }
    MoELayer layer;
    layer.w = wit->second;
    std::string bias_name = layer_name;
    if (bias_name.size() >= 2 && bias_name.compare(bias_name.size() - 2, 2, ".w") == 0) {
      bias_name.replace(bias_name.size() - 1, 1, "b");
    } else {
      bias_name.clear();
    }
    auto bit = bias_name.empty() ? m.base.params.end() : m.base.params.find(bias_name);
    layer.bias = bit != m.base.params.end() ? bit->second : Tensor::zeros({layer.w.rows()});
    layer.router = std::move(parts.router);
    layer.top_k = m.top_k;
    int expected = 0;
    for (auto& [idx, ab] : parts.experts) {
      if (idx != expected++) throw FormatError("tensors", "non-contiguous expert indices");
      LoraAdapter ad;
      ad.a = std::move(ab.first);
      ad.b = std::move(ab.second);
      if (ad.a.size() == 0 || ad.b.size() == 0) {
        throw FormatError("tensors", "layer '" + layer_name + "' expert missing A or B");
      }
      ad.rank = rank;
      ad.scale = scale;
      ad.layer_name = layer_name;
      layer.experts.push_back(std::move(ad));
    }
    layer.validate();
    m.layers.emplace(layer_name, std::move(layer));
  }
  return m;
}

}  // namespace upcycle
