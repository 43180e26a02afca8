// SPDX-License-Identifier: Apache-2.0
#include "upcycle/lora.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "upcycle/errors.hpp"
#include "upcycle/rng.hpp"

namespace upcycle {

void LoraAdapter::validate() const {
  if (rank <= 0) throw ArgumentError("lora: rank must be positive");
  if (a.rank() != 2 || b.rank() != 2) throw ArgumentError("lora: a and b must be rank 2");
  if (a.rows() != static_cast<std::size_t>(rank) || b.cols() != static_cast<std::size_t>(rank)) {
    throw ArgumentError("lora: a must have r rows and b r columns");
  }
  if (static_cast<std::size_t>(rank) > std::min(n_in(), n_out())) {
    throw ArgumentError("lora: rank exceeds min(n_in, n_out) for layer " + layer_name);
  }
  if (scale <= 0.0) throw ArgumentError("lora: scale must be positive");
}

bool LoraAdapter::zero_delta() const {
  auto all_zero = [](const Tensor& t) {
    return std::all_of(t.data.begin(), t.data.end(), [](float v) { return v == 0.0f; });
  };
  return all_zero(b) || all_zero(a);
}

LoraModel lora_init(const std::map<std::string, std::pair<std::size_t, std::size_t>>& layer_shapes,
                    int rank, double scale, std::uint64_t seed, const std::string& base_ref) {
  if (rank <= 0) throw ArgumentError("lora_init: rank must be positive");
  if (scale <= 0.0) throw ArgumentError("lora_init: scale must be positive");
  LoraModel lm;
  lm.base_ref = base_ref;
  lm.rank = rank;
  lm.scale = scale;
  for (const auto& [name, dims] : layer_shapes) {
    const auto [n_out, n_in] = dims;
    if (static_cast<std::size_t>(rank) > std::min(n_in, n_out)) {
      throw ArgumentError("lora_init: rank " + std::to_string(rank) + " too large for layer " +
                          name);
    }
    LoraAdapter ad;
    ad.rank = rank;
    ad.scale = scale;
    ad.layer_name = name;
    ad.a = Tensor::zeros({static_cast<std::size_t>(rank), n_in});
    ad.b = Tensor::zeros({n_out, static_cast<std::size_t>(rank)});
    // substream keyed by layer name so the map's iteration order is irrelevant
    SplitMix64 rng(hash_combine(seed, fnv1a64(name)));
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(n_in));
    for (float& v : ad.a.data) v = static_cast<float>(rng.gaussian() * std_dev);
    lm.adapters.emplace(name, std::move(ad));
  }
  return lm;
}

Tensor materialize_delta(const LoraAdapter& ad) {
  ad.validate();
  return scale(matmul(ad.b, ad.a), ad.scale / static_cast<double>(ad.rank));
}

Checkpoint apply(const Checkpoint& base, const LoraModel& lm) {
  Checkpoint out = base;
  for (const auto& [name, ad] : lm.adapters) {
    auto it = out.params.find(name);
    if (it == out.params.end()) {
      throw IncompatibilityError("apply: layer '" + name + "' not present in base");
    }
    Tensor delta = materialize_delta(ad);
    if (!delta.same_shape(it->second)) {
      throw IncompatibilityError("apply: shape mismatch for layer '" + name + "'");
    }
    it->second = add(it->second, delta);
  }
  return out;
}

TaskVector lora_task_vector(const LoraModel& lm, const Checkpoint& base) {
  TaskVector tv;
  for (const auto& [name, t] : base.params) {
    auto it = lm.adapters.find(name);
    if (it == lm.adapters.end()) {
      tv.deltas.emplace(name, Tensor::zeros(t.shape));
      continue;
    }
    Tensor delta = materialize_delta(it->second);
    if (!delta.same_shape(t)) {
      throw IncompatibilityError("lora_task_vector: shape mismatch for layer '" + name + "'");
    }
    tv.deltas.emplace(name, std::move(delta));
  }
  for (const auto& [name, _] : lm.adapters) {
    if (!base.params.count(name)) {
      throw IncompatibilityError("lora_task_vector: layer '" + name + "' not present in base");
    }
  }
  return tv;
}

Tensor routed_linear_forward(const Tensor& w, const Tensor& bias,
                             std::span<const LoraAdapter* const> experts,
                             std::span<const double> weights, const Tensor& x) {
  if (experts.size() != weights.size()) {
    throw ArgumentError("routed_linear_forward: experts/weights length mismatch");
  }
  if (w.rank() != 2 || x.rank() != 1 || w.cols() != x.size() || bias.size() != w.rows()) {
    throw DimensionError("routed_linear_forward: dimension mismatch");
  }
  const std::size_t d_out = w.rows(), d_in = w.cols();
  for (const LoraAdapter* ad : experts) {
    ad->validate();
    if (ad->n_in() != d_in || ad->n_out() != d_out) {
      throw DimensionError("routed_linear_forward: expert shape mismatch");
    }
  }

  // u_t = a_t x
  std::vector<std::vector<double>> u(experts.size());
  for (std::size_t t = 0; t < experts.size(); ++t) {
    const LoraAdapter& ad = *experts[t];
    const std::size_t r = static_cast<std::size_t>(ad.rank);
    u[t].assign(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d_in; ++j) {
        acc += static_cast<double>(ad.a.data[i * d_in + j]) * static_cast<double>(x.data[j]);
      }
      u[t][i] = acc;
    }
  }

  Tensor y = Tensor::zeros({d_out});
  for (std::size_t i = 0; i < d_out; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d_in; ++j) {
      acc += static_cast<double>(w.data[i * d_in + j]) * static_cast<double>(x.data[j]);
    }
    acc += static_cast<double>(bias.data[i]);
    for (std::size_t t = 0; t < experts.size(); ++t) {
      const LoraAdapter& ad = *experts[t];
      const std::size_t r = static_cast<std::size_t>(ad.rank);
      double c = 0.0;
      for (std::size_t k = 0; k < r; ++k) {
        c += static_cast<double>(ad.b.data[i * r + k]) * u[t][k];
      }
      acc += weights[t] * ((ad.scale / static_cast<double>(ad.rank)) * c);
    }
    y.data[i] = static_cast<float>(acc);
  }
  return y;
}

Tensor lora_forward(const Tensor& w, const Tensor& bias, const LoraAdapter& ad, const Tensor& x) {
  const LoraAdapter* one[1] = {&ad};
  const double weight[1] = {1.0};
  return routed_linear_forward(w, bias, one, weight, x);
}

void save(const LoraModel& lm, const std::filesystem::path& path) {
  UpckFile file;
  file.kind = UpckKind::taskvector;
  for (const auto& [name, ad] : lm.adapters) {
    ad.validate();
    file.tensors.emplace(name + ".A", ad.a);
    file.tensors.emplace(name + ".B", ad.b);
  }
  char scale_buf[32];
  std::snprintf(scale_buf, sizeof(scale_buf), "%.17g", lm.scale);
  file.meta["lora.rank"] = std::to_string(lm.rank);
  file.meta["lora.scale"] = scale_buf;
  if (!lm.base_ref.empty()) file.meta["lora.base_ref"] = lm.base_ref;
  save_upck(file, path);
}

LoraModel load_lora(const std::filesystem::path& path) {
  UpckFile file = load_upck(path);
  if (file.kind != UpckKind::taskvector) {
    throw FormatError("kind", "lora file must use taskvector kind");
  }
  LoraModel lm;
  auto rank_it = file.meta.find("lora.rank");
  auto scale_it = file.meta.find("lora.scale");
  if (rank_it == file.meta.end() || scale_it == file.meta.end()) {
    throw FormatError("meta", "lora file missing lora.rank / lora.scale");
  }
  lm.rank = std::stoi(rank_it->second);
  lm.scale = std::stod(scale_it->second);
  auto base_it = file.meta.find("lora.base_ref");
  if (base_it != file.meta.end()) lm.base_ref = base_it->second;

  for (const auto& [name, t] : file.tensors) {
    if (name.size() < 2 || name[name.size() - 2] != '.') {
      throw FormatError("tensors", "lora tensor name must end in .A or .B: " + name);
    }
    char kind = name.back();
    std::string layer = name.substr(0, name.size() - 2);
    LoraAdapter& ad = lm.adapters[layer];
    ad.layer_name = layer;
    ad.rank = lm.rank;
    ad.scale = lm.scale;
    if (kind == 'A') {
      ad.a = t;
    } else if (kind == 'B') {
      ad.b = t;
    } else {
      throw FormatError("tensors", "lora tensor name must end in .A or .B: " + name);
    }
  }
  for (auto& [layer, ad] : lm.adapters) {
    if (ad.a.size() == 0 || ad.b.size() == 0) {
      throw FormatError("tensors", "lora layer '" + layer + "' missing A or B");
    }
    ad.validate();
  }
  return lm;
}

}  // namespace upcycle
