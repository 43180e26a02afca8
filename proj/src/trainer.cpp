// SPDX-License-Identifier: Apache-2.0
#include "upcycle/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "upcycle/errors.hpp"
#include "upcycle/rng.hpp"

namespace upcycle {

int TrainConfig::resolved_warmup() const {
  if (warmup_steps >= 0) return warmup_steps;
  return static_cast<int>(warmup_frac * steps);
}

double lr_warmup_cosine(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                        double peak) {
  if (step < 0 || step > total_steps) {
    throw ArgumentError("lr_warmup_cosine: step out of [0, total_steps]");
  }
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ArgumentError("lr_warmup_cosine: warmup out of range");
  }
  if (step < warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps == warmup_steps) return peak;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void adamw_step(std::vector<Param>& params, const GradMap& grads, AdamState& state, double lr,
                double weight_decay, const AdamConfig& adam) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(state.t));
  for (auto& p : params) {
    auto git = grads.find(p.name);
    if (git == grads.end()) continue;
    const auto& g = git->second;
    if (g.size() != p.size()) throw DimensionError("adamw_step: gradient shape mismatch");
    auto& [m, v] = state.moments[p.name];
    if (m.size() != p.size()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
      v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= lr * (mhat / (std::sqrt(vhat) + adam.eps) + weight_decay * p.value[i]);
    }
  }
}

double early_stop_update(EarlyStopState& s, const EarlyStopConfig& cfg, double val_acc) {
  if (!s.has_best || val_acc > s.best_val) {
    s.best_val = val_acc;
    s.has_best = true;
    s.stagnant = 0;
  } else {
    ++s.stagnant;
    if (s.stagnant >= cfg.patience) {
      ++s.reductions;
      s.multiplier *= cfg.factor;
      s.stagnant = 0;
      if (s.reductions >= cfg.max_reductions) s.stopped = true;
    }
  }
  return s.multiplier;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

std::vector<double> to_f64(const Tensor& t) {
  return std::vector<double>(t.data.begin(), t.data.end());
}

Tensor to_f32(const std::vector<double>& v, std::vector<std::size_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
  return t;
}

bool parse_backbone_name(const std::string& name, int& layer, char& kind) {
  constexpr const char* prefix = "backbone.";
  if (name.rfind(prefix, 0) != 0) return false;
  std::size_t pos = 9;
  std::size_t dot = name.find('.', pos);
  if (dot == std::string::npos || dot + 2 != name.size()) return false;
  kind = name.back();
  if (kind != 'w' && kind != 'b') return false;
  try {
    layer = std::stoi(name.substr(pos, dot - pos));
  } catch (...) {
    return false;
  }
  return layer >= 1;
}

bool parse_head_name(const std::string& name, std::string& task, char& kind) {
  constexpr const char* prefix = "head.";
  if (name.rfind(prefix, 0) != 0) return false;
  if (name.size() < 8 || name[name.size() - 2] != '.') return false;
  kind = name.back();
  if (kind != 'w' && kind != 'b') return false;
  task = name.substr(5, name.size() - 7);
  return !task.empty();
}

}  // namespace

std::size_t Model::idx(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("model: unknown parameter '" + name + "'");
  return it->second;
}

const Param& Model::param(const std::string& name) const { return params_[idx(name)]; }

void Model::build_backbone(const Checkpoint& ckpt) {
  std::map<int, std::pair<const Tensor*, const Tensor*>> layers;  // i -> (w, b)
  std::map<std::string, std::pair<const Tensor*, const Tensor*>> heads;
  for (const auto& [name, t] : ckpt.params) {
    int li = 0;
    char kind = 0;
    std::string task;
    if (parse_backbone_name(name, li, kind)) {
      (kind == 'w' ? layers[li].first : layers[li].second) = &t;
    } else if (parse_head_name(name, task, kind)) {
      (kind == 'w' ? heads[task].first : heads[task].second) = &t;
    } else {
      throw IncompatibilityError("model: unrecognized parameter name '" + name + "'");
    }
  }
  if (layers.empty()) throw IncompatibilityError("model: no backbone layers");
  if (heads.empty()) throw IncompatibilityError("model: no task heads");

  auto push = [&](const std::string& name, const Tensor& t) {
    index_[name] = params_.size();
    params_.push_back(Param{name, t.shape, to_f64(t), false});
  };

  int expect = 1;
  std::size_t prev_width = 0;
  for (const auto& [li, wb] : layers) {
    if (li != expect++) throw IncompatibilityError("model: non-contiguous backbone layer indices");
    if (!wb.first || !wb.second) {
      throw IncompatibilityError("model: backbone layer " + std::to_string(li) + " missing w or b");
    }
    const Tensor& w = *wb.first;
    const Tensor& b = *wb.second;
    if (w.rank() != 2 || b.rank() != 1 || b.size() != w.rows()) {
      throw IncompatibilityError("model: bad shapes in backbone layer " + std::to_string(li));
    }
    if (li == 1) {
      input_dim_ = w.cols();
    } else if (w.cols() != prev_width) {
      throw IncompatibilityError("model: backbone layer dimensions do not chain");
    }
    prev_width = w.rows();
    HiddenLayer hl;
    hl.w = "backbone." + std::to_string(li) + ".w";
    hl.b = "backbone." + std::to_string(li) + ".b";
    push(hl.w, w);
    push(hl.b, b);
    hidden_.push_back(std::move(hl));
  }
  for (const auto& [task, wb] : heads) {
    if (!wb.first || !wb.second) {
      throw IncompatibilityError("model: head '" + task + "' missing w or b");
    }
    const Tensor& w = *wb.first;
    const Tensor& b = *wb.second;
    if (w.rank() != 2 || w.cols() != prev_width || b.size() != w.rows()) {
      throw IncompatibilityError("model: bad shapes in head '" + task + "'");
    }
    std::string wn = "head." + task + ".w";
    std::string bn = "head." + task + ".b";
    push(wn, w);
    push(bn, b);
    heads_.emplace(task, std::make_pair(wn, bn));
  }
  meta_ = ckpt.meta;
}

Model Model::from_checkpoint(const Checkpoint& ckpt) {
  Model m;
  m.mode_ = Mode::dense;
  m.build_backbone(ckpt);
  return m;
}

Model Model::with_lora(const Checkpoint& base, const LoraModel& lm) {
  Model m;
  m.mode_ = Mode::lora;
  m.build_backbone(base);
  m.lora_rank_ = lm.rank;
  m.lora_scale_ = lm.scale;
  for (const auto& [layer_name, ad] : lm.adapters) {
    ad.validate();
    auto hit = std::find_if(m.hidden_.begin(), m.hidden_.end(),
                            [&](const HiddenLayer& h) { return h.w == layer_name; });
    if (hit == m.hidden_.end()) {
      throw IncompatibilityError("with_lora: adapters must target backbone weights, got '" +
                                 layer_name + "'");
    }
    const Param& w = m.param(layer_name);
    if (ad.n_in() != w.shape[1] || ad.n_out() != w.shape[0]) {
      throw IncompatibilityError("with_lora: adapter shape mismatch on '" + layer_name + "'");
    }
    hit->adapted = true;
    hit->la = "lora." + layer_name + ".A";
    hit->lb = "lora." + layer_name + ".B";
    m.index_[hit->la] = m.params_.size();
    m.params_.push_back(Param{hit->la, ad.a.shape, to_f64(ad.a), false});
    m.index_[hit->lb] = m.params_.size();
    m.params_.push_back(Param{hit->lb, ad.b.shape, to_f64(ad.b), false});
  }
  return m;
}

Model Model::with_moe(const MoeModel& mm) {
  Model m;
  m.mode_ = Mode::moe;
  m.build_backbone(mm.base);
  m.top_k_ = mm.top_k;
  if (mm.layers.empty()) throw IncompatibilityError("with_moe: no MoE layers");
  m.n_experts_ = mm.layers.begin()->second.experts.size();
  for (const auto& [layer_name, layer] : mm.layers) {
    layer.validate();
    if (layer.experts.size() != m.n_experts_) {
      throw IncompatibilityError("with_moe: expert count differs across layers");
    }
    auto hit = std::find_if(m.hidden_.begin(), m.hidden_.end(),
                            [&](const HiddenLayer& h) { return h.w == layer_name; });
    if (hit == m.hidden_.end()) {
      throw IncompatibilityError("with_moe: MoE layers must target backbone weights, got '" +
                                 layer_name + "'");
    }
    m.lora_rank_ = layer.experts[0].rank;
    m.lora_scale_ = layer.experts[0].scale;
    hit->moe = true;
    hit->router = "moe." + layer_name + ".router";
    m.index_[hit->router] = m.params_.size();
    m.params_.push_back(Param{hit->router, layer.router.shape, to_f64(layer.router), false});
    for (std::size_t t = 0; t < layer.experts.size(); ++t) {
      const LoraAdapter& ad = layer.experts[t];
      std::string an = "moe." + layer_name + ".expert" + std::to_string(t) + ".A";
      std::string bn = "moe." + layer_name + ".expert" + std::to_string(t) + ".B";
      m.index_[an] = m.params_.size();
      m.params_.push_back(Param{an, ad.a.shape, to_f64(ad.a), false});
      m.index_[bn] = m.params_.size();
      m.params_.push_back(Param{bn, ad.b.shape, to_f64(ad.b), false});
      hit->experts.emplace_back(an, bn);
    }
  }
  return m;
}

std::vector<std::string> Model::tasks() const {
  std::vector<std::string> out;
  for (const auto& [task, _] : heads_) out.push_back(task);
  return out;
}

int Model::n_classes(const std::string& task) const {
  auto it = heads_.find(task);
  if (it == heads_.end()) throw ArgumentError("model: unknown task '" + task + "'");
  return static_cast<int>(param(it->second.first).shape[0]);
}

void Model::set_trainable(const std::function<bool(const std::string&)>& pred) {
  for (auto& p : params_) p.trainable = pred(p.name);
}

void Model::set_trainable_backbone() {
  set_trainable([](const std::string& n) { return n.rfind("backbone.", 0) == 0; });
}

void Model::set_trainable_adapters() {
  set_trainable([](const std::string& n) {
    return n.rfind("lora.", 0) == 0 || n.rfind("moe.", 0) == 0;
  });
}

void Model::set_trainable_backbone_and_heads() {
  set_trainable([](const std::string& n) {
    return n.rfind("backbone.", 0) == 0 || n.rfind("head.", 0) == 0;
  });
}

void Model::set_trainable_head(const std::string& task) {
  const std::string prefix = "head." + task + ".";
  set_trainable([&](const std::string& n) { return n.rfind(prefix, 0) == 0; });
}

void Model::freeze_all() {
  set_trainable([](const std::string&) { return false; });
}

// per-example forward cache
struct Model::Fwd {
  std::vector<std::vector<double>> inputs;  // layer input x
  std::vector<std::vector<double>> acts;    // tanh output h
  std::vector<std::vector<double>> lora_u;  // a x (lora mode)
  struct MoeCache {
    std::vector<double> probs;
    std::vector<int> selected;
    std::vector<double> weights;
    double denom = 0.0;
    std::vector<std::vector<double>> u;  // per selected expert
    std::vector<std::vector<double>> c;  // per selected expert, scaled contribution
  };
  std::vector<MoeCache> moe;
  std::vector<double> logits;
};

void Model::forward_cached(const Example& ex, const std::string& task, Fwd& f) const {
  if (ex.x.size() != input_dim_) throw DimensionError("model: input dimension mismatch");
  auto head_it = heads_.find(task);
  if (head_it == heads_.end()) throw ArgumentError("model: unknown task '" + task + "'");

  f.inputs.assign(hidden_.size(), {});
  f.acts.assign(hidden_.size(), {});
  f.lora_u.assign(hidden_.size(), {});
  f.moe.assign(hidden_.size(), {});

  std::vector<double> x(ex.x.begin(), ex.x.end());
  for (std::size_t li = 0; li < hidden_.size(); ++li) {
    const HiddenLayer& hl = hidden_[li];
    const auto& W = param(hl.w);
    const auto& B = param(hl.b);
    const std::size_t d_out = W.shape[0], d_in = W.shape[1];
    f.inputs[li] = x;

    std::vector<double> z(d_out);
    for (std::size_t i = 0; i < d_out; ++i) {
      double acc = 0.0;
      const double* wrow = &W.value[i * d_in];
      for (std::size_t j = 0; j < d_in; ++j) acc += wrow[j] * x[j];
      z[i] = acc + B.value[i];
    }

    if (hl.adapted) {
      const auto& A = param(hl.la);
      const auto& Bm = param(hl.lb);
      const std::size_t r = A.shape[0];
      std::vector<double>& u = f.lora_u[li];
      u.assign(r, 0.0);
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        const double* arow = &A.value[i * d_in];
        for (std::size_t j = 0; j < d_in; ++j) acc += arow[j] * x[j];
        u[i] = acc;
      }
      const double s = lora_scale_ / static_cast<double>(lora_rank_);
      for (std::size_t i = 0; i < d_out; ++i) {
        double c = 0.0;
        const double* brow = &Bm.value[i * r];
        for (std::size_t k = 0; k < r; ++k) c += brow[k] * u[k];
        z[i] += s * c;
      }
    } else if (hl.moe) {
      Fwd::MoeCache& mc = f.moe[li];
      const auto& R = param(hl.router);
      const std::size_t n_exp = R.shape[0];
      // routing: softmax over R x, top-k with ties to the lower index
      std::vector<double> logits_r(n_exp);
      for (std::size_t t = 0; t < n_exp; ++t) {
        double acc = 0.0;
        const double* rrow = &R.value[t * d_in];
        for (std::size_t j = 0; j < d_in; ++j) acc += rrow[j] * x[j];
        logits_r[t] = acc;
      }
      double mx = *std::max_element(logits_r.begin(), logits_r.end());
      double sum = 0.0;
      mc.probs.resize(n_exp);
      for (std::size_t t = 0; t < n_exp; ++t) {
        mc.probs[t] = std::exp(logits_r[t] - mx);
        sum += mc.probs[t];
      }
      for (double& p : mc.probs) p /= sum;

      const std::size_t k = std::min<std::size_t>(top_k_, n_exp);
      std::vector<int> order(n_exp);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return mc.probs[a] > mc.probs[b]; });
      mc.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(mc.selected.begin(), mc.selected.end());
      mc.denom = 0.0;
      for (int t : mc.selected) mc.denom += mc.probs[t];
      mc.weights.clear();
      for (int t : mc.selected) mc.weights.push_back(mc.probs[t] / mc.denom);

      const double s = lora_scale_ / static_cast<double>(lora_rank_);
      mc.u.resize(k);
      mc.c.resize(k);
      for (std::size_t si = 0; si < k; ++si) {
        const auto& [an, bn] = hl.experts[static_cast<std::size_t>(mc.selected[si])];
        const auto& A = param(an);
        const auto& Bm = param(bn);
        const std::size_t r = A.shape[0];
        mc.u[si].assign(r, 0.0);
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          const double* arow = &A.value[i * d_in];
          for (std::size_t j = 0; j < d_in; ++j) acc += arow[j] * x[j];
          mc.u[si][i] = acc;
        }
        mc.c[si].assign(d_out, 0.0);
        for (std::size_t i = 0; i < d_out; ++i) {
          double c = 0.0;
          const double* brow = &Bm.value[i * r];
          for (std::size_t kk = 0; kk < r; ++kk) c += brow[kk] * mc.u[si][kk];
          mc.c[si][i] = s * c;
        }
        for (std::size_t i = 0; i < d_out; ++i) z[i] += mc.weights[si] * mc.c[si][i];
      }
    }

    std::vector<double>& h = f.acts[li];
    h.resize(d_out);
    for (std::size_t i = 0; i < d_out; ++i) h[i] = std::tanh(z[i]);
    x = h;
  }

  const auto& HW = param(head_it->second.first);
  const auto& HB = param(head_it->second.second);
  const std::size_t C = HW.shape[0], dh = HW.shape[1];
  f.logits.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    const double* wrow = &HW.value[c * dh];
    for (std::size_t j = 0; j < dh; ++j) acc += wrow[j] * x[j];
    f.logits[c] = acc + HB.value[c];
  }
}

void Model::backward_cached(const Fwd& f, const std::string& task, std::vector<double> dlogits,
                            GradMap& grads) const {
  auto gptr = [&](const std::string& name) -> double* {
    auto it = grads.find(name);
    return it == grads.end() ? nullptr : it->second.data();
  };

  const auto& [hw_name, hb_name] = heads_.at(task);
  const auto& HW = param(hw_name);
  const std::size_t C = HW.shape[0], dh = HW.shape[1];
  const std::vector<double>& hlast = f.acts.back();

  if (double* g = gptr(hw_name)) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t j = 0; j < dh; ++j) g[c * dh + j] += dlogits[c] * hlast[j];
    }
  }
  if (double* g = gptr(hb_name)) {
    for (std::size_t c = 0; c < C; ++c) g[c] += dlogits[c];
  }
  std::vector<double> dh_vec(dh, 0.0);
  for (std::size_t j = 0; j < dh; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) acc += HW.value[c * dh + j] * dlogits[c];
    dh_vec[j] = acc;
  }

  for (std::size_t li = hidden_.size(); li-- > 0;) {
    const HiddenLayer& hl = hidden_[li];
    const auto& W = param(hl.w);
    const std::size_t d_out = W.shape[0], d_in = W.shape[1];
    const std::vector<double>& h = f.acts[li];
    const std::vector<double>& x = f.inputs[li];

    std::vector<double> dz(d_out);
    for (std::size_t i = 0; i < d_out; ++i) dz[i] = dh_vec[i] * (1.0 - h[i] * h[i]);

    std::vector<double> dx(d_in, 0.0);
    for (std::size_t j = 0; j < d_in; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d_out; ++i) acc += W.value[i * d_in + j] * dz[i];
      dx[j] = acc;
    }
    if (double* g = gptr(hl.w)) {
      for (std::size_t i = 0; i < d_out; ++i) {
        for (std::size_t j = 0; j < d_in; ++j) g[i * d_in + j] += dz[i] * x[j];
      }
    }
    if (double* g = gptr(hl.b)) {
      for (std::size_t i = 0; i < d_out; ++i) g[i] += dz[i];
    }

    if (hl.adapted) {
      const auto& A = param(hl.la);
      const auto& Bm = param(hl.lb);
      const std::size_t r = A.shape[0];
      const std::vector<double>& u = f.lora_u[li];
      const double s = lora_scale_ / static_cast<double>(lora_rank_);
      std::vector<double> v(r, 0.0);  // B^T dz
      for (std::size_t k = 0; k < r; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d_out; ++i) acc += Bm.value[i * r + k] * dz[i];
        v[k] = acc;
      }
      if (double* g = gptr(hl.lb)) {
        for (std::size_t i = 0; i < d_out; ++i) {
          for (std::size_t k = 0; k < r; ++k) g[i * r + k] += s * dz[i] * u[k];
        }
      }
      if (double* g = gptr(hl.la)) {
        for (std::size_t k = 0; k < r; ++k) {
          for (std::size_t j = 0; j < d_in; ++j) g[k * d_in + j] += s * v[k] * x[j];
        }
      }
      for (std::size_t j = 0; j < d_in; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < r; ++k) acc += A.value[k * d_in + j] * v[k];
        dx[j] += s * acc;
      }
    } else if (hl.moe) {
      const Fwd::MoeCache& mc = f.moe[li];
      const double s = lora_scale_ / static_cast<double>(lora_rank_);
      std::vector<double> dwhat(mc.selected.size(), 0.0);
      for (std::size_t si = 0; si < mc.selected.size(); ++si) {
        const auto& [an, bn] = hl.experts[static_cast<std::size_t>(mc.selected[si])];
        const auto& A = param(an);
        const auto& Bm = param(bn);
        const std::size_t r = A.shape[0];
        const double what = mc.weights[si];
        std::vector<double> v(r, 0.0);
        for (std::size_t k = 0; k < r; ++k) {
          double acc = 0.0;
          for (std::size_t i = 0; i < d_out; ++i) acc += Bm.value[i * r + k] * dz[i];
          v[k] = acc;
        }
        if (double* g = gptr(bn)) {
          for (std::size_t i = 0; i < d_out; ++i) {
            for (std::size_t k = 0; k < r; ++k) g[i * r + k] += what * s * dz[i] * mc.u[si][k];
          }
        }
        if (double* g = gptr(an)) {
          for (std::size_t k = 0; k < r; ++k) {
            for (std::size_t j = 0; j < d_in; ++j) g[k * d_in + j] += what * s * v[k] * x[j];
          }
        }
        for (std::size_t j = 0; j < d_in; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < r; ++k) acc += A.value[k * d_in + j] * v[k];
          dx[j] += what * s * acc;
        }
        // d loss / d what = dz . c
        double acc = 0.0;
        for (std::size_t i = 0; i < d_out; ++i) acc += dz[i] * mc.c[si][i];
        dwhat[si] = acc;
      }
      // renormalization backward: dpi_s = (dwhat_s - sum_t dwhat_t what_t) / denom
      double wdot = 0.0;
      for (std::size_t si = 0; si < mc.selected.size(); ++si) wdot += dwhat[si] * mc.weights[si];
      const std::size_t n_exp = mc.probs.size();
      std::vector<double> dpi(n_exp, 0.0);
      for (std::size_t si = 0; si < mc.selected.size(); ++si) {
        dpi[static_cast<std::size_t>(mc.selected[si])] = (dwhat[si] - wdot) / mc.denom;
      }
      // softmax backward
      double pdot = 0.0;
      for (std::size_t t = 0; t < n_exp; ++t) pdot += dpi[t] * mc.probs[t];
      std::vector<double> dzeta(n_exp);
      for (std::size_t t = 0; t < n_exp; ++t) dzeta[t] = mc.probs[t] * (dpi[t] - pdot);
      const auto& R = param(hl.router);
      if (double* g = gptr(hl.router)) {
        for (std::size_t t = 0; t < n_exp; ++t) {
          for (std::size_t j = 0; j < d_in; ++j) g[t * d_in + j] += dzeta[t] * x[j];
        }
      }
      for (std::size_t j = 0; j < d_in; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < n_exp; ++t) acc += R.value[t * d_in + j] * dzeta[t];
        dx[j] += acc;
      }
    }

    dh_vec = std::move(dx);
  }
}

std::vector<double> Model::logits(std::span<const float> x, const std::string& task) const {
  Example ex;
  ex.x.assign(x.begin(), x.end());
  Fwd f;
  forward_cached(ex, task, f);
  return f.logits;
}

std::vector<double> Model::probabilities(std::span<const float> x, const std::string& task) const {
  std::vector<double> l = logits(x, task);
  double mx = *std::max_element(l.begin(), l.end());
  double sum = 0.0;
  for (double& v : l) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : l) v /= sum;
  return l;
}

int Model::predict(std::span<const float> x, const std::string& task) const {
  std::vector<double> l = logits(x, task);
  return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
}

namespace {

double cross_entropy(const std::vector<double>& logits, int label, std::vector<double>* dlogits) {
  const std::size_t C = logits.size();
  if (label < 0 || static_cast<std::size_t>(label) >= C) {
    throw ArgumentError("cross_entropy: label out of range");
  }
  double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  if (dlogits) {
    dlogits->resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      (*dlogits)[c] = std::exp(logits[c] - lse) - (static_cast<int>(c) == label ? 1.0 : 0.0);
    }
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

}  // namespace

Model::LossResult Model::forward_loss(std::span<const BatchItem> batch) const {
  if (batch.empty()) throw ArgumentError("forward_loss: empty batch");
  LossResult res;
  res.per_example.reserve(batch.size());
  Fwd f;
  double total = 0.0;
  for (const BatchItem& item : batch) {
    forward_cached(*item.ex, *item.task, f);
    double l = cross_entropy(f.logits, item.ex->label, nullptr);
    res.per_example.push_back(l);
    total += l;
  }
  res.loss = total / static_cast<double>(batch.size());
  return res;
}

Model::LossResult Model::forward_backward(std::span<const BatchItem> batch, GradMap& grads) const {
  if (batch.empty()) throw ArgumentError("forward_backward: empty batch");
  grads.clear();
  for (const auto& p : params_) {
    if (p.trainable) grads.emplace(p.name, std::vector<double>(p.size(), 0.0));
  }
  LossResult res;
  res.per_example.reserve(batch.size());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Fwd f;
  std::vector<double> dlogits;
  double total = 0.0;
  for (const BatchItem& item : batch) {
    forward_cached(*item.ex, *item.task, f);
    double l = cross_entropy(f.logits, item.ex->label, &dlogits);
    res.per_example.push_back(l);
    total += l;
    for (double& v : dlogits) v *= inv_b;
    backward_cached(f, *item.task, dlogits, grads);
  }
  res.loss = total * inv_b;
  return res;
}

Checkpoint Model::snapshot() const {
  if (mode_ != Mode::dense) throw ArgumentError("snapshot: model is not in dense mode");
  Checkpoint out;
  out.meta = meta_;
  for (const auto& p : params_) out.params.emplace(p.name, to_f32(p.value, p.shape));
  return out;
}

LoraModel Model::lora_snapshot() const {
  if (mode_ != Mode::lora) throw ArgumentError("lora_snapshot: model is not in lora mode");
  LoraModel lm;
  lm.rank = lora_rank_;
  lm.scale = lora_scale_;
  auto ref = meta_.find("model_id");
  if (ref != meta_.end()) lm.base_ref = ref->second;
  for (const auto& hl : hidden_) {
    if (!hl.adapted) continue;
    LoraAdapter ad;
    ad.layer_name = hl.w;
    ad.rank = lora_rank_;
    ad.scale = lora_scale_;
    const auto& A = param(hl.la);
    const auto& B = param(hl.lb);
    ad.a = to_f32(A.value, A.shape);
    ad.b = to_f32(B.value, B.shape);
    lm.adapters.emplace(hl.w, std::move(ad));
  }
  return lm;
}

MoeModel Model::moe_snapshot() const {
  if (mode_ != Mode::moe) throw ArgumentError("moe_snapshot: model is not in moe mode");
  MoeModel mm;
  mm.top_k = top_k_;
  mm.base.meta = meta_;
  for (const auto& p : params_) {
    if (p.name.rfind("backbone.", 0) == 0 || p.name.rfind("head.", 0) == 0) {
      mm.base.params.emplace(p.name, to_f32(p.value, p.shape));
    }
  }
  for (const auto& hl : hidden_) {
    if (!hl.moe) continue;
    MoELayer layer;
    layer.top_k = top_k_;
    layer.w = to_f32(param(hl.w).value, param(hl.w).shape);
    layer.bias = to_f32(param(hl.b).value, param(hl.b).shape);
    layer.router = to_f32(param(hl.router).value, param(hl.router).shape);
    for (const auto& [an, bn] : hl.experts) {
      LoraAdapter ad;
      ad.layer_name = hl.w;
      ad.rank = lora_rank_;
      ad.scale = lora_scale_;
      ad.a = to_f32(param(an).value, param(an).shape);
      ad.b = to_f32(param(bn).value, param(bn).shape);
      layer.experts.push_back(std::move(ad));
    }
    mm.layers.emplace(hl.w, std::move(layer));
  }
  return mm;
}

// ---------------------------------------------------------------------------
// evaluation helpers
// ---------------------------------------------------------------------------

double accuracy(const Model& model, const Split& split, const std::string& task) {
  if (split.examples.empty()) throw ArgumentError("accuracy: empty split");
  std::size_t correct = 0;
  for (const Example& ex : split.examples) {
    if (model.predict(ex.x, task) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

std::vector<int> predictions(const Model& model, const Split& split, const std::string& task) {
  std::vector<int> out;
  out.reserve(split.size());
  for (const Example& ex : split.examples) out.push_back(model.predict(ex.x, task));
  return out;
}

std::map<std::uint64_t, double> per_example_losses(const Model& model, const Split& split,
                                                   const std::string& task) {
  std::map<std::uint64_t, double> out;
  std::vector<BatchItem> batch;
  batch.reserve(split.size());
  for (const Example& ex : split.examples) batch.push_back({&ex, &task});
  Model::LossResult res = model.forward_loss(batch);
  for (std::size_t i = 0; i < split.size(); ++i) {
    out[split.examples[i].id] = res.per_example[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

namespace {

struct BatchStream {
  std::vector<BatchItem> pool;
  std::vector<std::size_t> perm;
  std::size_t cursor = 0;
  SplitMix64 rng;

  BatchStream(std::span<const TaskSlice> sources, std::uint64_t seed)
      : rng(hash_combine(seed, fnv1a64("order"))) {
    for (const TaskSlice& s : sources) {
      for (const Example& ex : s.split->examples) pool.push_back({&ex, &s.task});
    }
    if (pool.empty()) throw ArgumentError("train: empty dataset");
    perm.resize(pool.size());
    std::iota(perm.begin(), perm.end(), 0);
    cursor = perm.size();  // shuffle on first use
  }

  void fill(std::vector<BatchItem>& batch, int batch_size) {
    batch.clear();
    for (int i = 0; i < batch_size; ++i) {
      if (cursor == perm.size()) {
        for (std::size_t j = perm.size(); j > 1; --j) std::swap(perm[j - 1], perm[rng.below(j)]);
        cursor = 0;
      }
      batch.push_back(pool[perm[cursor++]]);
    }
  }
};

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.steps < 0) throw ArgumentError("train: steps must be >= 0");
  if (cfg.batch_size < 1) throw ArgumentError("train: batch_size must be >= 1");
  if (!(cfg.peak_lr > 0.0)) throw ArgumentError("train: peak_lr must be positive");
  if (cfg.weight_decay < 0.0) throw ArgumentError("train: weight_decay must be >= 0");
}

bool wants_snapshot(const TrainHooks& hooks, int step) {
  return hooks.on_snapshot &&
         std::binary_search(hooks.snapshot_steps.begin(), hooks.snapshot_steps.end(), step);
}

}  // namespace

TrainResult train_mixture(Model& model, std::span<const TaskSlice> sources, const TrainConfig& cfg,
                          const TrainHooks& hooks) {
  validate_train_config(cfg);
  if (wants_snapshot(hooks, 0)) hooks.on_snapshot(0, model);
  if (cfg.steps == 0) return {0, 0.0};

  const int warmup = cfg.resolved_warmup();
  if (cfg.schedule == Schedule::warmup_cosine && warmup >= cfg.steps) {
    throw ArgumentError("train: warmup must be < steps for warmup_cosine");
  }

  BatchStream stream(sources, cfg.seed);
  AdamState opt;
  GradMap grads;
  std::vector<BatchItem> batch;
  double last_loss = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    const double lr =
        cfg.schedule == Schedule::warmup_cosine
            ? lr_warmup_cosine(step, cfg.steps, warmup, cfg.peak_lr)
            : (warmup > 0 && step < warmup
                   ? cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup)
                   : cfg.peak_lr);
    stream.fill(batch, cfg.batch_size);
    Model::LossResult res = model.forward_backward(batch, grads);
    if (!std::isfinite(res.loss)) throw TrainingError(step, "non-finite loss");
    adamw_step(model.params(), grads, opt, lr, cfg.weight_decay);
    last_loss = res.loss;
    const int completed = step + 1;
    if (hooks.on_step) hooks.on_step(completed, lr, res.loss);
    if (wants_snapshot(hooks, completed)) hooks.on_snapshot(completed, model);
  }
  return {cfg.steps, last_loss};
}

TrainResult train(Model& model, const Split& data, const std::string& task, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  TaskSlice slice{&data, task};
  return train_mixture(model, std::span<const TaskSlice>(&slice, 1), cfg, hooks);
}

EarlyStopRun train_early_stop(Model& model, const TaskData& data, const TrainConfig& cfg,
                              const EarlyStopConfig& es, const TrainHooks& hooks) {
  validate_train_config(cfg);
  if (cfg.steps < 1) throw ArgumentError("train_early_stop: steps cap must be >= 1");
  TaskSlice slice{&data.train, data.spec.task_id};
  BatchStream stream(std::span<const TaskSlice>(&slice, 1), cfg.seed);

  EarlyStopState st;
  EarlyStopRun run;
  AdamState opt;
  GradMap grads;
  std::vector<BatchItem> batch;
  if (wants_snapshot(hooks, 0)) hooks.on_snapshot(0, model);
  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = es.warmup > 0 && step < es.warmup
                          ? cfg.peak_lr * static_cast<double>(step) / static_cast<double>(es.warmup)
                          : cfg.peak_lr * st.multiplier;
    stream.fill(batch, cfg.batch_size);
    Model::LossResult res = model.forward_backward(batch, grads);
    if (!std::isfinite(res.loss)) throw TrainingError(step, "non-finite loss");
    adamw_step(model.params(), grads, opt, lr, cfg.weight_decay);
    const int completed = step + 1;
    if (hooks.on_step) hooks.on_step(completed, lr, res.loss);
    if (wants_snapshot(hooks, completed)) hooks.on_snapshot(completed, model);
    run.stop_step = completed;
    if (completed >= es.warmup && (completed - es.warmup) % es.eval_every == 0) {
      const double val = accuracy(model, data.val, data.spec.task_id);
      const double mult = early_stop_update(st, es, val);
      run.trace.emplace_back(completed, val, mult);
      if (st.stopped) {
        run.stopped_early = true;
        break;
      }
    }
  }
  run.best_val = st.best_val;
  run.reductions = st.reductions;
  return run;
}

}  // namespace upcycle
