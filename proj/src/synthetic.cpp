// SPDX-License-Identifier: Apache-2.0
#include "upcycle/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "upcycle/errors.hpp"
#include "upcycle/rng.hpp"

namespace upcycle {

void TaskSpec::validate() const {
  if (task_id.empty()) throw ArgumentError("task spec: task_id must be nonempty");
  if (n_classes < 2) throw ArgumentError("task spec: n_classes must be >= 2");
  if (n_train < 1 || n_val < 1 || n_test < 1) {
    throw ArgumentError("task spec: split sizes must be positive");
  }
  if (input_dim < 1) throw ArgumentError("task spec: input_dim must be positive");
  if (!(cluster_spread > 0.0)) throw ArgumentError("task spec: cluster_spread must be positive");
  if (!(noise_frac >= 0.0 && noise_frac < 1.0)) {
    throw ArgumentError("task spec: noise_frac must be in [0, 1)");
  }
  if (!(outlier_frac >= 0.0 && outlier_frac < 1.0)) {
    throw ArgumentError("task spec: outlier_frac must be in [0, 1)");
  }
}

namespace {

// Shared class geometry: all tasks with the same (n_classes, input_dim) see
// the same centroids before their task-specific rotation.
std::vector<std::vector<double>> class_centroids(int n_classes, int input_dim) {
  SplitMix64 rng(hash_combine(0xC1A55E5Dull, hash_combine(n_classes, input_dim)));
  std::vector<std::vector<double>> c(n_classes, std::vector<double>(input_dim));
  for (auto& row : c) {
    for (double& v : row) v = rng.gaussian();
  }
  return c;
}

// Random rotation via Gram-Schmidt on a seeded Gaussian matrix.
std::vector<std::vector<double>> random_rotation(int d, SplitMix64& rng) {
  std::vector<std::vector<double>> r(d, std::vector<double>(d));
  for (auto& row : r) {
    for (double& v : row) v = rng.gaussian();
  }
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < i; ++j) {
      double dot = 0.0;
      for (int k = 0; k < d; ++k) dot += r[i][k] * r[j][k];
      for (int k = 0; k < d; ++k) r[i][k] -= dot * r[j][k];
    }
    double n2 = 0.0;
    for (int k = 0; k < d; ++k) n2 += r[i][k] * r[i][k];
    if (n2 < 1e-12) {
      // re-draw a degenerate row
      for (double& v : r[i]) v = rng.gaussian();
      --i;
      continue;
    }
    double inv = 1.0 / std::sqrt(n2);
    for (int k = 0; k < d; ++k) r[i][k] *= inv;
  }
  return r;
}

template <typename T>
void shuffle_vec(std::vector<T>& v, SplitMix64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

Split make_split(int n, std::uint64_t first_id, const TaskSpec& spec,
                 const std::vector<std::vector<double>>& centroids,
                 const std::vector<std::vector<double>>& rot, SplitMix64& rng) {
  const int d = spec.input_dim;
  // round-robin labels then shuffle keeps class balance within +-1
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i % spec.n_classes;
  shuffle_vec(labels, rng);

  Split out;
  out.examples.resize(n);
  std::vector<double> raw(d), x(d);
  for (int i = 0; i < n; ++i) {
    Example& ex = out.examples[i];
    ex.id = first_id + static_cast<std::uint64_t>(i);
    ex.label = labels[i];
    const auto& c = centroids[labels[i]];
    for (int k = 0; k < d; ++k) raw[k] = c[k] + spec.cluster_spread * rng.gaussian();
    for (int r = 0; r < d; ++r) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k) acc += rot[r][k] * raw[k];
      x[r] = acc;
    }
    ex.x.resize(d);
    for (int k = 0; k < d; ++k) ex.x[k] = static_cast<float>(x[k]);
  }
  return out;
}

}  // namespace

TaskData generate(const TaskSpec& spec) {
  spec.validate();
  const int d = spec.input_dim;
  auto centroids = class_centroids(spec.n_classes, d);

  SplitMix64 rot_rng(hash_combine(spec.seed, fnv1a64("rotation")));
  auto rot = random_rotation(d, rot_rng);

  TaskData td;
  td.spec = spec;
  SplitMix64 train_rng(hash_combine(spec.seed, fnv1a64("train")));
  SplitMix64 val_rng(hash_combine(spec.seed, fnv1a64("val")));
  SplitMix64 test_rng(hash_combine(spec.seed, fnv1a64("test")));
  td.train = make_split(spec.n_train, 0, spec, centroids, rot, train_rng);
  td.val = make_split(spec.n_val, spec.n_train, spec, centroids, rot, val_rng);
  td.test = make_split(spec.n_test, spec.n_train + spec.n_val, spec, centroids, rot, test_rng);

  // label noise and outliers on disjoint train subsets where possible
  SplitMix64 corrupt_rng(hash_combine(spec.seed, fnv1a64("corrupt")));
  std::vector<std::size_t> order(td.train.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_vec(order, corrupt_rng);

  const auto n_noisy = static_cast<std::size_t>(std::llround(spec.noise_frac * spec.n_train));
  const auto n_outlier = static_cast<std::size_t>(std::llround(spec.outlier_frac * spec.n_train));
  for (std::size_t i = 0; i < n_noisy && i < order.size(); ++i) {
    Example& ex = td.train.examples[order[i]];
    int wrong = static_cast<int>(corrupt_rng.below(spec.n_classes - 1));
    if (wrong >= ex.label) ++wrong;
    ex.label = wrong;
    ex.noisy = true;
  }
  // displace outliers to ~6x the cluster radius along a random direction
  const double radius = 6.0 * spec.cluster_spread * std::sqrt(static_cast<double>(d));
  for (std::size_t i = n_noisy; i < n_noisy + n_outlier && i < order.size(); ++i) {
    Example& ex = td.train.examples[order[i]];
    std::vector<double> dir(d);
    double n2 = 0.0;
    do {
      n2 = 0.0;
      for (double& v : dir) {
        v = corrupt_rng.gaussian();
        n2 += v * v;
      }
    } while (n2 == 0.0);
    const double s = radius / std::sqrt(n2);
    for (int k = 0; k < d; ++k) {
      ex.x[k] = static_cast<float>(static_cast<double>(ex.x[k]) + s * dir[k]);
    }
  }
  return td;
}

namespace {

const char* split_name(int s) { return s == 0 ? "train" : (s == 1 ? "val" : "test"); }

void write_split(std::ofstream& f, const Split& split, const char* name) {
  char buf[64];
  for (const Example& ex : split.examples) {
    f << ex.id << ',' << name << ',' << ex.label << ',' << (ex.noisy ? 1 : 0);
    for (float v : ex.x) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
      f << ',' << buf;
    }
    f << '\n';
  }
}

}  // namespace

void save_dataset(const TaskData& data, const std::filesystem::path& csv_path,
                  const std::filesystem::path& json_path) {
  std::ofstream f(csv_path, std::ios::trunc);
  if (!f) throw StorageError("cannot open for writing: " + csv_path.string());
  f << "example_id,split,label,is_noisy";
  for (int k = 0; k < data.spec.input_dim; ++k) f << ",f" << k;
  f << '\n';
  write_split(f, data.train, split_name(0));
  write_split(f, data.val, split_name(1));
  write_split(f, data.test, split_name(2));
  if (!f) throw StorageError("write failed: " + csv_path.string());

  nlohmann::json j;
  j["task_id"] = data.spec.task_id;
  j["n_classes"] = data.spec.n_classes;
  j["n_train"] = data.spec.n_train;
  j["n_val"] = data.spec.n_val;
  j["n_test"] = data.spec.n_test;
  j["input_dim"] = data.spec.input_dim;
  j["cluster_spread"] = data.spec.cluster_spread;
  j["noise_frac"] = data.spec.noise_frac;
  j["outlier_frac"] = data.spec.outlier_frac;
  j["seed"] = data.spec.seed;
  std::ofstream jf(json_path, std::ios::trunc);
  if (!jf) throw StorageError("cannot open for writing: " + json_path.string());
  jf << j.dump(2) << '\n';
}

TaskData load_dataset(const std::filesystem::path& csv_path,
                      const std::filesystem::path& json_path) {
  std::ifstream jf(json_path);
  if (!jf) throw StorageError("cannot open for reading: " + json_path.string());
  nlohmann::json j;
  jf >> j;
  TaskData td;
  td.spec.task_id = j.at("task_id").get<std::string>();
  td.spec.n_classes = j.at("n_classes").get<int>();
  td.spec.n_train = j.at("n_train").get<int>();
  td.spec.n_val = j.at("n_val").get<int>();
  td.spec.n_test = j.at("n_test").get<int>();
  td.spec.input_dim = j.at("input_dim").get<int>();
  td.spec.cluster_spread = j.at("cluster_spread").get<double>();
  td.spec.noise_frac = j.at("noise_frac").get<double>();
  td.spec.outlier_frac = j.at("outlier_frac").get<double>();
  td.spec.seed = j.at("seed").get<std::uint64_t>();

  std::ifstream f(csv_path);
  if (!f) throw StorageError("cannot open for reading: " + csv_path.string());
  std::string line;
  if (!std::getline(f, line)) throw FormatError("header", "dataset csv is empty");
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    Example ex;
    std::string split;
    std::size_t pos = 0;
    auto next = [&]() -> std::string {
      auto comma = line.find(',', pos);
      std::string tok = comma == std::string::npos ? line.substr(pos)
                                                   : line.substr(pos, comma - pos);
      pos = comma == std::string::npos ? line.size() : comma + 1;
      return tok;
    };
    ex.id = std::stoull(next());
    split = next();
    ex.label = std::stoi(next());
    ex.noisy = next() == "1";
    ex.x.reserve(td.spec.input_dim);
    for (int k = 0; k < td.spec.input_dim; ++k) ex.x.push_back(std::stof(next()));
    if (split == "train") {
      td.train.examples.push_back(std::move(ex));
    } else if (split == "val") {
      td.val.examples.push_back(std::move(ex));
    } else if (split == "test") {
      td.test.examples.push_back(std::move(ex));
    } else {
      throw FormatError("split", "unknown split: " + split);
    }
  }
  return td;
}

}  // namespace upcycle
