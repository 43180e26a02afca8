// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace upcycle {

struct Example {
  std::uint64_t id = 0;
  std::vector<float> x;
  int label = 0;
  bool noisy = false;  // train-split label noise flag, never set on val/test
};

struct Split {
  std::vector<Example> examples;
  std::size_t size() const { return examples.size(); }
};

struct TaskSpec {
  std::string task_id;
  int n_classes = 5;
  int n_train = 2000;
  int n_val = 200;
  int n_test = 500;
  int input_dim = 32;
  double cluster_spread = 1.0;
  double noise_frac = 0.1;    // fraction of train labels reassigned to a wrong class
  double outlier_frac = 0.0;  // fraction of train inputs displaced far from their cluster
  std::uint64_t seed = 0;

  void validate() const;
};

struct TaskData {
  TaskSpec spec;
  Split train, val, test;
};

// CSV layout: example_id,split,label,is_noisy,f0..f{d-1}; floats printed with
// 9 significant digits so they round-trip bit-exactly. A JSON sidecar stores
// the spec.
void save_dataset(const TaskData& data, const std::filesystem::path& csv_path,
                  const std::filesystem::path& json_path);
TaskData load_dataset(const std::filesystem::path& csv_path,
                      const std::filesystem::path& json_path);

}  // namespace upcycle
