// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "upcycle/tensor.hpp"

namespace upcycle {

// Ordered (lexicographic) parameter map. The unit all merging operates on.
struct Checkpoint {
  std::map<std::string, Tensor> params;
  std::map<std::string, std::string> meta;
};

// Per-parameter difference expert - base. Key set matches the base checkpoint.
struct TaskVector {
  std::map<std::string, Tensor> deltas;
  std::string source_task;
};

bool operator==(const Checkpoint& a, const Checkpoint& b);
bool operator==(const TaskVector& a, const TaskVector& b);

// UPCK-v1: magic "UPCK", version 0x01, three zero pad bytes, LE u64 header
// length, UTF-8 JSON header, then a packed little-endian f32 payload. Saving
// the same object twice yields byte-identical files.
void save(const Checkpoint& ckpt, const std::filesystem::path& path);
void save(const TaskVector& tv, const std::filesystem::path& path);

enum class UpckKind { checkpoint, taskvector };
UpckKind peek_kind(const std::filesystem::path& path);

Checkpoint load_checkpoint(const std::filesystem::path& path);
TaskVector load_task_vector(const std::filesystem::path& path);

// Low-level layout access, for containers that ride UPCK with extra meta
// (LoRA and MoE models). Same validation rules as the typed entry points.
struct UpckFile {
  UpckKind kind = UpckKind::checkpoint;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> meta;
};
void save_upck(const UpckFile& file, const std::filesystem::path& path);
UpckFile load_upck(const std::filesystem::path& path);

// Validation shared by save/load: unique handled by the map, names must be
// nonempty and free of control characters.
void validate_param_name(const std::string& name);

}  // namespace upcycle
