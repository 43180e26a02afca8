// SPDX-License-Identifier: Apache-2.0
#include "upcycle/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "upcycle/errors.hpp"

namespace upcycle {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'U', 'P', 'C', 'K'};
constexpr std::uint8_t kVersion = 0x01;

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32_le(std::string& out, float f) {
  std::uint32_t v = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

float get_f32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(v);
}

std::string encode(const std::map<std::string, Tensor>& tensors,
                   const std::map<std::string, std::string>& meta, const char* kind) {
  json header;
  header["kind"] = kind;
  header["meta"] = json::object();
  for (const auto& [k, v] : meta) header["meta"][k] = v;
  header["tensors"] = json::object();

  std::string payload;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    validate_param_name(name);
    require_finite(t, ("tensor '" + name + "'").c_str());
    std::uint64_t nbytes = static_cast<std::uint64_t>(t.size()) * 4;
    json entry;
    entry["shape"] = t.shape;
    entry["dtype"] = "f32";
    entry["offset"] = offset;
    entry["nbytes"] = nbytes;
    header["tensors"][name] = entry;
    for (float f : t.data) put_f32_le(payload, f);
    offset += nbytes;
  }

  std::string hdr = header.dump();
  std::string out;
  out.reserve(16 + hdr.size() + payload.size());
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  out.append(3, '\0');
  put_u64_le(out, hdr.size());
  out += hdr;
  out += payload;
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw StorageError("cannot open for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  if (!f) throw StorageError("write failed: " + path.string());
}

struct Parsed {
  UpckKind kind;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> meta;
};

Parsed parse(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw StorageError("cannot open for reading: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());

  if (bytes.size() < 16) throw FormatError("magic", "file shorter than fixed header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("magic", "expected 'UPCK'");
  if (bytes[4] != kVersion) throw FormatError("version", "unsupported version");
  if (bytes[5] != 0 || bytes[6] != 0 || bytes[7] != 0) {
    throw FormatError("padding", "bytes 5-7 must be zero");
  }
  std::uint64_t hdr_len = get_u64_le(&bytes[8]);
  if (16 + hdr_len > bytes.size()) throw FormatError("header_length", "header extends past end of file");

  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hdr_len));
  } catch (const json::exception& e) {
    throw FormatError("header", std::string("invalid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("kind") || !header["kind"].is_string()) {
    throw FormatError("kind", "missing or non-string");
  }
  std::string kind = header["kind"].get<std::string>();
  UpckKind k;
  if (kind == "checkpoint") {
    k = UpckKind::checkpoint;
  } else if (kind == "taskvector") {
    k = UpckKind::taskvector;
  } else {
    throw FormatError("kind", "expected 'checkpoint' or 'taskvector', got '" + kind + "'");
  }

  std::map<std::string, std::string> meta;
  if (header.contains("meta")) {
    if (!header["meta"].is_object()) throw FormatError("meta", "must be an object");
    for (const auto& [mk, mv] : header["meta"].items()) {
      if (!mv.is_string()) throw FormatError("meta", "values must be strings");
      meta[mk] = mv.get<std::string>();
    }
  }

  if (!header.contains("tensors") || !header["tensors"].is_object()) {
    throw FormatError("tensors", "missing or not an object");
  }

  const unsigned char* payload = bytes.data() + 16 + hdr_len;
  std::uint64_t payload_len = bytes.size() - 16 - hdr_len;

  // nlohmann objects iterate in key order, so packing is checked in the same
  // lexicographic order save used.
  std::map<std::string, Tensor> tensors;
  std::uint64_t expected_offset = 0;
  for (const auto& [name, entry] : header["tensors"].items()) {
    try {
      validate_param_name(name);
    } catch (const Error& e) {
      throw FormatError("tensors", e.what());
    }
    if (!entry.is_object()) throw FormatError("tensors." + name, "entry must be an object");
    if (!entry.contains("dtype") || entry["dtype"] != "f32") {
      throw FormatError("dtype", "tensor '" + name + "' must be f32");
    }
    if (!entry.contains("shape") || !entry["shape"].is_array() || entry["shape"].empty() ||
        entry["shape"].size() > 2) {
      throw FormatError("shape", "tensor '" + name + "' must have rank 1 or 2");
    }
    std::vector<std::size_t> shape;
    std::uint64_t numel = 1;
    for (const auto& d : entry["shape"]) {
      if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
        throw FormatError("shape", "tensor '" + name + "' dimensions must be positive integers");
      }
      shape.push_back(d.get<std::size_t>());
      numel *= d.get<std::uint64_t>();
    }
    if (!entry.contains("offset") || !entry["offset"].is_number_unsigned() ||
        !entry.contains("nbytes") || !entry["nbytes"].is_number_unsigned()) {
      throw FormatError("offset", "tensor '" + name + "' offset/nbytes must be unsigned integers");
    }
    std::uint64_t offset = entry["offset"].get<std::uint64_t>();
    std::uint64_t nbytes = entry["nbytes"].get<std::uint64_t>();
    if (nbytes != numel * 4) {
      throw FormatError("nbytes", "extent mismatch for tensor '" + name + "'");
    }
    if (offset != expected_offset) {
      throw FormatError("offset", "tensor '" + name + "' breaks ascending gap-free packing");
    }
    expected_offset += nbytes;
    if (offset + nbytes > payload_len) {
      throw FormatError("payload", "payload truncated");
    }
    Tensor t = Tensor::zeros(shape);
    for (std::uint64_t i = 0; i < numel; ++i) {
      float v = get_f32_le(payload + offset + i * 4);
      if (!std::isfinite(v)) {
        throw FormatError("payload", "non-finite value in tensor '" + name + "'");
      }
      t.data[i] = v;
    }
    tensors.emplace(name, std::move(t));
  }
  if (expected_offset != payload_len) {
    throw FormatError("payload", expected_offset < payload_len ? "trailing bytes after last tensor"
                                                               : "payload truncated");
  }
  return Parsed{k, std::move(tensors), std::move(meta)};
}

}  // namespace

void validate_param_name(const std::string& name) {
  if (name.empty()) throw ArgumentError("parameter name must be nonempty");
  for (unsigned char c : name) {
    if (c < 0x20 || c == 0x7F) {
      throw ArgumentError("parameter name contains control characters");
    }
  }
}

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  return a.params == b.params && a.meta == b.meta;
}

bool operator==(const TaskVector& a, const TaskVector& b) {
  return a.deltas == b.deltas && a.source_task == b.source_task;
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, encode(ckpt.params, ckpt.meta, "checkpoint"));
}

void save(const TaskVector& tv, const std::filesystem::path& path) {
  std::map<std::string, std::string> meta;
  if (!tv.source_task.empty()) meta["source_task"] = tv.source_task;
  write_file(path, encode(tv.deltas, meta, "taskvector"));
}

void save_upck(const UpckFile& file, const std::filesystem::path& path) {
  write_file(path, encode(file.tensors, file.meta,
                          file.kind == UpckKind::checkpoint ? "checkpoint" : "taskvector"));
}

UpckFile load_upck(const std::filesystem::path& path) {
  Parsed p = parse(path);
  return UpckFile{p.kind, std::move(p.tensors), std::move(p.meta)};
}

UpckKind peek_kind(const std::filesystem::path& path) { return parse(path).kind; }

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Parsed p = parse(path);
  if (p.kind != UpckKind::checkpoint) {
    throw FormatError("kind", "expected a checkpoint file: " + path.string());
  }
  return Checkpoint{std::move(p.tensors), std::move(p.meta)};
}

TaskVector load_task_vector(const std::filesystem::path& path) {
  Parsed p = parse(path);
  if (p.kind != UpckKind::taskvector) {
    throw FormatError("kind", "expected a taskvector file: " + path.string());
  }
  TaskVector tv;
  tv.deltas = std::move(p.tensors);
  auto it = p.meta.find("source_task");
  if (it != p.meta.end()) tv.source_task = it->second;
  return tv;
}

}  // namespace upcycle
