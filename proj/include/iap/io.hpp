#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iap/config.hpp"
#include "iap/diffcore/tensor.hpp"
#include <json.hpp>

namespace iap {

using json = nlohmann::ordered_json;

// ---- configuration ----

/// Full config with every default filled in.
json config_to_json(const RunConfig& config);

/// Missing keys keep their defaults; unknown keys and wrong types throw
/// ConfigError naming the offending field. The result is validated.
RunConfig config_from_json(const json& j);

RunConfig load_config(const std::string& path);
void save_config(const RunConfig& config, const std::string& path);

// ---- files ----

/// Writes to "<path>.tmp" and renames over `path`.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

// ---- checkpoint ----
//
// Layout: the 8-byte magic "IAPCKPT1", a little-endian u64 manifest length, the
// manifest as JSON, then one contiguous payload of little-endian float32.
// The manifest lists {name, shape, element_width, offset, length} per entry
// (offset/length in bytes relative to the payload start) plus the payload
// size and its FNV-1a checksum.

constexpr int kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  diff::Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;
  json metadata = json::object();

  const CheckpointEntry& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on a bad magic, version, truncated or corrupted payload.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
void append_parameters(Checkpoint& ckpt, const diff::ParameterSet<T>& params);

/// Copies stored values into existing tensors; every tensor of `params` must
/// be present with the same shape.
template <typename T>
void restore_parameters(const Checkpoint& ckpt, diff::ParameterSet<T>& params);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 14695981039346656037ULL);

// ---- csv ----

/// Fixed six-decimal formatting so CSVs are byte-stable.
std::string format_number(double v);

}  // namespace iap
