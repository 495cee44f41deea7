#include <algorithm>
#include <bit>
#include <cstring>
#include <map>

#include "iap/errors.hpp"
#include "iap/io.hpp"

namespace iap {

namespace {

constexpr char kMagic[8] = {'I', 'A', 'P', 'C', 'K', 'P', 'T', '1'};

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_f32_le(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

float get_f32_le(const char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(u);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw IndexError("checkpoint has no entry '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.name == name; });
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string payload;
  json manifest_entries = json::array();
  std::map<std::string, int> names;
  for (const auto& e : ckpt.entries) {
    if (!names.emplace(e.name, 0).second) throw ArgumentError("duplicate checkpoint entry " + e.name);
    if (diff::shape_numel(e.shape) != e.values.size()) {
      throw DimensionError("checkpoint entry " + e.name + ": shape " + diff::shape_str(e.shape) + " holds " +
                           std::to_string(e.values.size()) + " values");
    }
    const std::size_t offset = payload.size();
    for (float v : e.values) put_f32_le(payload, v);
    manifest_entries.push_back({{"name", e.name},
                                {"shape", e.shape},
                                {"element_width", 4},
                                {"offset", offset},
                                {"length", payload.size() - offset}});
  }
  json manifest = {{"format", "iap-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"metadata", ckpt.metadata},
                   {"payload_bytes", payload.size()},
                   {"payload_fnv1a", hex64(fnv1a(payload.data(), payload.size()))},
                   {"entries", manifest_entries}};
  const std::string m = manifest.dump();
  std::string out(kMagic, sizeof kMagic);
  put_u64_le(out, m.size());
  out += m;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError("not an iap checkpoint (bad magic)");
  }
  const std::uint64_t mlen = get_u64_le(bytes, 8);
  if (mlen > bytes.size() - 16) throw FormatError("checkpoint truncated inside the manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  try {
    if (manifest.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("checkpoint version " + manifest.at("version").dump() + ", expected " +
                        std::to_string(kCheckpointVersion));
    }
    const std::size_t start = 16 + mlen;
    const auto payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
    if (bytes.size() - start != payload_bytes) {
      throw FormatError("checkpoint payload is " + std::to_string(bytes.size() - start) + " bytes, manifest says " +
                        std::to_string(payload_bytes));
    }
    if (manifest.at("payload_fnv1a").get<std::string>() != hex64(fnv1a(bytes.data() + start, payload_bytes))) {
      throw FormatError("checkpoint payload checksum mismatch");
    }
    Checkpoint ckpt;
    ckpt.metadata = manifest.at("metadata");
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& e : manifest.at("entries")) {
      CheckpointEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.shape = e.at("shape").get<diff::Shape>();
      if (e.at("element_width").get<int>() != 4) throw FormatError(entry.name + ": element width must be 4");
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      if (length != diff::shape_numel(entry.shape) * 4) throw FormatError(entry.name + ": length does not match shape");
      if (offset > payload_bytes || length > payload_bytes - offset) {
        throw FormatError(entry.name + ": byte range outside the payload");
      }
      spans.emplace_back(offset, length);
      entry.values.resize(length / 4);
      for (std::size_t i = 0; i < entry.values.size(); ++i) {
        entry.values[i] = get_f32_le(bytes.data() + start + offset + 4 * i);
      }
      ckpt.entries.push_back(std::move(entry));
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i - 1].first + spans[i - 1].second > spans[i].first) throw FormatError("checkpoint entries overlap");
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

template <typename T>
void append_parameters(Checkpoint& ckpt, const diff::ParameterSet<T>& params) {
  for (const auto& [name, t] : params) {
    auto v = t.values();
    ckpt.entries.push_back({name, t.shape(), std::vector<float>(v.begin(), v.end())});
  }
}

template <typename T>
void restore_parameters(const Checkpoint& ckpt, diff::ParameterSet<T>& params) {
  for (auto& [name, t] : params) {
    const auto& e = ckpt.at(name);
    if (e.shape != t.shape()) {
      throw FormatError(name + ": stored shape " + diff::shape_str(e.shape) + ", expected " + diff::shape_str(t.shape()));
    }
    auto dst = t.mutable_values();
    std::copy(e.values.begin(), e.values.end(), dst.begin());
  }
}

template void append_parameters(Checkpoint&, const diff::ParameterSet<float>&);
template void append_parameters(Checkpoint&, const diff::ParameterSet<double>&);
template void restore_parameters(const Checkpoint&, diff::ParameterSet<float>&);
template void restore_parameters(const Checkpoint&, diff::ParameterSet<double>&);

}  // namespace iap
