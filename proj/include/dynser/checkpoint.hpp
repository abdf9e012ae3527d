#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynser/common.hpp"
#include "dynser/tensor.hpp"

namespace dynser {

// One named array in a checkpoint. `data` points at caller-owned storage.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  double* data = nullptr;
  std::int64_t size = 0;
};

inline CheckpointEntry checkpoint_entry(const std::string& name, Tensor& t) {
  return CheckpointEntry{name, t.shape(), t.data(), t.size()};
}

inline CheckpointEntry checkpoint_entry(const std::string& name,
                                        std::vector<double>& v) {
  return CheckpointEntry{name,
                         Shape{static_cast<std::int64_t>(v.size())},
                         v.data(),
                         static_cast<std::int64_t>(v.size())};
}

namespace ckpt_detail {

inline void write_f64_le(std::ofstream& out, const double* p, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(p[i]);
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
    out.write(reinterpret_cast<char*>(b), 8);
  }
}

inline void read_f64_le(std::ifstream& in, double* p, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
    p[i] = std::bit_cast<double>(bits);
  }
}

}  // namespace ckpt_detail

// File layout: one line of JSON (name/shape/offset per parameter plus caller
// metadata), then the flat payload of little-endian 64-bit floats. Offsets
// are element indices into the payload.
inline void save_checkpoint(const std::string& path,
                            const std::vector<CheckpointEntry>& entries,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["format"] = "dynser-checkpoint";
  header["version"] = 1;
  header["meta"] = meta;
  nlohmann::json params = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& e : entries) {
    params.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
    offset += e.size;
  }
  header["params"] = params;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out << header.dump() << "\n";
  for (const auto& e : entries) {
    ckpt_detail::write_f64_le(out, e.data, e.size);
  }
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline nlohmann::json read_checkpoint_header(std::ifstream& in,
                                             const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) {
    throw IoError("checkpoint: cannot read header from " + path);
  }
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "dynser-checkpoint") {
    throw UnsupportedFormatError("checkpoint: " + path +
                                 " is not a dynser checkpoint");
  }
  return header;
}

inline nlohmann::json peek_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  return read_checkpoint_header(in, path).value("meta", nlohmann::json::object());
}

// Fills the given entries in place from the file, matching by name and
// validating shapes. Returns the stored metadata.
inline nlohmann::json load_checkpoint(const std::string& path,
                                      const std::vector<CheckpointEntry>& entries) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  nlohmann::json header = read_checkpoint_header(in, path);
  const std::streampos payload_start = in.tellg();

  struct Stored {
    Shape shape;
    std::int64_t offset;
  };
  std::unordered_map<std::string, Stored> stored;
  for (const auto& p : header["params"]) {
    stored[p["name"].get<std::string>()] =
        Stored{p["shape"].get<Shape>(), p["offset"].get<std::int64_t>()};
  }
  for (const auto& e : entries) {
    auto it = stored.find(e.name);
    if (it == stored.end()) {
      throw DataError("checkpoint: " + path + " is missing parameter " + e.name);
    }
    if (it->second.shape != e.shape) {
      throw DimensionError("checkpoint: parameter " + e.name + " has shape " +
                           shape_str(it->second.shape) + ", expected " +
                           shape_str(e.shape));
    }
    in.seekg(payload_start + std::streampos(it->second.offset * 8));
    ckpt_detail::read_f64_le(in, e.data, e.size);
    if (!in) throw IoError("checkpoint: truncated payload in " + path);
  }
  return header.value("meta", nlohmann::json::object());
}

}  // namespace dynser
