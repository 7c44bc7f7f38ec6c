// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cstring>
#include <iterator>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dff/error.hpp"
#include "dff/tensor.hpp"

// On-disk layout shared by backbone weights, adapter checkpoints and corpora:
//
//   <compact JSON header, UTF-8, no newlines> '\n'
//   <payload: little-endian IEEE-754 float64, count given by the header>
//
// Tensor files list {"name", "shape"} entries in payload order.

namespace dff {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

using json = nlohmann::json;

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes) {
    for (std::byte b : bytes) {
      hash_ ^= static_cast<std::uint64_t>(b);
      hash_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(std::as_bytes(std::span<const char>(s.data(), s.size()))); }
  void update(std::span<const double> v) { update(std::as_bytes(v)); }

  std::uint64_t value() const { return hash_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_));
    return buf;
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

/// Digest of a JSON document in canonical form (sorted keys, compact).
inline std::string json_digest(const json& doc) {
  Fnv1a h;
  h.update(doc.dump());
  return h.hex();
}

struct Blob {
  json header;
  std::vector<double> payload;
};

inline void write_blob(const std::filesystem::path& path, const json& header, std::span<const double> payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string head = header.dump();
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.put('\n');
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size_bytes()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Blob read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string head;
  if (!std::getline(in, head)) throw IoError("missing header in " + path.string());
  Blob blob;
  try {
    blob.header = json::parse(head);
  } catch (const json::parse_error& e) {
    throw IoError("malformed header in " + path.string() + ": " + e.what());
  }
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (rest.size() % sizeof(double) != 0) throw IoError("truncated payload in " + path.string());
  blob.payload.resize(rest.size() / sizeof(double));
  std::memcpy(blob.payload.data(), rest.data(), rest.size());
  return blob;
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors, json meta = json::object()) {
  json header;
  header["format"] = "dff-tensors";
  header["version"] = 1;
  header["meta"] = std::move(meta);
  header["tensors"] = json::array();
  std::vector<double> payload;
  for (const auto& [name, t] : tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
    payload.insert(payload.end(), t.values().begin(), t.values().end());
  }
  write_blob(path, header, payload);
}

struct TensorFile {
  json meta;
  std::vector<NamedTensor> tensors;
};

inline TensorFile load_tensors(const std::filesystem::path& path) {
  Blob blob = read_blob(path);
  if (blob.header.value("format", "") != "dff-tensors") throw IoError(path.string() + " is not a tensor file");
  TensorFile file;
  file.meta = blob.header.value("meta", json::object());
  std::size_t offset = 0;
  for (const json& entry : blob.header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::size_t n = shape_size(shape);
    if (offset + n > blob.payload.size()) throw IoError("payload shorter than header in " + path.string());
    Buffer values(blob.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                               blob.payload.begin() + static_cast<std::ptrdiff_t>(offset + n));
    file.tensors.push_back({entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values))});
    offset += n;
  }
  if (offset != blob.payload.size()) throw IoError("payload longer than header in " + path.string());
  return file;
}

/// Copy values from `file` into `targets` by name; every target must be present with a matching shape.
inline void assign_tensors(const TensorFile& file, std::vector<NamedTensor>& targets, const std::string& what) {
  for (auto& [name, target] : targets) {
    auto it = std::find_if(file.tensors.begin(), file.tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
    if (it == file.tensors.end()) throw IoError(what + ": missing tensor " + name);
    if (it->tensor.shape() != target.shape()) {
      throw IoError(what + ": tensor " + name + " has shape " + to_string(it->tensor.shape()) + ", expected " +
                    to_string(target.shape()));
    }
    std::copy(it->tensor.values().begin(), it->tensor.values().end(), target.mutable_values().begin());
  }
  if (file.tensors.size() != targets.size()) throw IoError(what + ": unexpected extra tensors");
}

}  // namespace dff
