#pragma once

// Checkpoint container:
//
//   u64 little-endian header length H
//   H bytes of JSON: {"tensors": {name: {"shape": [...], "dtype": "f32"|"f64",
//                     "offset": byte offset into the data section}},
//                     "metadata": {...}}
//   data section: raw little-endian values, tensors back to back.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "helm/errors.hpp"
#include "helm/io.hpp"
#include "helm/numerics/parameter_store.hpp"

namespace helm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct CheckpointEntry {
  Shape shape;
  std::string dtype;
  std::vector<double> values;
};

struct Checkpoint {
  std::map<std::string, CheckpointEntry> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    tensors[name] = CheckpointEntry{t.shape(), std::is_same_v<T, float> ? "f32" : "f64",
                                    std::vector<double>(t.storage().begin(), t.storage().end())};
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("checkpoint has no tensor " + name);
    return Tensor<T>(it->second.shape, std::vector<T>(it->second.values.begin(), it->second.values.end()));
  }

  template <typename T>
  void put_store(const ParameterStore<T>& store, const std::string& prefix = {}) {
    for (const auto& [name, t] : store) put(prefix + name, t);
  }

  /// Fill every entry of `store` from tensors named prefix + name; shapes must agree.
  template <typename T>
  void load_store(ParameterStore<T>& store, const std::string& prefix = {}) const {
    for (auto& [name, t] : store) {
      auto loaded = get<T>(prefix + name);
      if (loaded.shape() != t.shape()) {
        throw ValidationError("checkpoint shape mismatch for " + name + ": " + to_string(loaded.shape()) + " vs " +
                              to_string(t.shape()));
      }
      t = std::move(loaded);
    }
  }
};

namespace detail {

template <typename U>
void append_raw(std::string& out, const std::vector<double>& values) {
  for (double v : values) {
    const U x = static_cast<U>(v);
    char buf[sizeof(U)];
    std::memcpy(buf, &x, sizeof(U));
    out.append(buf, sizeof(U));
  }
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["tensors"] = nlohmann::json::object();
  std::string data;
  for (const auto& [name, e] : ck.tensors) {
    if (numel(e.shape) != e.values.size()) throw ValidationError("checkpoint entry " + name + " has wrong size");
    header["tensors"][name] = {{"shape", e.shape}, {"dtype", e.dtype}, {"offset", data.size()}};
    if (e.dtype == "f32")
      detail::append_raw<float>(data, e.values);
    else if (e.dtype == "f64")
      detail::append_raw<double>(data, e.values);
    else
      throw ValidationError("unsupported dtype " + e.dtype);
  }
  header["metadata"] = ck.metadata;
  const std::string h = header.dump();
  std::string out;
  const std::uint64_t len = h.size();
  char buf[8];
  std::memcpy(buf, &len, 8);
  out.append(buf, 8);
  out += h;
  out += data;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw ValidationError("checkpoint too short");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  if (len > bytes.size() - 8) throw ValidationError("checkpoint header length out of range");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t base = 8 + len;
  Checkpoint ck;
  if (header.contains("metadata")) ck.metadata = header["metadata"];
  for (const auto& [name, desc] : header.at("tensors").items()) {
    CheckpointEntry e;
    e.shape = desc.at("shape").get<Shape>();
    e.dtype = desc.at("dtype").get<std::string>();
    const std::size_t off = desc.at("offset").get<std::size_t>();
    const std::size_t width = e.dtype == "f32" ? 4 : e.dtype == "f64" ? 8 : 0;
    if (width == 0) throw ValidationError("unsupported dtype " + e.dtype);
    const std::size_t n = numel(e.shape);
    if (base + off + n * width > bytes.size()) throw ValidationError("checkpoint tensor " + name + " truncated");
    e.values.resize(n);
    const char* p = bytes.data() + base + off;
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 4) {
        float f;
        std::memcpy(&f, p + i * 4, 4);
        e.values[i] = f;
      } else {
        std::memcpy(&e.values[i], p + i * 8, 8);
      }
    }
    ck.tensors.emplace(name, std::move(e));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace helm
