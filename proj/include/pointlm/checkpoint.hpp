#pragma once

// Flat binary container of named tensors. Exported parameter checkpoints use
// float32; full training state (parameters plus optimizer moments) is stored
// as float64 so a resumed run is bit-identical to an uninterrupted one.
//
// Layout (little-endian throughout):
//   magic "PLMT0001"
//   uint32 entry count
//   per entry: uint32 name length, name bytes, uint8 dtype (0=f32, 1=f64),
//              uint32 rows, uint32 cols, rows*cols data values

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pointlm/errors.hpp"
#include "pointlm/params.hpp"

namespace pointlm {

struct CheckpointEntry {
  std::string name;
  int rows = 0, cols = 0;
  bool f64 = false;
  std::vector<double> data;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'P', 'L', 'M', 'T', '0', '0', '0', '1'};

template <typename T>
void write_le(std::ofstream& out, T v) {
  // This library only targets little-endian hosts.
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated checkpoint: " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::vector<CheckpointEntry>& entries,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_le<uint32_t>(out, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.data.size() != static_cast<size_t>(e.rows) * e.cols)
      throw NumericError("checkpoint entry shape mismatch: " + e.name);
    detail::write_le<uint32_t>(out, static_cast<uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_le<uint8_t>(out, e.f64 ? 1 : 0);
    detail::write_le<uint32_t>(out, static_cast<uint32_t>(e.rows));
    detail::write_le<uint32_t>(out, static_cast<uint32_t>(e.cols));
    if (e.f64) {
      out.write(reinterpret_cast<const char*>(e.data.data()),
                static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    } else {
      for (double d : e.data) detail::write_le<float>(out, static_cast<float>(d));
    }
  }
  if (!out) throw DataError("write failure on checkpoint: " + path);
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw DataError("bad checkpoint magic: " + path);
  const uint32_t count = detail::read_le<uint32_t>(in, path);
  std::vector<CheckpointEntry> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const uint32_t name_len = detail::read_le<uint32_t>(in, path);
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    if (!in) throw DataError("truncated checkpoint: " + path);
    e.f64 = detail::read_le<uint8_t>(in, path) != 0;
    e.rows = static_cast<int>(detail::read_le<uint32_t>(in, path));
    e.cols = static_cast<int>(detail::read_le<uint32_t>(in, path));
    const size_t n = static_cast<size_t>(e.rows) * e.cols;
    e.data.resize(n);
    if (e.f64) {
      in.read(reinterpret_cast<char*>(e.data.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
      if (!in) throw DataError("truncated checkpoint: " + path);
    } else {
      for (size_t k = 0; k < n; ++k)
        e.data[k] = detail::read_le<float>(in, path);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// Exported parameter checkpoint (float32, the documented interchange format).
inline void save_params(const ParamStore& store, const std::string& path,
                        bool f64 = false) {
  std::vector<CheckpointEntry> entries;
  for (const auto& p : store.all())
    entries.push_back({p.name, p.t->rows, p.t->cols, f64, p.t->v});
  save_checkpoint(entries, path);
}

inline void load_params(ParamStore& store, const std::string& path) {
  std::map<std::string, const CheckpointEntry*> by_name;
  const auto entries = load_checkpoint(path);
  for (const auto& e : entries) by_name[e.name] = &e;
  for (const auto& p : store.all()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw DataError("checkpoint missing parameter " + p.name + ": " + path);
    const CheckpointEntry& e = *it->second;
    if (e.rows != p.t->rows || e.cols != p.t->cols)
      throw DataError("checkpoint shape mismatch for " + p.name + ": " + path);
    p.t->v = e.data;
  }
}

}  // namespace pointlm
