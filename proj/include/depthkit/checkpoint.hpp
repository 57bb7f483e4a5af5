#pragma once

// Flat binary snapshot format.
//
//   "YFCK"  magic
//   u32     format version (currently 1)
//   u64     step counter
//   u64     config blob length, then that many bytes of canonical JSON
//   u64     tensor count
//   per tensor: u16 name length, name bytes, u8 dtype (1 = f32, 2 = f64),
//               u8 rank, rank x u64 dims, u64 offset into the data section
//   u64     data section length, then the raw little-endian tensor bytes
//
// Tensors are written in the order given, which for a model snapshot is the
// allocation order plus optimizer moments.  Round-tripping is a byte copy, so
// loaded values are bit-identical to what was saved.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "depthkit/common.hpp"
#include "depthkit/tensor.hpp"

namespace depthkit {

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  if (!is) throw DataError("truncated checkpoint");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

template <typename S>
constexpr uint8_t dtype_code() {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8, "unsupported scalar");
  return sizeof(S) == 4 ? 1 : 2;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<S>>>& tensors,
                     uint64_t step, const std::string& config_json) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write("YFCK", 4);
  detail::write_pod<uint32_t>(os, 1);
  detail::write_pod<uint64_t>(os, step);
  detail::write_pod<uint64_t>(os, config_json.size());
  os.write(config_json.data(), std::streamsize(config_json.size()));
  detail::write_pod<uint64_t>(os, tensors.size());
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw DataError("tensor name too long: " + name);
    detail::write_pod<uint16_t>(os, uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::write_pod<uint8_t>(os, detail::dtype_code<S>());
    detail::write_pod<uint8_t>(os, uint8_t(t.rank()));
    for (int64_t d : t.shape()) detail::write_pod<uint64_t>(os, uint64_t(d));
    detail::write_pod<uint64_t>(os, offset);
    offset += uint64_t(t.numel()) * sizeof(S);
  }
  detail::write_pod<uint64_t>(os, offset);
  for (const auto& [name, t] : tensors) {
    os.write(reinterpret_cast<const char*>(t.data()),
             std::streamsize(size_t(t.numel()) * sizeof(S)));
  }
  if (!os) throw DataError("write failed for " + path);
}

template <typename S>
struct LoadedCheckpoint {
  std::vector<std::pair<std::string, Tensor<S>>> tensors;
  uint64_t step = 0;
  std::string config_json;

  const Tensor<S>& find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw DataError("checkpoint has no tensor named " + name);
  }
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "YFCK", 4) != 0) {
    throw DataError(path + " is not a checkpoint (bad magic)");
  }
  uint32_t version = detail::read_pod<uint32_t>(is);
  if (version != 1) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  LoadedCheckpoint<S> out;
  out.step = detail::read_pod<uint64_t>(is);
  uint64_t cfg_len = detail::read_pod<uint64_t>(is);
  out.config_json.resize(size_t(cfg_len));
  is.read(out.config_json.data(), std::streamsize(cfg_len));
  if (!is) throw DataError("truncated checkpoint");

  uint64_t count = detail::read_pod<uint64_t>(is);
  struct Entry {
    std::string name;
    std::vector<int64_t> shape;
    uint64_t offset;
  };
  std::vector<Entry> entries;
  entries.reserve(size_t(count));
  for (uint64_t i = 0; i < count; ++i) {
    Entry e;
    uint16_t name_len = detail::read_pod<uint16_t>(is);
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    uint8_t dtype = detail::read_pod<uint8_t>(is);
    if (dtype != detail::dtype_code<S>()) {
      throw DataError("dtype mismatch for tensor " + e.name);
    }
    uint8_t rank = detail::read_pod<uint8_t>(is);
    for (uint8_t r = 0; r < rank; ++r) {
      e.shape.push_back(int64_t(detail::read_pod<uint64_t>(is)));
    }
    e.offset = detail::read_pod<uint64_t>(is);
    entries.push_back(std::move(e));
  }
  uint64_t data_len = detail::read_pod<uint64_t>(is);
  std::vector<char> data(size_t(data_len), '\0');
  is.read(data.data(), std::streamsize(data_len));
  if (!is) throw DataError("truncated checkpoint data section");

  for (Entry& e : entries) {
    Tensor<S> t(e.shape);
    uint64_t bytes = uint64_t(t.numel()) * sizeof(S);
    if (e.offset + bytes > data_len) {
      throw DataError("tensor " + e.name + " overruns the data section");
    }
    std::memcpy(t.data(), data.data() + e.offset, size_t(bytes));
    out.tensors.emplace_back(std::move(e.name), std::move(t));
  }
  return out;
}

}  // namespace depthkit
