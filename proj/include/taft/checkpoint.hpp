#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "taft/errors.hpp"
#include "taft/parameter.hpp"

namespace taft {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'T', 'A', 'F', 'T'};

// Trainer bookkeeping stored after the parameter payload.
struct CheckpointMeta {
  uint64_t master_seed = 0;
  uint64_t episode_index = 0;
};

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 8);
}

inline void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline void get_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
}

inline uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

inline uint64_t get_u64(std::istream& is, const char* what) {
  uint64_t v = 0;
  unsigned char b[8];
  get_bytes(is, b, 8, what);
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

inline float get_f32(std::istream& is, const char* what) {
  const uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

template <class T>
void put_f32_array(std::ostream& os, const std::vector<T>& v) {
  for (const T x : v) put_f32(os, static_cast<float>(x));
}

template <class T>
void get_f32_array(std::istream& is, std::vector<T>& v, const char* what) {
  for (auto& x : v) x = static_cast<T>(get_f32(is, what));
}

}  // namespace detail

// Layout, all integers little-endian:
//   "TAFT" | u32 version | u32 param_count
//   per parameter: u32 name_len | name | u8 group | u8 ndim | u32 dims[ndim]
//   per parameter: f32 values[numel]
//   per parameter: f32 adam_m[numel] | f32 adam_v[numel] | u64 step_count
//   u64 master_seed | u64 episode_index
template <class T>
void save_checkpoint(const std::string& path, const ParameterStore<T>& store,
                     const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  detail::put_bytes(os, kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<uint32_t>(store.size()));
  for (const auto& p : store.items()) {
    detail::put_u32(os, static_cast<uint32_t>(p.name.size()));
    detail::put_bytes(os, p.name.data(), p.name.size());
    const unsigned char group = static_cast<unsigned char>(p.group);
    detail::put_bytes(os, &group, 1);
    const auto& shape = p.value.shape();
    const unsigned char ndim = static_cast<unsigned char>(shape.size());
    detail::put_bytes(os, &ndim, 1);
    for (const int64_t d : shape) detail::put_u32(os, static_cast<uint32_t>(d));
  }
  for (const auto& p : store.items()) detail::put_f32_array(os, p.value.data());
  for (const auto& p : store.items()) {
    detail::put_f32_array(os, p.adam_m);
    detail::put_f32_array(os, p.adam_v);
    detail::put_u64(os, static_cast<uint64_t>(p.step_count));
  }
  detail::put_u64(os, meta.master_seed);
  detail::put_u64(os, meta.episode_index);
  os.flush();
  if (!os) throw CheckpointError("write failed for checkpoint: " + path);
}

// Loads into a store with an identical manifest (same registration order,
// names, groups, and shapes); any mismatch is a hard error.
template <class T>
CheckpointMeta load_checkpoint(const std::string& path, ParameterStore<T>& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4];
  detail::get_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError("bad magic bytes in checkpoint: " + path);
  }
  const uint32_t version = detail::get_u32(is, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version) +
                                     " (want " + std::to_string(kCheckpointVersion) + "): " + path,
                                 version);
  }
  const uint32_t count = detail::get_u32(is, "parameter count");
  if (count != store.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(count) + " parameters, model has " +
                          std::to_string(store.size()));
  }
  for (const auto& p : store.items()) {
    const uint32_t name_len = detail::get_u32(is, "name length");
    std::string name(name_len, '\0');
    if (name_len > 0) detail::get_bytes(is, name.data(), name_len, "name");
    unsigned char group = 0, ndim = 0;
    detail::get_bytes(is, &group, 1, "group");
    detail::get_bytes(is, &ndim, 1, "ndim");
    Shape dims(ndim);
    for (auto& d : dims) d = static_cast<int>(detail::get_u32(is, "dim"));
    if (name != p.name || group != static_cast<unsigned char>(p.group) ||
        dims != p.value.shape()) {
      throw CheckpointError("checkpoint manifest entry '" + name +
                            "' does not match model parameter '" + p.name + "'");
    }
  }
  for (auto& p : store.items()) detail::get_f32_array(is, p.value.data(), "values");
  for (auto& p : store.items()) {
    detail::get_f32_array(is, p.adam_m, "adam m");
    detail::get_f32_array(is, p.adam_v, "adam v");
    p.step_count = static_cast<int64_t>(detail::get_u64(is, "step count"));
  }
  CheckpointMeta meta;
  meta.master_seed = detail::get_u64(is, "master seed");
  meta.episode_index = detail::get_u64(is, "episode index");
  is.peek();
  if (!is.eof()) throw CheckpointError("trailing bytes after checkpoint payload: " + path);
  return meta;
}

}  // namespace taft
