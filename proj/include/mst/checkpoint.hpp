// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mst/config.hpp"
#include "mst/model.hpp"

namespace mst {

// Checkpoint layout (little-endian, all lengths u64 unless noted):
//   magic "MSTCKPT\0", u32 version, u32 element size (4 or 8)
//   str config text (format_config)
//   u64 step (completed steps), u64 adam step, f64 cumulative flops
//   u64 rng count, then that many str engine states
//   u64 param count, per param: str name, u64 rank, rank x u64 dims,
//       values, first moment, second moment (element-size floats each)
//   u64 mask count, per mask: str name, u64 rows, u64 cols, u64 word count, words
// where str = u64 length + bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string config_text;
  std::uint64_t step = 0;
  std::uint64_t adam_step = 0;
  double cum_flops = 0.0;
  std::vector<std::string> rng_states;
};

namespace ckpt {

inline void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_str(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
template <typename U>
void put_raw(std::ostream& os, const U* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(U)));
}

inline void get_bytes(std::istream& is, void* p, std::size_t n) {
  if (!is.read(static_cast<char*>(p), static_cast<std::streamsize>(n))) throw std::runtime_error("truncated checkpoint");
}
inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v;
  get_bytes(is, &v, 8);
  return v;
}
inline std::string get_str(std::istream& is) {
  const auto n = get_u64(is);
  if (n > (std::uint64_t{1} << 32)) throw std::runtime_error("corrupt checkpoint string length");
  std::string s(n, '\0');
  get_bytes(is, s.data(), n);
  return s;
}

inline std::uint32_t read_header(std::istream& is) {
  char magic[8];
  get_bytes(is, magic, 8);
  if (std::memcmp(magic, "MSTCKPT", 8) != 0) throw std::runtime_error("not a checkpoint file");
  std::uint32_t version, elem;
  get_bytes(is, &version, 4);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  get_bytes(is, &elem, 4);
  if (elem != 4 && elem != 8) throw std::runtime_error("bad checkpoint element size");
  return elem;
}

inline CheckpointMeta read_meta(std::istream& is) {
  CheckpointMeta m;
  m.config_text = get_str(is);
  m.step = get_u64(is);
  m.adam_step = get_u64(is);
  get_bytes(is, &m.cum_flops, 8);
  const auto nr = get_u64(is);
  for (std::uint64_t i = 0; i < nr; ++i) m.rng_states.push_back(get_str(is));
  return m;
}

}  // namespace ckpt

/// Writes to path + ".tmp" and renames, so an interrupted write never
/// replaces a good checkpoint.
template <typename T>
void save_checkpoint(const std::string& path, const Gpt<T>& model, const CheckpointMeta& meta) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write("MSTCKPT", 8);
    const std::uint32_t version = kCheckpointVersion, elem = sizeof(T);
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&elem), 4);
    ckpt::put_str(os, meta.config_text);
    ckpt::put_u64(os, meta.step);
    ckpt::put_u64(os, meta.adam_step);
    ckpt::put_raw(os, &meta.cum_flops, 1);
    ckpt::put_u64(os, meta.rng_states.size());
    for (const auto& s : meta.rng_states) ckpt::put_str(os, s);
    ckpt::put_u64(os, model.params().size());
    for (const auto& p : model.params()) {
      ckpt::put_str(os, p.name);
      ckpt::put_u64(os, p.value.rank());
      for (auto d : p.value.shape()) ckpt::put_u64(os, d);
      ckpt::put_raw(os, p.value.values().data(), p.value.size());
      ckpt::put_raw(os, p.m.data(), p.m.size());
      ckpt::put_raw(os, p.v.data(), p.v.size());
    }
    ckpt::put_u64(os, model.masks().size());
    for (const auto& m : model.masks()) {
      ckpt::put_str(os, m.name());
      ckpt::put_u64(os, m.rows());
      ckpt::put_u64(os, m.cols());
      ckpt::put_u64(os, m.words().size());
      ckpt::put_raw(os, m.words().data(), m.words().size());
    }
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Metadata only (config, counters, rng), without touching parameters.
inline CheckpointMeta peek_checkpoint(const std::string& path, std::uint32_t* element_size = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  const auto elem = ckpt::read_header(is);
  if (element_size) *element_size = elem;
  return ckpt::read_meta(is);
}

/// Restores parameters, moments and masks into a model built with the same
/// configuration. Shapes and names must match exactly.
template <typename T>
CheckpointMeta load_checkpoint(const std::string& path, Gpt<T>& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  if (ckpt::read_header(is) != sizeof(T)) throw std::runtime_error("checkpoint precision differs from model precision");
  CheckpointMeta meta = ckpt::read_meta(is);
  if (ckpt::get_u64(is) != model.params().size()) throw std::runtime_error("checkpoint parameter count differs");
  for (auto& p : model.params()) {
    if (ckpt::get_str(is) != p.name) throw std::runtime_error("checkpoint parameter order differs at " + p.name);
    const auto rank = ckpt::get_u64(is);
    Shape shape(rank);
    for (auto& d : shape) d = ckpt::get_u64(is);
    if (shape != p.value.shape()) throw std::runtime_error("checkpoint shape differs for " + p.name);
    ckpt::get_bytes(is, p.value.values().data(), p.value.size() * sizeof(T));
    ckpt::get_bytes(is, p.m.data(), p.m.size() * sizeof(T));
    ckpt::get_bytes(is, p.v.data(), p.v.size() * sizeof(T));
  }
  if (ckpt::get_u64(is) != model.masks().size()) throw std::runtime_error("checkpoint mask count differs");
  for (auto& m : model.masks()) {
    if (ckpt::get_str(is) != m.name()) throw std::runtime_error("checkpoint mask order differs at " + m.name());
    const auto rows = ckpt::get_u64(is), cols = ckpt::get_u64(is);
    if (rows != m.rows() || cols != m.cols()) throw std::runtime_error("checkpoint mask shape differs for " + m.name());
    std::vector<std::uint64_t> words(ckpt::get_u64(is));
    ckpt::get_bytes(is, words.data(), words.size() * 8);
    m.assign_words(words);
  }
  return meta;
}

}  // namespace mst
