// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "astro/data.hpp"
#include "astro/tensor.hpp"

namespace astro {

/// Checkpoint layout: "ASTR", version byte, u32 tensor count, then per tensor
/// u16 name length, UTF-8 name, u8 rank, u32 dims, little-endian values.
/// Version 1 stores 32-bit floats, version 2 stores 64-bit floats.
inline constexpr std::uint8_t kCheckpointF32 = 1;
inline constexpr std::uint8_t kCheckpointF64 = 2;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const NamedTensors<T>& tensors) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  constexpr bool wide = std::is_same_v<T, double>;
  std::vector<std::uint8_t> out{'A', 'S', 'T', 'R', wide ? kCheckpointF64 : kCheckpointF32};
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw DataError("tensor name too long: " + t.name.substr(0, 40));
    detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    const auto& s = t.tensor->shape();
    out.push_back(static_cast<std::uint8_t>(s.size()));
    for (auto d : s) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (auto v : t.tensor->data()) {
      if constexpr (wide) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
      } else {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        detail::put_u32(out, bits);
      }
    }
  }
  return out;
}

inline std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "ASTR")) throw ParseError("bad checkpoint magic", 0);
  const auto version = r.u8("version");
  if (version != kCheckpointF32 && version != kCheckpointF64)
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  const std::size_t count = r.u32("tensor count");
  std::vector<CheckpointEntry> out;
  for (std::size_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::size_t len = r.u16("name length");
    auto name = r.bytes(len, "name");
    e.name.assign(name.begin(), name.end());
    const std::size_t rank = r.u8("rank");
    for (std::size_t d = 0; d < rank; ++d) e.shape.push_back(r.u32("dim"));
    const std::size_t n = shape_numel(e.shape);
    const std::size_t width = version == kCheckpointF64 ? 8 : 4;
    if (r.remaining() / width < n) throw ParseError("truncated values of " + e.name, r.offset());
    e.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (version == kCheckpointF64) {
        auto b = r.bytes(8, "value");
        std::uint64_t bits = 0;
        for (int j = 7; j >= 0; --j) bits = (bits << 8) | b[static_cast<std::size_t>(j)];
        e.values[k] = std::bit_cast<double>(bits);
      } else {
        e.values[k] = static_cast<double>(std::bit_cast<float>(r.u32("value")));
      }
    }
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after last tensor", r.offset());
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const NamedTensors<T>& tensors) {
  detail::write_file(path, encode_checkpoint(tensors));
}

/// Copies stored values into `tensors`; names and shapes must match exactly.
template <class T>
void load_checkpoint_into(const std::string& path, const NamedTensors<T>& tensors) {
  const auto bytes = detail::read_file(path);
  const auto entries = decode_checkpoint(bytes);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  if (entries.size() != tensors.size())
    throw ShapeError(path + ": checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                     std::to_string(tensors.size()));
  for (const auto& t : tensors) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw ShapeError(path + ": tensor " + t.name + " missing from checkpoint");
    if (it->second->shape != t.tensor->shape())
      throw ShapeError(path + ": tensor " + t.name + " has shape " + to_string(it->second->shape) + ", model expects " +
                       to_string(t.tensor->shape()));
    for (std::size_t k = 0; k < t.tensor->size(); ++k) (*t.tensor)[k] = static_cast<T>(it->second->values[k]);
  }
}

}  // namespace astro
