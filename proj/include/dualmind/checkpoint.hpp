#pragma once
// Binary checkpoint container. Layout, all integers little-endian:
//   magic "DMCK" | version u32 | entry count u32 | entries...
// entry: name length u32, name bytes (UTF-8), dtype tag u8 (1=f32, 2=f64),
//        rank u8, extents u32[rank], payload (numel raw scalars).
// Round-trips are bit-exact; loading validates magic, version and dtype.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dualmind/autodiff.hpp"

namespace dm {

inline constexpr char checkpoint_magic[4] = {'D', 'M', 'C', 'K'};
inline constexpr std::uint32_t checkpoint_version = 1;

template <class S>
inline constexpr std::uint8_t dtype_tag() {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8, "unsupported scalar");
  return sizeof(S) == 4 ? 1 : 2;
}

namespace detail {

inline void put_u32(std::ostream& o, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  o.write(b, 4);
}
inline std::uint32_t get_u32(std::istream& i) {
  char b[4];
  i.read(b, 4);
  std::uint32_t v = 0;
  std::memcpy(&v, b, 4);
  return v;
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, tensor<S>>>& entries) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(bool(f), "save_checkpoint: cannot open " + path);
  f.write(checkpoint_magic, 4);
  detail::put_u32(f, checkpoint_version);
  detail::put_u32(f, std::uint32_t(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::put_u32(f, std::uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    const std::uint8_t tag = dtype_tag<S>();
    const std::uint8_t rank = std::uint8_t(t.rank());
    f.write(reinterpret_cast<const char*>(&tag), 1);
    f.write(reinterpret_cast<const char*>(&rank), 1);
    for (int i = 0; i < t.rank(); ++i) detail::put_u32(f, std::uint32_t(t.dim(i)));
    f.write(reinterpret_cast<const char*>(t.value().data()),
            std::streamsize(sizeof(S) * t.value().size()));
  }
  check(bool(f), "save_checkpoint: write failed for " + path);
}

template <class S>
std::map<std::string, tensor<S>> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(bool(f), "load_checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  check(bool(f) && std::memcmp(magic, checkpoint_magic, 4) == 0,
        "load_checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::get_u32(f);
  check(version == checkpoint_version,
        "load_checkpoint: unsupported version " + std::to_string(version) + " in " + path);
  const std::uint32_t count = detail::get_u32(f);
  std::map<std::string, tensor<S>> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = detail::get_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    std::uint8_t tag = 0, rank = 0;
    f.read(reinterpret_cast<char*>(&tag), 1);
    f.read(reinterpret_cast<char*>(&rank), 1);
    check(bool(f), "load_checkpoint: truncated entry header in " + path);
    check(tag == dtype_tag<S>(), "load_checkpoint: dtype tag " + std::to_string(int(tag)) +
                                     " of entry '" + name + "' does not match requested scalar");
    shape_t shape(rank);
    for (int i = 0; i < int(rank); ++i) shape[std::size_t(i)] = int(detail::get_u32(f));
    std::vector<S> data(std::size_t(shape_numel(shape)));
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(sizeof(S) * data.size()));
    check(bool(f), "load_checkpoint: truncated payload for entry '" + name + "' in " + path);
    out.emplace(name, tensor<S>::from(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace dm
