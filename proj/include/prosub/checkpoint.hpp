#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "prosub/errors.hpp"
#include "prosub/tensor.hpp"

namespace prosub {

// Checkpoints are a flat named-tensor table in a little-endian binary layout:
//   magic "PSCK" | u32 version | u64 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u64 dim per axis |
//               f32 data, row-major
// No timestamps or host-dependent fields: identical tensors produce identical
// bytes.

inline constexpr char kCkptMagic[4] = {'P', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCkptVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(path + ": truncated while reading " + std::string(what));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::map<std::string, Tensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(kCkptMagic, 4);
  detail::put<std::uint32_t>(out, kCkptVersion);
  detail::put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw DataError("short write to " + path);
}

inline std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw FormatError(path + ": not a checkpoint (bad magic)");
  auto version = detail::get<std::uint32_t>(in, path, "version");
  if (version != kCkptVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  auto count = detail::get<std::uint64_t>(in, path, "tensor count");
  std::map<std::string, Tensor> tensors;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name_len = detail::get<std::uint32_t>(in, path, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError(path + ": truncated while reading tensor name");
    auto rank = detail::get<std::uint32_t>(in, path, "rank");
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(detail::get<std::uint64_t>(in, path, "dimension"));
      numel *= static_cast<std::size_t>(d);
    }
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!in)
      throw FormatError(path + ": truncated while reading data of tensor '" + name + "'");
    tensors[name] = std::move(t);
  }
  return tensors;
}

}  // namespace prosub
