#pragma once

// BEVT tensor blob: "BEVT" magic, u32 rank, u32 dims, little-endian f32
// payload. Checkpoints are a pack of named blobs plus a text manifest.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bevflow/core/nn.hpp"
#include "bevflow/core/tensor.hpp"

namespace bevflow {

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(std::string("blob: truncated while reading ") + what + " at offset " +
                             std::to_string(static_cast<long long>(is.tellg())));
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

inline float get_f32(std::istream& is) {
  const uint32_t u = get_u32(is, "f32 payload");
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

template <typename T>
void write_bevt(std::ostream& os, const Tensor<T>& t) {
  os.write("BEVT", 4);
  detail::put_u32(os, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) detail::put_u32(os, static_cast<uint32_t>(t.dim(i)));
  for (int64_t i = 0; i < t.numel(); ++i) detail::put_f32(os, static_cast<float>(t[i]));
}

template <typename T>
Tensor<T> read_bevt(std::istream& is) {
  const auto at = is.tellg();
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "BEVT", 4) != 0)
    throw std::runtime_error("blob: bad BEVT magic at offset " + std::to_string(static_cast<long long>(at)));
  const uint32_t rank = detail::get_u32(is, "rank");
  if (rank > 8) throw std::runtime_error("blob: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(detail::get_u32(is, "dim"));
  const int64_t n = shape_numel(shape);
  typename Tensor<T>::Buffer data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = static_cast<T>(detail::get_f32(is));
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
void write_bevt_file(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("blob: cannot open " + path.string() + " for writing");
  write_bevt(os, t);
}

template <typename T>
Tensor<T> read_bevt_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("blob: cannot open " + path.string());
  return read_bevt<T>(is);
}

// ---------------------------------------------------------------------------
// checkpoints: <dir>/weights.pack + <dir>/manifest.txt

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamStore<T>& store) {
  std::filesystem::create_directories(dir);
  std::ofstream pack(dir / "weights.pack", std::ios::binary);
  std::ofstream man(dir / "manifest.txt");
  if (!pack || !man) throw std::runtime_error("checkpoint: cannot write into " + dir.string());
  for (const auto& name : store.names()) {
    const auto& t = store.get(name);
    detail::put_u32(pack, static_cast<uint32_t>(name.size()));
    pack.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_bevt(pack, t);
    man << name << '\t' << shape_str(t.shape()) << '\t' << store.role(name) << '\n';
  }
}

template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParamStore<T>& store) {
  std::ifstream pack(dir / "weights.pack", std::ios::binary);
  if (!pack) throw std::runtime_error("checkpoint: cannot open " + (dir / "weights.pack").string());
  size_t loaded = 0;
  while (pack.peek() != EOF) {
    const uint32_t len = detail::get_u32(pack, "param name length");
    std::string name(len, '\0');
    if (!pack.read(name.data(), len)) throw std::runtime_error("checkpoint: truncated param name");
    Tensor<T> t = read_bevt<T>(pack);
    if (!store.has(name))
      throw std::runtime_error("checkpoint: param '" + name + "' not present in model (manifest mismatch)");
    auto& dst = store.get(name);
    if (dst.shape() != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': model " + shape_str(dst.shape()) +
                               " vs file " + shape_str(t.shape()));
    std::copy(t.data(), t.data() + t.numel(), dst.data());
    ++loaded;
  }
  if (loaded != store.size())
    throw std::runtime_error("checkpoint: file has " + std::to_string(loaded) + " params, model expects " +
                             std::to_string(store.size()) + " (manifest mismatch)");
}

}  // namespace bevflow
