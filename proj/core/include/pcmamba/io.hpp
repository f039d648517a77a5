#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "pcmamba/tensor.hpp"

namespace pcm {

// Binary tensor container:
//   magic "PCTN" | u32 rank | u32 dims[rank] | u8 dtype (0=f32, 1=f64) | payload
// All integers and payload values are little-endian.

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor read: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
  put_u32_le(os, static_cast<std::uint32_t>(v));
  put_u32_le(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64_le(std::istream& is) {
  const std::uint64_t lo = get_u32_le(is);
  const std::uint64_t hi = get_u32_le(is);
  return lo | (hi << 32);
}

}  // namespace detail

template <typename T>
void save_tensor(std::ostream& os, const Tensor<T>& t) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  os.write("PCTN", 4);
  detail::put_u32_le(os, static_cast<std::uint32_t>(t.rank()));
  for (const auto d : t.shape()) detail::put_u32_le(os, static_cast<std::uint32_t>(d));
  const unsigned char dtype = std::is_same_v<T, float> ? 0 : 1;
  os.write(reinterpret_cast<const char*>(&dtype), 1);
  for (const T v : t.values()) {
    if constexpr (std::is_same_v<T, float>)
      detail::put_u32_le(os, std::bit_cast<std::uint32_t>(v));
    else
      detail::put_u64_le(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("tensor write: stream failure");
}

template <typename T>
Tensor<T> load_tensor(std::istream& is) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "PCTN")
    throw std::runtime_error("tensor read: bad magic (not a PCTN file)");
  const std::uint32_t rank = detail::get_u32_le(is);
  if (rank > 8) throw std::runtime_error("tensor read: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_u32_le(is);
  unsigned char dtype = 0xff;
  is.read(reinterpret_cast<char*>(&dtype), 1);
  if (!is || dtype > 1)
    throw std::runtime_error("tensor read: unknown dtype code " + std::to_string(dtype));
  const std::size_t n = numel(shape);
  std::vector<T> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    // files may hold either width; convert to the build's scalar (a float64
    // file read as float32 is downcast and loses precision)
    if (dtype == 0)
      values[i] = static_cast<T>(std::bit_cast<float>(detail::get_u32_le(is)));
    else
      values[i] = static_cast<T>(std::bit_cast<double>(detail::get_u64_le(is)));
  }
  return Tensor<T>::from(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("tensor write: cannot open " + path);
  save_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tensor read: cannot open " + path);
  return load_tensor<T>(is);
}

// Ordered line-oriented "key = value" text file; '#' starts a comment line.
class KvFile {
 public:
  void set(const std::string& key, const std::string& value);
  void set_num(const std::string& key, double value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_num(const std::string& key) const;
  double get_num_or(const std::string& key, double fallback) const;

  std::string serialize() const;
  static KvFile parse(const std::string& text);
  static KvFile load(const std::string& path);
  void save(const std::string& path) const;

  const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

 private:
  std::vector<std::pair<std::string, std::string>> items_;
};

}  // namespace pcm
