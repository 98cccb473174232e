// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor records:
//   "FTPT" | version u32 | rank u32 | extents u64[rank] | f64 payload
// All integers and floats are little-endian.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "ftp/tensor.hpp"

namespace ftp {

inline constexpr std::array<char, 4> kTensorMagic{'F', 'T', 'P', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw IoError("unexpected end of tensor stream");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  detail::write_le<std::uint32_t>(os, kTensorFormatVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) detail::write_le<std::uint64_t>(os, e);
  for (double v : t.values()) detail::write_le<double>(os, v);
  if (!os) throw IoError("failed writing tensor record");
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kTensorMagic) {
    throw IoError("bad tensor magic");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kTensorFormatVersion) {
    throw IoError("unsupported tensor format version " + std::to_string(version));
  }
  const auto rank = detail::read_le<std::uint32_t>(is);
  if (rank == 0 || rank > 8) throw IoError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
    if (e == 0 || e > (std::size_t{1} << 32)) throw IoError("implausible tensor extent");
  }
  std::vector<double> values(shape_size(shape));
  for (auto& v : values) v = detail::read_le<double>(is);
  return Tensor(std::move(shape), std::move(values));
}

/// 64-bit FNV-1a. Used as the content hash for artifacts.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace ftp
