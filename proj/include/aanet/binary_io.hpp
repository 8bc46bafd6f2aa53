#pragma once

// Little-endian binary primitives shared by the FBNK, CRDM and dataset formats.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "aanet/error.hpp"
#include "aanet/numeric.hpp"

namespace aanet {

namespace io {

template <typename T>
void write_pod(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4];
  if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected ") + magic);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint32_t>(is);
  if (n > (1u << 20)) throw FormatError("string length out of range");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("unexpected end of file");
  return s;
}

inline void write_matrix_body(std::ostream& os, const Matrix& m) {
  for (double v : m.values()) write_pod<double>(os, v);
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  write_matrix_body(os, m);
}

inline Matrix read_matrix_body(std::istream& is, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = read_pod<double>(is);
  return m;
}

inline Matrix read_matrix(std::istream& is) {
  const auto r = read_pod<std::uint32_t>(is);
  const auto c = read_pod<std::uint32_t>(is);
  if (static_cast<std::uint64_t>(r) * c > (1ull << 28)) throw FormatError("matrix too large");
  return read_matrix_body(is, r, c);
}

}  // namespace io

}  // namespace aanet
