#pragma once

// Little-endian binary file helpers. Integers are serialized byte-by-byte so
// the on-disk format does not depend on host endianness.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ac/errors.hpp"

namespace ac {

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Storage, "cannot open for writing: " + path);
  return f;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Storage, "cannot open for reading: " + path);
  return f;
}

inline void write_bytes(std::ofstream& f, const void* data, size_t n) {
  f.write(reinterpret_cast<const char*>(data), std::streamsize(n));
  if (!f) fail(ErrorKind::Storage, "write failed");
}

inline void read_bytes(std::ifstream& f, void* data, size_t n, const char* what) {
  f.read(reinterpret_cast<char*>(data), std::streamsize(n));
  if (size_t(f.gcount()) != n)
    fail(ErrorKind::Format, std::string("truncated file while reading ") + what);
}

template <typename T>
void write_le(std::ofstream& f, T v) {
  uint8_t buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = uint8_t((uint64_t(v) >> (8 * i)) & 0xFF);
  write_bytes(f, buf, sizeof(T));
}

template <typename T>
T read_le(std::ifstream& f, const char* what) {
  uint8_t buf[sizeof(T)];
  read_bytes(f, buf, sizeof(T), what);
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t(buf[i]) << (8 * i);
  return T(v);
}

// IDX headers are big-endian.
inline uint32_t read_be_u32(std::ifstream& f, const char* what) {
  uint8_t buf[4];
  read_bytes(f, buf, 4, what);
  return (uint32_t(buf[0]) << 24) | (uint32_t(buf[1]) << 16) | (uint32_t(buf[2]) << 8) |
         uint32_t(buf[3]);
}

inline uint64_t file_size(std::ifstream& f) {
  const auto pos = f.tellg();
  f.seekg(0, std::ios::end);
  const auto end = f.tellg();
  f.seekg(pos);
  return uint64_t(end);
}

}  // namespace ac
