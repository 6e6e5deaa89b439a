#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "fp/errors.hpp"

namespace fp {

// Little-endian primitives for the project's binary formats. All formats
// share the same byte-order marker so a file written on a big-endian host
// is rejected with a distinct error instead of being misread.
constexpr std::uint32_t kByteOrderMarker = 0x01020304u;

class BinWriter {
 public:
  explicit BinWriter(std::ostream& os) : os_(os) {}

  void u32(std::uint32_t x) { put_le(&x, 4); }
  void u64(std::uint64_t x) { put_le(&x, 8); }
  void f32(float x) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    u32(bits);
  }
  void f32_array(const double* data, std::size_t n) {
    buf_.resize(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
      const float f = static_cast<float>(data[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      buf_[i * 4 + 0] = static_cast<char>(bits & 0xFF);
      buf_[i * 4 + 1] = static_cast<char>((bits >> 8) & 0xFF);
      buf_[i * 4 + 2] = static_cast<char>((bits >> 16) & 0xFF);
      buf_[i * 4 + 3] = static_cast<char>((bits >> 24) & 0xFF);
    }
    os_.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  }
  void bytes(const void* data, std::size_t n) {
    os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  void put_le(const void* p, int n) {
    std::uint64_t x = 0;
    std::memcpy(&x, p, static_cast<std::size_t>(n));
    char b[8];
    for (int i = 0; i < n; ++i) b[i] = static_cast<char>((x >> (8 * i)) & 0xFF);
    os_.write(b, n);
  }
  std::ostream& os_;
  std::vector<char> buf_;
};

class BinReader {
 public:
  BinReader(std::istream& is, std::string context)
      : is_(is), context_(std::move(context)) {}

  std::uint32_t u32() {
    char b[4];
    get(b, 4);
    std::uint32_t x = 0;
    for (int i = 3; i >= 0; --i)
      x = (x << 8) | static_cast<std::uint8_t>(b[i]);
    return x;
  }
  std::uint64_t u64() {
    char b[8];
    get(b, 8);
    std::uint64_t x = 0;
    for (int i = 7; i >= 0; --i)
      x = (x << 8) | static_cast<std::uint8_t>(b[i]);
    return x;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  void f32_array(double* out, std::size_t n) {
    buf_.resize(n * 4);
    get(buf_.data(), buf_.size());
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 3; k >= 0; --k)
        bits = (bits << 8) |
               static_cast<std::uint8_t>(buf_[i * 4 + static_cast<std::size_t>(k)]);
      float f;
      std::memcpy(&f, &bits, 4);
      out[i] = static_cast<double>(f);
    }
  }
  std::string str(std::size_t max_len = 1 << 20) {
    const std::uint32_t n = u32();
    if (n > max_len) throw DataError(context_ + ": string length corrupt");
    std::string s(n, '\0');
    get(s.data(), n);
    return s;
  }
  void expect_magic(const char magic[4], const std::string& format) {
    char b[4];
    get(b, 4);
    if (std::memcmp(b, magic, 4) != 0)
      throw DataError(context_ + ": bad magic, not a " + format + " file");
  }
  std::uint32_t expect_version(std::uint32_t supported) {
    const std::uint32_t ver = u32();
    if (ver != supported)
      throw DataError(context_ + ": unsupported version " +
                      std::to_string(ver));
    return ver;
  }
  void expect_byte_order() {
    const std::uint32_t m = u32();
    if (m != kByteOrderMarker)
      throw DataError(context_ + ": byte-order flag mismatch");
  }

 private:
  void get(char* p, std::size_t n) {
    is_.read(p, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw DataError(context_ + ": truncated file");
  }
  std::istream& is_;
  std::string context_;
  std::vector<char> buf_;
};

// Writes via temp file + rename so readers never observe partial files.
void atomic_write_file(const std::string& path,
                       const std::function<void(std::ostream&)>& writer);

}  // namespace fp
