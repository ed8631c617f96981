#ifndef PEMA_BINARY_IO_H
#define PEMA_BINARY_IO_H

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pema/errors.h"

// Little-endian primitives shared by the TPLM, PEMA and PADP file formats.

namespace pema::binio {

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw InputError("cannot open '" + path + "' for writing");
  }

  void magic(std::string_view m) { out_.write(m.data(), static_cast<std::streamsize>(m.size())); }
  void u8(std::uint8_t x) { put(x, 1); }
  void u16(std::uint16_t x) { put(x, 2); }
  void u32(std::uint32_t x) { put(x, 4); }
  void u64(std::uint64_t x) { put(x, 8); }
  void f32(float x) { u32(std::bit_cast<std::uint32_t>(x)); }

  template <typename T>
  void f32_block(std::span<const T> values) {
    std::vector<char> buf(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
      for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }

  void finish(const std::string& path) {
    out_.flush();
    if (!out_) throw InputError("write to '" + path + "' failed");
  }

 private:
  void put(std::uint64_t x, int bytes) {
    std::array<char, 8> buf{};
    for (int b = 0; b < bytes; ++b) buf[b] = static_cast<char>((x >> (8 * b)) & 0xff);
    out_.write(buf.data(), bytes);
  }

  std::ofstream out_;
};

// Sequential reader that reports the byte offset of any failure.
class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw InputError("cannot open '" + path + "' for reading");
  }

  std::uint64_t offset() const { return offset_; }

  void expect_magic(std::string_view m, std::string_view what) {
    std::string got(m.size(), '\0');
    read_exact(got.data(), got.size(), what);
    if (got != m) {
      throw FormatError(std::string(what) + ": bad magic, expected '" + std::string(m) + "'",
                        offset_ - m.size());
    }
  }

  std::uint8_t u8(std::string_view what) { return static_cast<std::uint8_t>(get(1, what)); }
  std::uint16_t u16(std::string_view what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(std::string_view what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(std::string_view what) { return get(8, what); }
  float f32(std::string_view what) { return std::bit_cast<float>(u32(what)); }

  void f32_block(std::span<float> out, std::string_view what) {
    std::vector<char> buf(out.size() * 4);
    read_exact(buf.data(), buf.size(), what);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = decode_f32(buf.data() + i * 4);
  }

  void f32_block(std::span<double> out, std::string_view what) {
    std::vector<char> buf(out.size() * 4);
    read_exact(buf.data(), buf.size(), what);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = decode_f32(buf.data() + i * 4);
  }

  // True when no bytes remain.
  bool at_end() {
    return in_.peek() == std::char_traits<char>::eof();
  }

 private:
  static float decode_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
    }
    return std::bit_cast<float>(bits);
  }

  std::uint64_t get(int bytes, std::string_view what) {
    std::array<char, 8> buf{};
    read_exact(buf.data(), static_cast<std::size_t>(bytes), what);
    std::uint64_t x = 0;
    for (int b = 0; b < bytes; ++b) {
      x |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
    }
    return x;
  }

  void read_exact(char* dst, std::size_t n, std::string_view what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::uint64_t>(in_.gcount());
    if (got != n) {
      throw FormatError("truncated file while reading " + std::string(what), offset_ + got);
    }
    offset_ += n;
  }

  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

}  // namespace pema::binio

#endif  // PEMA_BINARY_IO_H
