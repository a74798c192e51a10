#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "cnc/error.hpp"

namespace cnc::binio {

// Little-endian scalar IO with byte offsets in error messages.

inline void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  out.write(b.data(), 4);
}

inline void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffU);
  out.write(b.data(), 8);
}

class Reader {
 public:
  Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw ParseError(what_ + ": truncated at byte offset " + std::to_string(offset_ + in_.gcount()));
    }
    offset_ += n;
  }

  void magic(const char (&expected)[5]) {
    std::array<char, 4> m{};
    const std::size_t at = offset_;
    bytes(m.data(), 4);
    for (int i = 0; i < 4; ++i) {
      if (m[i] != expected[i]) throw ParseError(what_ + ": bad magic at byte offset " + std::to_string(at));
    }
  }

  std::uint32_t u32() {
    std::array<unsigned char, 4> b{};
    bytes(reinterpret_cast<char*>(b.data()), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  double f64() {
    std::array<unsigned char, 8> b{};
    bytes(reinterpret_cast<char*>(b.data()), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(v);
  }

  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) {
      throw ParseError(what_ + ": trailing bytes at offset " + std::to_string(offset_));
    }
  }

  [[nodiscard]] std::size_t offset() const noexcept { return offset_; }
  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw ParseError(what_ + ": " + msg + " at byte offset " + std::to_string(at));
  }

 private:
  std::istream& in_;
  std::string what_;
  std::size_t offset_ = 0;
};

}  // namespace cnc::binio
