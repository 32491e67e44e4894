#pragma once

// Little-endian scalar encoding shared by the flow and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "locfuse/error.hpp"

namespace locfuse::binary {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void magic(std::string_view tag) { out_.write(tag.data(), std::streamsize(tag.size())); }
  void u8(std::uint8_t v) { out_.put(char(v)); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(std::uint32_t(s.size()));
    out_.write(s.data(), std::streamsize(s.size()));
  }

 private:
  template <typename T>
  void put_le(T v) {
    char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = char((v >> (8 * i)) & 0xff);
    out_.write(bytes, sizeof(T));
  }

  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  void expect_magic(std::string_view tag) {
    std::string got(tag.size(), '\0');
    in_.read(got.data(), std::streamsize(got.size()));
    if (!in_ || got != tag) fail(ErrorCode::kIo, source_ + ": bad magic, expected " + std::string(tag));
  }
  std::uint8_t u8() {
    char c;
    if (!in_.get(c)) truncated();
    return std::uint8_t(c);
  }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  std::string str(std::uint32_t max_len = 1u << 16) {
    const auto n = u32();
    if (n > max_len) fail(ErrorCode::kIo, source_ + ": string too long");
    std::string s(n, '\0');
    in_.read(s.data(), std::streamsize(n));
    if (!in_) truncated();
    return s;
  }

 private:
  template <typename T>
  T get_le() {
    unsigned char bytes[sizeof(T)];
    in_.read(reinterpret_cast<char*>(bytes), sizeof(T));
    if (!in_) truncated();
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(bytes[i]) << (8 * i);
    return v;
  }
  [[noreturn]] void truncated() { fail(ErrorCode::kIo, source_ + ": truncated file"); }

  std::istream& in_;
  std::string source_;
};

}  // namespace locfuse::binary
