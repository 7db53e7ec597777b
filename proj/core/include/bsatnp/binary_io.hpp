#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "bsatnp/errors.hpp"

// Little-endian primitives shared by the checkpoint and task file formats.
namespace bsatnp::binio {

template <typename U>
void put_uint(std::ostream& out, U v) {
  char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, sizeof(U));
}

template <typename U>
U get_uint(std::istream& in, const char* what) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw FormatError(std::string("truncated file reading ") + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void put_f32(std::ostream& out, float v) { put_uint<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v)); }

inline float get_f32(std::istream& in, const char* what) {
  return std::bit_cast<float>(get_uint<std::uint32_t>(in, what));
}

inline void put_string(std::ostream& out, const std::string& s) {
  put_uint<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, const char* what, std::uint64_t limit = 1u << 26) {
  const auto n = get_uint<std::uint64_t>(in, what);
  if (n > limit) throw FormatError(std::string("implausible length reading ") + what);
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError(std::string("truncated file reading ") + what);
  return s;
}

inline void expect_magic(std::istream& in, const std::string& magic, const char* what) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(magic.size())) || got != magic) {
    throw FormatError(std::string("not a ") + what + " (bad magic)");
  }
}

}  // namespace bsatnp::binio
