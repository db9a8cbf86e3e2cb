#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace portobello::bytes {

// Little-endian append/read helpers shared by the file formats and the wire codec.

template <typename U>
void put_uint(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
}

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u32(std::string& out, std::uint32_t v) { put_uint(out, v); }
inline void put_u64(std::string& out, std::uint64_t v) { put_uint(out, v); }
inline void put_f32(std::string& out, float v) { put_uint(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_uint(out, std::bit_cast<std::uint64_t>(v)); }

template <typename U>
U get_uint(std::string_view in, std::size_t at) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return v;
}

inline std::uint8_t get_u8(std::string_view in, std::size_t at) {
  return static_cast<std::uint8_t>(in[at]);
}
inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
  return get_uint<std::uint32_t>(in, at);
}
inline std::uint64_t get_u64(std::string_view in, std::size_t at) {
  return get_uint<std::uint64_t>(in, at);
}
inline float get_f32(std::string_view in, std::size_t at) {
  return std::bit_cast<float>(get_u32(in, at));
}
inline double get_f64(std::string_view in, std::size_t at) {
  return std::bit_cast<double>(get_u64(in, at));
}

/// Bounds-checked sequential reader. `on_short` is called with the failing
/// offset and must throw.
template <typename OnShort>
class Reader {
 public:
  Reader(std::string_view data, std::size_t pos, OnShort on_short)
      : data_(data), pos_(pos), on_short_(on_short) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void need(std::size_t n) {
    if (remaining() < n) on_short_(pos_, n);
  }
  std::uint8_t u8() { need(1); return get_u8(data_, pos_++); }
  std::uint32_t u32() { need(4); auto v = get_u32(data_, pos_); pos_ += 4; return v; }
  std::uint64_t u64() { need(8); auto v = get_u64(data_, pos_); pos_ += 8; return v; }
  float f32() { need(4); auto v = get_f32(data_, pos_); pos_ += 4; return v; }
  double f64() { need(8); auto v = get_f64(data_, pos_); pos_ += 8; return v; }
  std::string_view take(std::size_t n) {
    need(n);
    auto v = data_.substr(pos_, n);
    pos_ += n;
    return v;
  }

 private:
  std::string_view data_;
  std::size_t pos_;
  OnShort on_short_;
};

}  // namespace portobello::bytes
