#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evspike/error.hpp"

namespace evspike {

/// Little-endian append-only byte sink.
class ByteWriter {
public:
  void put_u8(std::uint8_t v) { buf_.push_back(v); }
  void put_u16(std::uint16_t v) { put_le(v, 2); }
  void put_u32(std::uint32_t v) { put_le(v, 4); }
  void put_u64(std::uint64_t v) { put_le(v, 8); }
  void put_i8(std::int8_t v) { put_u8(static_cast<std::uint8_t>(v)); }
  void put_i32(std::int32_t v) { put_u32(static_cast<std::uint32_t>(v)); }
  void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }
  void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void put_string(std::string_view s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }

  std::size_t size() const noexcept { return buf_.size(); }
  std::vector<std::uint8_t>& buffer() noexcept { return buf_; }
  std::vector<std::uint8_t> take() noexcept { return std::move(buf_); }

private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader; every short read raises
/// TruncationError carrying the offset where the read started.
class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t get_u8(const char* what) { return static_cast<std::uint8_t>(get_le(1, what)); }
  std::uint16_t get_u16(const char* what) { return static_cast<std::uint16_t>(get_le(2, what)); }
  std::uint32_t get_u32(const char* what) { return static_cast<std::uint32_t>(get_le(4, what)); }
  std::uint64_t get_u64(const char* what) { return get_le(8, what); }
  std::int8_t get_i8(const char* what) { return static_cast<std::int8_t>(get_u8(what)); }
  std::int32_t get_i32(const char* what) { return static_cast<std::int32_t>(get_u32(what)); }
  float get_f32(const char* what) { return std::bit_cast<float>(get_u32(what)); }
  double get_f64(const char* what) { return std::bit_cast<double>(get_u64(what)); }

  std::string get_bytes(std::size_t n, const char* what) {
    require(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string get_string(const char* what) {
    const auto n = get_u32(what);
    return get_bytes(n, what);
  }

  void require(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw TruncationError(std::string("truncated ") + what, pos_);
    }
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

private:
  std::uint64_t get_le(int n, const char* what) {
    require(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);

/// Writes via a sibling temporary file and rename, so readers never observe a
/// partially written file.
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::string& path, std::string_view text);

}  // namespace evspike
