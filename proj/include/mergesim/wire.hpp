#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace mergesim {

struct TruncatedPayload : std::runtime_error {
  explicit TruncatedPayload(const std::string& what) : std::runtime_error(what) {}
};

struct BadMagic : std::runtime_error {
  BadMagic() : std::runtime_error("bad magic") {}
};

struct UnsupportedVersion : std::runtime_error {
  explicit UnsupportedVersion(std::uint16_t v)
      : std::runtime_error("unsupported format version " + std::to_string(v)) {}
};

/// Little-endian fixed-width byte writer.
class WireWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<std::byte>(v)); }

  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
  }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
  }

  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
  }

  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void bytes(const char* data, std::size_t n) {
    const auto* p = reinterpret_cast<const std::byte*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }

  const std::vector<std::byte>& buffer() const { return buf_; }
  std::vector<std::byte> take() { return std::move(buf_); }

 private:
  std::vector<std::byte> buf_;
};

/// Little-endian fixed-width byte reader over an external buffer.
class WireReader {
 public:
  WireReader(const std::byte* data, std::size_t size) : data_(data), size_(size) {}
  explicit WireReader(const std::vector<std::byte>& buf) : WireReader(buf.data(), buf.size()) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

  std::uint16_t u16() {
    const std::byte* p = take(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(p[i]) << (8 * i);
    return v;
  }

  std::uint32_t u32() {
    const std::byte* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const std::byte* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  void bytes(char* out, std::size_t n) { std::memcpy(out, take(n), n); }

  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::byte* take(std::size_t n) {
    if (pos_ + n > size_) throw TruncatedPayload("payload ends mid-field");
    const std::byte* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  const std::byte* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

} // namespace mergesim
