#pragma once

// Little-endian primitives shared by the OFB field format and the
// checkpoint container.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kp::io {

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void bytes(const std::string& s) { raw(s.data(), s.size()); }
  void f32(const float* data, std::size_t n) { raw(data, n * sizeof(float)); }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  // Writes to a temporary then renames, so readers never see a partial file.
  void commit(const std::string& path) const;

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& path);
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    take(&v, sizeof v, what);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    take(s.data(), n, what);
    return s;
  }
  void f32(float* out, std::size_t n, const char* what) { take(out, n * sizeof(float), what); }
  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return data_.size() - pos_; }

 private:
  void take(void* out, std::size_t n, const char* what) {
    if (n > remaining()) {
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::vector<char> data_;
  std::uint64_t pos_ = 0;
};

}  // namespace kp::io
