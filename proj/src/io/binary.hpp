#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "msif/common.hpp"

namespace msif::io {

static_assert(std::endian::native == std::endian::little,
              "binary containers are little-endian; add byte swapping for this host");

class BinaryWriter {
 public:
  template <typename T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void put_doubles(std::span<const double> xs) {
    const auto* p = reinterpret_cast<const char*>(xs.data());
    buf_.insert(buf_.end(), p, p + xs.size_bytes());
  }
  const std::vector<char>& bytes() const { return buf_; }

  /// Appends an FNV-1a checksum of everything written so far and writes the file.
  void write_file(const std::filesystem::path& path) {
    Fnv1a h;
    h.update(buf_.data(), buf_.size());
    put(h.digest());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open for writing: " + path.string());
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw InputError("write failed: " + path.string());
  }

 private:
  std::vector<char> buf_;
};

class BinaryReader {
 public:
  /// Reads the file and verifies the trailing checksum.
  explicit BinaryReader(const std::filesystem::path& path) : what_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open: " + what_);
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (buf_.size() < sizeof(std::uint64_t)) throw InputError("truncated file: " + what_);
    const std::size_t body = buf_.size() - sizeof(std::uint64_t);
    std::uint64_t stored = 0;
    std::memcpy(&stored, buf_.data() + body, sizeof stored);
    Fnv1a h;
    h.update(buf_.data(), body);
    if (h.digest() != stored) throw InputError("corrupt or truncated file (checksum mismatch): " + what_);
    end_ = body;
  }

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void get_doubles(std::span<double> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), buf_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  bool at_end() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw InputError("truncated file: " + what_);
  }
  std::string what_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

}  // namespace msif::io
