#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace msif {

/// Malformed user input: bad token ids, empty queries, missing files.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values, divergence, failed factorizations.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated preconditions between components (shape, stage, fingerprint).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Rng = std::mt19937_64;

enum class Stage : std::uint8_t { pretrained = 0, finetuned = 1 };

inline const char* stage_name(Stage s) {
  return s == Stage::pretrained ? "pt" : "ft";
}

// FNV-1a; stable across platforms, used for fingerprints and config hashes.
class Fnv1a {
 public:
  /// FNV-1a over little-endian 64-bit words, then the trailing bytes.
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
      std::uint64_t w;
      std::memcpy(&w, p + i, 8);
      state_ ^= w;
      state_ *= 0x100000001b3ULL;
    }
    for (; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <typename T>
  void update_value(const T& v) {
    update(&v, sizeof(T));
  }
  void update(std::span<const double> xs) { update(xs.data(), xs.size_bytes()); }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

/// Independent seed for a named sub-stream (splitmix64 of base and stream).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace msif
