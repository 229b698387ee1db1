#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace nmod {

/// 64-bit FNV-1a. Used wherever a portable, stable hash is needed
/// (instance-id seeding, parameter hashes); std::hash is not stable across
/// standard libraries.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes) noexcept {
    for (std::byte b : bytes) {
      state_ ^= static_cast<std::uint64_t>(b);
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view text) noexcept {
    update(std::as_bytes(std::span(text.data(), text.size())));
  }
  template <class T>
  void update_value(const T& value) noexcept {
    update(std::as_bytes(std::span(&value, 1)));
  }
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view text) noexcept {
  Fnv1a h;
  h.update(text);
  return h.digest();
}

/// splitmix64 finalizer; combines two seeds into a well-mixed one.
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// All library randomness goes through std::mt19937_64, whose output sequence
/// is fixed by the standard. Conversions to floats and bounded integers are
/// done here rather than with std distributions, which are
/// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform in [0, n). Modulo bias is below 2^-40 for the sizes used here.
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }
  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace nmod
