// Deterministic counter-based random streams.
//
// Every consumer derives its own stream from (global seed, purpose tag,
// index). Draw i of a stream depends only on the stream key and i, never on
// execution order or thread interleaving, so any run with the same seed is
// bit-reproducible.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace fpc {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

class RngStream {
 public:
  RngStream() : key_(0) {}

  static RngStream make(std::uint64_t seed, std::string_view tag,
                        std::uint64_t index) {
    RngStream s;
    std::uint64_t k = detail::splitmix64(seed ^ detail::fnv1a(tag));
    s.key_ = detail::splitmix64(k + index * detail::kGolden);
    return s;
  }

  // Child stream; lets one consumer hand independent streams to sub-parts.
  RngStream fork(std::uint64_t index) const {
    RngStream s;
    s.key_ = detail::splitmix64(key_ ^ (index + 1) * detail::kGolden);
    return s;
  }

  std::uint64_t next_u64() { return at_u64(counter_++); }

  // Order-independent access, used for dropout masks.
  std::uint64_t at_u64(std::uint64_t i) const {
    return detail::splitmix64(key_ + i * detail::kGolden);
  }

  // Uniform in [0, 1).
  double uniform() { return to_unit(next_u64()); }

  double uniform_at(std::uint64_t i) const { return to_unit(at_u64(i)); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Normal resampled into [-2, 2], the usual truncation for weight init.
  double truncated_normal() {
    for (;;) {
      double z = normal();
      if (z >= -2.0 && z <= 2.0) return z;
    }
  }

 private:
  static double to_unit(std::uint64_t v) {
    return static_cast<double>(v >> 11) * 0x1.0p-53;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace fpc
