// SPDX-License-Identifier: Apache-2.0
//
// Shared error types, hashing and counter-based random helpers.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

namespace moce {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed input data (CSV rows, embedding files, configs).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Raised when tensor shapes are incompatible with an operation.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class IndexOutOfRange : public Error {
 public:
  using Error::Error;
};

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(std::string_view bytes,
                           std::uint64_t h = kFnvOffset) noexcept {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = kFnvOffset) noexcept {
  return fnv1a(std::string_view(static_cast<const char*>(data), n), h);
}

/// SplitMix64 finalizer; a good 64-bit mixer for combining hash inputs.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t seed,
                                     std::uint64_t v) noexcept {
  return mix64(seed ^ (v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2)));
}

/// Uniform double in the open interval (0, 1) derived from a 64-bit word.
constexpr double unit_open(std::uint64_t bits) noexcept {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard-normal variate that is a pure function of its counter tuple, so
/// noise is reproducible per (seed, step, sample, expert) without any state.
inline double counter_normal(std::uint64_t seed, std::uint64_t a,
                             std::uint64_t b, std::uint64_t c) noexcept {
  std::uint64_t k = hash_combine(hash_combine(hash_combine(mix64(seed), a), b), c);
  const double u1 = unit_open(mix64(k));
  const double u2 = unit_open(mix64(k ^ 0xd1b54a32d192ed03ULL));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Standard normal CDF. erfc keeps Phi(0) == 0.5 exactly.
inline double normal_cdf(double x) noexcept {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

inline double normal_pdf(double x) noexcept {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace moce
