#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddist {

inline constexpr const char* kVersion = "0.1.0";

// All recoverable failures surface as ddist::Error with a short machine-greppable
// prefix in the message ("corpus:", "model:", "loss:", ...).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Deterministic RNG. We generate uniforms and normals ourselves instead of going
// through std::*_distribution so that draw counts per call are fixed and the
// bit stream is stable across standard library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  // splitmix64
  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    require(n > 0, "rng: uniform_int bound must be positive");
    return next_u64() % n;
  }

  // standard normal, Box-Muller; always consumes exactly two uniforms
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Derive an independent stream; used to give each pipeline stage its own rng.
  Rng fork(std::uint64_t tag) {
    Rng r(next_u64() ^ (tag * 0xd1342543de82ef95ULL + 1));
    return r;
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// FNV-1a, used for config digests in provenance records and rng-state digests
// in train logs.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace ddist
