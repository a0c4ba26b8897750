#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace infodrop {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Deterministic random stream. std::mt19937_64 output is fixed by the
// standard, and the uniform/normal transforms below are explicit, so the
// same (seed, call sequence) yields the same samples on every platform.
// std::normal_distribution is deliberately not used (its algorithm is
// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Number of raw 64-bit words consumed so far.
  std::uint64_t draws() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return engine_();
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // Modulo bias is < 2^-40 for the dataset-sized n used here.
    return n == 0 ? 0 : next_u64() % n;
  }

  // Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    // u1 in (0, 1] so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  // Independent child stream; distinct ids give decorrelated streams.
  Rng fork(std::uint64_t stream_id) const {
    return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(stream_id + 1)));
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace infodrop
