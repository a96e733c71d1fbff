#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace qlab {

// Deterministic counter-free generator built on splitmix64. Every consumer
// derives its own stream from (root seed, purpose tag, counters...), so any
// part of a run can be replayed in isolation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Standard normal via Box-Muller; one u64 pair per draw keeps the stream
  // position independent of how results are consumed.
  double normal() {
    double u1 = 1.0 - uniform01();  // (0, 1], log stays finite
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Uniform integer in [0, n). Multiply-shift map; bias is O(n / 2^64).
  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Hash-chain a path of tags into a fresh seed. Used for named substreams:
  // derive(seed, {kGroups, step, member}) etc.
  static std::uint64_t derive(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
    std::uint64_t h = root ^ 0x51afd54db5f86c21ULL;
    for (std::uint64_t tag : path) {
      h ^= tag + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      h *= 0xff51afd7ed558ccdULL;
      h ^= h >> 33;
    }
    return h;
  }

 private:
  std::uint64_t state_;
};

// Stream tags; values are arbitrary but frozen so run replays stay valid.
namespace stream {
inline constexpr std::uint64_t kInit = 1;        // parameter initialization
inline constexpr std::uint64_t kEnv = 2;         // environment dynamics/reset
inline constexpr std::uint64_t kAction = 3;      // behavior-policy noise
inline constexpr std::uint64_t kBatch = 4;       // minibatch sampling
inline constexpr std::uint64_t kGroups = 5;      // bootstrap group draws
inline constexpr std::uint64_t kSubset = 6;      // in-target M-subset draws
inline constexpr std::uint64_t kTargetNoise = 7; // next-action sampling in targets
inline constexpr std::uint64_t kDropout = 8;     // dropout masks
inline constexpr std::uint64_t kEval = 9;        // evaluation rollouts
inline constexpr std::uint64_t kWarmup = 10;     // uniform warmup actions
inline constexpr std::uint64_t kDiag = 11;       // diagnostics rollouts
}  // namespace stream

}  // namespace qlab
