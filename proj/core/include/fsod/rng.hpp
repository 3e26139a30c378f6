#pragma once

#include <cmath>
#include <cstdint>

namespace fsod {

// SplitMix64 generator. Hand-rolled so that streams are bit-identical across
// standard library implementations; every seeded component in the project
// draws from one of these.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is irrelevant at the scales used
  // here and keeps the stream layout simple.
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  // Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
  }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// Derives a child seed for a named sub-stream (dataset, init, batches, ...)
// so one experiment seed fans out without streams colliding.
inline uint64_t derive_seed(uint64_t root, uint64_t stream_id) {
  RngStream s(root ^ (0xA5A5A5A55A5A5A5Aull + stream_id * 0x9E3779B97F4A7C15ull));
  return s.next_u64();
}

}  // namespace fsod
