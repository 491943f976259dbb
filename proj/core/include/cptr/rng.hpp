#pragma once

#include <cmath>
#include <cstdint>

namespace cptr {

// Counter-based pseudo random generator built on the splitmix64 finalizer.
//
// The k-th draw of the stream with key K is
//     finalize(K + k * 0x9E3779B97F4A7C15)
// where finalize is the splitmix64 output function. State is just
// (key, counter), so streams can be saved, restored, and forked cheaply and
// every run is reproducible from the seed alone. The exact constants are
// documented in docs/formats.md; checkpoints persist (key, counter).
class CounterRng {
 public:
  CounterRng() : CounterRng(0) {}
  explicit CounterRng(uint64_t key, uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  // Independent substream derived from (seed, stream id).
  static CounterRng stream(uint64_t seed, uint64_t stream_id) {
    return CounterRng(finalize(seed ^ finalize(stream_id * 0xD1B54A32D192ED03ULL + 0x2545F4914F6CDD1DULL)));
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }

  uint64_t next_u64() {
    ++counter_;
    return finalize(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be positive.
  uint64_t next_below(uint64_t n) {
    // 64-bit multiply-shift; bias is negligible for the n used here.
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (two uniforms per draw, no caching so the
  // counter advances deterministically).
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Normal truncated to [-2, 2] standard deviations, then scaled.
  double next_trunc_normal(double stddev) {
    double z = next_normal();
    while (z < -2.0 || z > 2.0) z = next_normal();
    return z * stddev;
  }

  static uint64_t finalize(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  uint64_t key_;
  uint64_t counter_;
};

}  // namespace cptr
