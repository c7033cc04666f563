// Counter-based random number generator (Philox4x32-10).
//
// Every draw is a pure function of (seed, stream, counter), so parallel
// workers can own disjoint streams and reproduce results independently of
// scheduling. Reference: Salmon et al., "Parallel Random Numbers: As Easy as
// 1, 2, 3" (SC 2011). Constants and round structure follow the original
// philox4x32 definition; a known-answer test pins the implementation.

#pragma once

#include <cmath>
#include <cstdint>

namespace cldlab {

struct PhiloxBlock {
  uint32_t x[4];
};

// One 10-round philox4x32 block. counter = (c0,c1,c2,c3), key = (k0,k1).
inline PhiloxBlock philox4x32_10(uint32_t c0, uint32_t c1, uint32_t c2,
                                 uint32_t c3, uint32_t k0, uint32_t k1) {
  constexpr uint32_t kMul0 = 0xD2511F53u;
  constexpr uint32_t kMul1 = 0xCD9E8D57u;
  constexpr uint32_t kW0 = 0x9E3779B9u;  // golden ratio
  constexpr uint32_t kW1 = 0xBB67AE85u;  // sqrt(3) - 1
  uint32_t x0 = c0, x1 = c1, x2 = c2, x3 = c3;
  for (int r = 0; r < 10; ++r) {
    const uint64_t p0 = uint64_t(kMul0) * x0;
    const uint64_t p1 = uint64_t(kMul1) * x2;
    const uint32_t hi0 = uint32_t(p0 >> 32), lo0 = uint32_t(p0);
    const uint32_t hi1 = uint32_t(p1 >> 32), lo1 = uint32_t(p1);
    const uint32_t y0 = hi1 ^ x1 ^ k0;
    const uint32_t y1 = lo1;
    const uint32_t y2 = hi0 ^ x3 ^ k1;
    const uint32_t y3 = lo0;
    x0 = y0;
    x1 = y1;
    x2 = y2;
    x3 = y3;
    k0 += kW0;
    k1 += kW1;
  }
  return PhiloxBlock{{x0, x1, x2, x3}};
}

// Stateful convenience wrapper around the stateless block function.
// (seed, stream) select the key/counter-prefix; draws consume the counter in
// order. Copying the object forks the exact draw position.
class CounterRng {
 public:
  CounterRng(uint64_t seed, uint64_t stream)
      : seed_(seed), stream_(stream), block_(0), pos_(4) {}

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }

  uint32_t next_u32() {
    if (pos_ == 4) refill();
    return buf_.x[pos_++];
  }

  uint64_t next_u64() {
    const uint64_t lo = next_u32();
    const uint64_t hi = next_u32();
    return lo | (hi << 32);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (lo, hi].
  double uniform_oc(double lo, double hi) {
    return hi - (hi - lo) * uniform();
  }

  // Standard normal via Box-Muller; second deviate cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1] keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  void fill_normal(double* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = normal();
  }

 private:
  void refill() {
    buf_ = philox4x32_10(uint32_t(block_), uint32_t(block_ >> 32),
                         uint32_t(stream_), uint32_t(stream_ >> 32),
                         uint32_t(seed_), uint32_t(seed_ >> 32));
    ++block_;
    pos_ = 0;
  }

  uint64_t seed_;
  uint64_t stream_;
  uint64_t block_;
  PhiloxBlock buf_{};
  int pos_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace cldlab
