#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace ozlab {

// Philox4x32-10 counter-based generator. The key is the seed; the upper two
// counter words carry the stream id, so streams never overlap.
class Philox4x32 {
 public:
  using result_type = std::uint64_t;
  using Block = std::array<std::uint32_t, 4>;

  explicit Philox4x32(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  static Block block(Block ctr, std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int r = 0; r < 10; ++r) {
      if (r) key[0] += W0, key[1] += W1;
      const std::uint64_t p0 = std::uint64_t{M0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{M1} * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    }
    return ctr;
  }

  result_type operator()() {
    if (have_ == 0) refill();
    return buf_[--have_];
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  // Integer threshold such that (*this)() < t has probability p (up to 2^-64).
  static std::uint64_t threshold(double p) {
    if (!(p > 0.0)) return 0;
    if (p >= 1.0) return max();
    return static_cast<std::uint64_t>(std::ldexp(p, 64));
  }
  bool bernoulli_threshold(std::uint64_t t) { return t == max() || (*this)() < t; }
  bool bernoulli(double p) { return uniform() < p; }

  Philox4x32 split(std::uint64_t substream) const {
    return Philox4x32((std::uint64_t{key_[1]} << 32) | key_[0], stream_ * 0x9E3779B97F4A7C15ull + substream + 1);
  }

  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

 private:
  void refill() {
    const Block out = block({static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                             static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                            key_);
    ++counter_;
    // consumed back to front, so place the first word last
    buf_[1] = (std::uint64_t{out[1]} << 32) | out[0];
    buf_[0] = (std::uint64_t{out[3]} << 32) | out[2];
    have_ = 2;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint64_t, 2> buf_{};
  int have_ = 0;
};

using Rng = Philox4x32;

}  // namespace ozlab
