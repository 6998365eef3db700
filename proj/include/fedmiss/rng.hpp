#pragma once

// Seedable, splittable random streams. A stream is identified by a root seed
// plus a list of labels (replication, site, purpose, ...); substreams are
// derived by hashing, so the draw sequence of (seed, labels...) never depends
// on what other streams did. That is what makes parallel replications
// bit-reproducible: each replication owns its streams outright.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace fedmiss {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (0x9E3779B97F4A7C15ull + b + (a << 6) + (a >> 2)));
}

}  // namespace detail

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(detail::splitmix64(seed)), engine_(state_) {}

  // Derived stream: deterministic in (this stream's identity, label), and
  // independent of how much either stream has been consumed.
  RngStream substream(std::uint64_t label) const {
    return RngStream(detail::mix(state_, label), 0);
  }
  RngStream substream(const std::string& label) const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : label) h = (h ^ c) * 1099511628211ull;
    return RngStream(detail::mix(state_, h), 0);
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double sd = 1.0) {
    // Fresh distribution object per call (no cached second variate), so the
    // output sequence is a pure function of the engine state.
    return mean + sd * std::normal_distribution<double>(0.0, 1.0)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  // Uniform pick from [0, n).
  std::size_t pick(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

 private:
  RngStream(std::uint64_t mixed, int) : state_(mixed), engine_(mixed) {}
  std::uint64_t state_;
  std::mt19937_64 engine_;
};

}  // namespace fedmiss
