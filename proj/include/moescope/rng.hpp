#pragma once

#include <cstdint>

namespace moescope {

// Counter-based random stream: value i of stream s is a pure function of
// (s, i), so any draw can be replayed without replaying the ones before it.
// splitmix64 finalizer over the counter; passes basic equidistribution needs
// at this scale.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t bits(std::uint64_t counter) const {
    std::uint64_t z = seed_ + 0x9e3779b97f4a7c15ull * (counter + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in (0,1]; never returns 0 so it is safe under log().
  double uniform(std::uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(std::uint64_t counter, double lo, double hi) const {
    return lo + (hi - lo) * uniform(counter);
  }

  // Standard normal via Box-Muller; consumes two counter slots per value,
  // so draw index i maps to counters (2i, 2i+1).
  double normal(std::uint64_t index) const;

  std::uint64_t seed() const { return seed_; }

  // Child stream derivation for independent substreams.
  RandomStream child(std::uint64_t tag) const {
    return RandomStream(bits(0x5deece66dull ^ tag));
  }

 private:
  std::uint64_t seed_;
};

// Sequential convenience wrapper around a RandomStream.
class SequentialRng {
 public:
  explicit SequentialRng(std::uint64_t seed) : stream_(seed) {}
  explicit SequentialRng(RandomStream s) : stream_(s) {}

  double uniform() { return stream_.uniform(counter_++); }
  double uniform(double lo, double hi) { return stream_.uniform(counter_++, lo, hi); }
  double normal();  // Box-Muller over two sequential uniforms
  std::uint64_t bits() { return stream_.bits(counter_++); }
  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) { return bits() % n; }
  bool bernoulli(double p) { return uniform() <= p; }

 private:
  RandomStream stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace moescope
