#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace sinkdoor {

// Independent random streams derived from one run seed. Each purpose gets
// its own generator so that, e.g., changing the data order never perturbs
// parameter initialization.
enum class Stream : std::uint64_t {
  kInit = 1,
  kData = 2,
  kPoison = 3,
  kRmu = 4,
  kCorpus = 5,
};

// Deterministic generator: std::mt19937_64 (bit-exact across standard
// libraries) seeded through SplitMix64 of (seed, stream). Distributions are
// implemented here rather than with <random>'s distribution classes, whose
// output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, Stream stream = Stream::kInit);

  std::uint64_t seed() const { return seed_; }
  Stream stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // A child generator for a sub-purpose, e.g. one per sweep entry.
  Rng fork(std::uint64_t salt) const;

 private:
  std::uint64_t seed_;
  Stream stream_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace sinkdoor
