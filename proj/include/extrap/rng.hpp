#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace extrap {

// xoshiro256** seeded through SplitMix64. Streams are derived by hashing a
// key tuple, so (base_seed, cell, run, stream) always maps to the same
// sequence regardless of scheduling order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  static Rng keyed(std::uint64_t base_seed, std::initializer_list<std::uint64_t> keys);

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // N(0, 1), Box-Muller
  bool bernoulli(double p);
  std::size_t index(std::size_t n);      // uniform in [0, n)

  // Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream) const;

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(values[i - 1], values[j]);
    }
  }

  std::vector<double> normal_vector(std::size_t n);

 private:
  std::uint64_t s_[4];
  std::uint64_t origin_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace extrap
