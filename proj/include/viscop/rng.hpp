#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "viscop/tensor.hpp"

namespace viscop {

/// xoshiro256** seeded through splitmix64. Every random draw in the project
/// goes through this type so runs are reproducible from a single seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller; no cached second variate.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent stream derived from this generator's seed and a label.
  [[nodiscard]] static Rng derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

/// Tensor with i.i.d. N(0, stddev^2) entries.
Tensor randn(Rng& rng, Shape shape, double stddev, bool requires_grad = false);
/// Tensor with i.i.d. U(-bound, bound) entries.
Tensor rand_uniform(Rng& rng, Shape shape, double bound, bool requires_grad = false);

}  // namespace viscop
