#include "viscop/rng.hpp"

#include <cmath>
#include <numbers>

namespace viscop {

namespace {
constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) {
  std::uint64_t st = seed;
  for (auto& s : s_) s = splitmix64(st);
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t st = seed ^ (stream * 0xd1342543de82ef95ULL);
  return Rng(splitmix64(st) ^ stream);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  // Lemire-free rejection; n is always small here.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor randn(Rng& rng, Shape shape, double stddev, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor rand_uniform(Rng& rng, Shape shape, double bound, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * bound;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace viscop
