#pragma once

// Portable seeded randomness: xoshiro256** seeded through splitmix64, with
// the distributions written out so that generated traces are bit-identical
// across standard library implementations.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <initializer_list>
#include <utility>
#include <vector>

namespace moediag {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a root seed and a path of ids.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t s = splitmix64(root);
  for (auto p : path) s = splitmix64(s ^ splitmix64(p + 0x632BE59BD9B4E019ull));
  return s;
}

namespace detail {

// 256-level ziggurat tables for the standard exponential.
struct ExpZiggurat {
  static constexpr double kR = 7.697117470131487;
  static constexpr double kV = 3.949659822581572e-3;
  std::uint32_t k[256];
  double w[256];
  double f[256];

  ExpZiggurat() {
    constexpr double m = 4294967296.0;
    double d = kR, t = kR;
    const double q = kV / std::exp(-d);
    k[0] = static_cast<std::uint32_t>((d / q) * m);
    k[1] = 0;
    w[0] = q / m;
    w[255] = d / m;
    f[0] = 1.0;
    f[255] = std::exp(-d);
    for (int i = 254; i >= 1; --i) {
      d = -std::log(kV / d + std::exp(-d));
      k[i + 1] = static_cast<std::uint32_t>((d / t) * m);
      t = d;
      f[i] = std::exp(-d);
      w[i] = d / m;
    }
  }

  static const ExpZiggurat& get() {
    static const ExpZiggurat z;
    return z;
  }
};

}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    for (auto& w : state_) {
      seed += 0x9E3779B97F4A7C15ull;
      w = splitmix64(seed - 0x9E3779B97F4A7C15ull);
    }
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1].
  double uniform_pos() { return 1.0 - uniform(); }

  // Uniform integer in [0, n), rejection sampled.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t x;
    do x = next_u64();
    while (x >= limit);
    return x % n;
  }

  // Standard exponential by the Marsaglia-Tsang ziggurat.
  double exponential() { return exponential_with(detail::ExpZiggurat::get()); }

  // Fills `out` with standard exponentials and returns their sum.
  double fill_exponential(std::span<double> out) {
    const auto& z = detail::ExpZiggurat::get();
    double sum = 0.0;
    for (auto& x : out) sum += x = exponential_with(z);
    return sum;
  }

  // Standard normal via the Box-Muller transform (one value per call).
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Gamma(shape, 1) by Marsaglia-Tsang, with the U^(1/a) boost for a < 1.
  double gamma(double shape) {
    if (shape <= 0.0) return 0.0;
    if (shape == 1.0) return exponential();
    if (shape < 1.0) return gamma(shape + 1.0) * std::pow(uniform_pos(), 1.0 / shape);
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    while (true) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  [[gnu::always_inline]] double exponential_with(const detail::ExpZiggurat& z) {
    const std::uint64_t u = next_u64();
    const std::size_t i = u & 0xFF;
    const std::uint32_t j = static_cast<std::uint32_t>(u >> 32);
    if (j < z.k[i]) [[likely]]
      return j * z.w[i];
    return exponential_tail(z, i, j);
  }

  [[gnu::noinline]] double exponential_tail(const detail::ExpZiggurat& z, std::size_t i, std::uint32_t j) {
    while (true) {
      if (i == 0) return detail::ExpZiggurat::kR - std::log(uniform_pos());
      const double x = j * z.w[i];
      if (z.f[i] + uniform() * (z.f[i - 1] - z.f[i]) < std::exp(-x)) return x;
      const std::uint64_t u = next_u64();
      i = u & 0xFF;
      j = static_cast<std::uint32_t>(u >> 32);
      if (j < z.k[i]) return j * z.w[i];
    }
  }

  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  std::uint64_t state_[4];
};

}  // namespace moediag
