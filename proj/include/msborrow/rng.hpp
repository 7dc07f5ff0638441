#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace msborrow {

// splitmix64 step, used to mix seeds when deriving substreams.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Seedable random stream. All distributions are implemented on top of the
// raw engine so that a fixed seed yields the same draw sequence on any
// standard library. Each worker owns its own Rng; substreams are derived
// with derive(), never by sharing an engine across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Child stream for (this seed, stream id). Deterministic and independent
  // of the parent's position.
  Rng derive(std::uint64_t stream) const {
    return Rng(mix64(seed_ ^ mix64(stream + 0x51ed2701ULL)));
  }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1]; safe to pass to log().
  double uniform_pos() { return 1.0 - uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("rng: uniform_index with n = 0");
    // rejection to avoid modulo bias
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  double exponential() { return -std::log(uniform_pos()); }

  // Standard normal via Box-Muller (one value per call, deterministic).
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Gamma(shape, 1) by Marsaglia-Tsang, with the boost trick for shape < 1.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("rng: gamma shape must be positive");
    if (shape < 1.0) {
      const double u = uniform_pos();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  // Inverse-gamma with shape a and rate b (density ∝ x^{-a-1} e^{-b/x}).
  double inverse_gamma(double shape, double rate) {
    if (!(rate > 0.0)) throw std::invalid_argument("rng: inverse_gamma rate must be positive");
    return rate / gamma(shape);
  }

  // Flat Dirichlet over the n-simplex: normalized unit exponentials,
  // equivalent to the gaps of n-1 sorted uniforms.
  std::vector<double> dirichlet_flat(std::size_t n) {
    if (n == 0) throw std::invalid_argument("rng: dirichlet_flat with n = 0");
    std::vector<double> w(n);
    double total = 0.0;
    for (auto& v : w) {
      v = exponential();
      total += v;
    }
    for (auto& v : w) v /= total;
    return w;
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

}  // namespace msborrow
