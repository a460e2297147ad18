#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace prevsynth {

// splitmix64; used to decorrelate seeds derived from (base seed, stream index).
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic random stream. All samplers in the project draw through this
/// wrapper so that (seed, stream) fully determines every output.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : gen_(mix_seed(seed)) {}

  /// Derives an independent stream, e.g. one per chain or per data shard.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(mix_seed(seed) ^ mix_seed(stream * 0x9e3779b97f4a7c15ULL + 1));
  }

  /// Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (no cached spare, keeps the stream simple).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Index draw from an unnormalized weight vector.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("categorical: weights sum to zero");
    double u = uniform() * total;
    for (std::size_t k = 0; k + 1 < weights.size(); ++k) {
      u -= weights[k];
      if (u < 0.0) return k;
    }
    return weights.size() - 1;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Gamma(alpha, 1) for alpha >= 1 (Marsaglia-Tsang squeeze).
  double gamma(double alpha) {
    if (alpha < 1.0) throw std::invalid_argument("gamma: alpha must be >= 1");
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      const double x = normal();
      const double t = 1.0 + c * x;
      if (t <= 0.0) continue;
      const double v = t * t * t;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  /// Symmetric Dirichlet(alpha) draw.
  std::vector<double> dirichlet(std::size_t k, double alpha) {
    std::vector<double> x(k);
    double total = 0.0;
    for (double& v : x) {
      v = gamma(alpha);
      total += v;
    }
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < k; ++i) {
      x[i] /= total;
      acc += x[i];
    }
    x[k - 1] = 1.0 - acc;
    return x;
  }

  /// Exact Binomial(n, p) by trial counting. Observation counts in this
  /// project are small enough that the O(n) cost never matters.
  long binomial(long n, double p) {
    long y = 0;
    for (long i = 0; i < n; ++i) y += bernoulli(p) ? 1 : 0;
    return y;
  }

  /// Multinomial(n, probs) by repeated categorical draws.
  std::vector<long> multinomial(long n, std::span<const double> probs) {
    std::vector<long> counts(probs.size(), 0);
    for (long i = 0; i < n; ++i) ++counts[categorical(probs)];
    return counts;
  }

private:
  std::mt19937_64 gen_;
};

}  // namespace prevsynth
