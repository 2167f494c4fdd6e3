#include "tokenprune/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace tokenprune {

std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose) {
  // FNV-1a over the base seed bytes followed by the purpose string.
  std::uint64_t h = 14695981039346656037ull;
  for (int i = 0; i < 8; ++i) {
    h ^= (base >> (8 * i)) & 0xff;
    h *= 1099511628211ull;
  }
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer to spread low-entropy purposes.
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

double Rng::uniform() {
  // 53 random bits -> [0, 1).
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int n) {
  if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<int>(x % bound);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::gamma(double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("Rng::gamma: alpha must be positive");
  if (alpha < 1.0) {
    const double u = std::max(uniform(), 1e-300);
    return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<double> Rng::dirichlet(int n, double alpha) {
  if (n <= 0) throw std::invalid_argument("Rng::dirichlet: n must be positive");
  std::vector<double> g(n);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    g[i] = gamma(alpha);
    sum += g[i];
  }
  if (sum <= 0.0) {
    // All draws underflowed (extremely small alpha); fall back to uniform.
    for (double& v : g) v = 1.0 / n;
    return g;
  }
  for (double& v : g) v /= sum;
  return g;
}

}  // namespace tokenprune
