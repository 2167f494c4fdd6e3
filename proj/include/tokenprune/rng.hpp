#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace tokenprune {

// Derives a child seed from (base, purpose) so every component draws from its
// own stream while all randomness still flows from one top-level seed.
std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose);

// mt19937_64 with hand-rolled distributions. The standard pins the engine's
// output bit-for-bit; std::*_distribution does not, so the samplers here are
// written out to keep (config, seed) -> bit-identical results across builds.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer on [0, n).
  int uniform_int(int n);

  // Standard normal (Box-Muller, cached spare).
  double normal();

  // Gamma(alpha, 1) via Marsaglia-Tsang; alpha < 1 handled by boosting.
  double gamma(double alpha);

  // Symmetric Dirichlet over n components; entries sum to 1.
  std::vector<double> dirichlet(int n, double alpha);

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tokenprune
