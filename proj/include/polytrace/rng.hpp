#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "polytrace/common.hpp"

namespace polytrace {

// mt19937_64 with hand-rolled distributions. std:: distribution outputs are
// implementation-defined; these are pinned so seeded runs replay exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::int64_t below(std::int64_t n) {
    require(n > 0, "Rng::below: n must be positive");
    return static_cast<std::int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  bool coin(double p) { return uniform() < p; }

  // Box-Muller, one value per call (the pair's second half is discarded to
  // keep call sites order-independent).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    const std::int64_t n = last - first;
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = below(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace polytrace
