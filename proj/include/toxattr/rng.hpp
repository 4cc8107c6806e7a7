#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace toxattr {

// Deterministic random source. All draws go through hand-rolled mappings on
// top of mt19937_64 so sequences are identical across standard libraries
// (std::uniform_real_distribution and std::shuffle are not portable).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

  std::uint64_t next() { return gen_(); }

  // Fisher-Yates, fixed draw order.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace toxattr
