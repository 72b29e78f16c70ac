#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace msf {

/// Independent, reproducible random stream identified by (seed, tag).
/// Different tags ("mask", "mso", "init", ...) under the same experiment seed
/// yield uncorrelated streams. Distribution helpers are implemented here
/// rather than via <random> distributions so results do not depend on the
/// standard library vendor.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream);

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). Requires n > 0.
  std::uint64_t below(std::uint64_t n);
  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t between(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p) { return uniform() < p; }

  static std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

 private:
  std::mt19937_64 engine_;
};

}  // namespace msf
