#pragma once

#include <cmath>
#include <cstdint>

namespace splatflow {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic across platforms and compilers; std:: distributions are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // decorrelate trivially related seeds
    splitmix64_next(state_);
  }

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // avoid log(0)
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Truncated normal, resampled until within [-2, 2] sigma.
  double trunc_normal(double stddev) {
    for (;;) {
      const double x = normal();
      if (std::abs(x) <= 2.0) return x * stddev;
    }
  }

  // Independent stream derived from this one's seed and a salt.
  Rng fork(std::uint64_t salt) const {
    std::uint64_t s = state_ ^ (0x9e3779b97f4a7c15ull * (salt + 1));
    return Rng(s);
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s, bool has_spare = false, double spare = 0.0) {
    state_ = s;
    has_spare_ = has_spare;
    spare_ = spare;
  }
  bool has_spare() const { return has_spare_; }
  double spare() const { return spare_; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace splatflow
