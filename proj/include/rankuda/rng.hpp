#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace rankuda {

// Seeded random source with stable output across platforms. The mt19937_64
// engine itself is fully specified by the standard; only the <random>
// distributions are implementation-defined, so the mappings to doubles are
// done by hand here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Uniform integer in [0, n). Lemire-style reduction; the bias at 64 bits
  // is far below anything observable here.
  std::int64_t below(std::int64_t n) {
    return static_cast<std::int64_t>(
        (static_cast<unsigned __int128>(next_u64()) *
         static_cast<unsigned __int128>(n)) >>
        64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      const std::int64_t j = below(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  // Independent stream derived from a label; used so that pipeline stages
  // consume randomness independently of each other (resume-safe).
  Rng fork(std::uint64_t stream) const {
    std::uint64_t x = base_seed_mix_ ^ (stream + 0x9e3779b97f4a7c15ull);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return Rng(x);
  }

  void set_stream_base(std::uint64_t base) { base_seed_mix_ = base; }

 private:
  std::mt19937_64 engine_;
  std::uint64_t base_seed_mix_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Convenience: stream Rng derived directly from (seed, label).
inline Rng stream_rng(std::uint64_t seed, std::uint64_t stream) {
  Rng r(seed);
  r.set_stream_base(seed);
  return r.fork(stream);
}

}  // namespace rankuda
