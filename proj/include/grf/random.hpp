#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace grf {

// splitmix64 finaliser; used to derive independent, schedule-free seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(base);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

// Stream tags for derive_seed.
namespace stream {
inline constexpr std::uint64_t dequant = 1;
inline constexpr std::uint64_t probe = 2;
inline constexpr std::uint64_t prior = 3;
inline constexpr std::uint64_t shuffle = 4;
inline constexpr std::uint64_t init = 5;
inline constexpr std::uint64_t select = 6;
}  // namespace stream

using Rng = std::mt19937_64;

// Uniform [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Marsaglia polar method on top of uniform01, so normal draws do not depend on
// the standard library's distribution implementation.
class NormalSampler {
 public:
  double operator()(Rng& rng) {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01(rng) - 1.0;
      v = 2.0 * uniform01(rng) - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

 private:
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace grf
