#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "ldseg/tensor.hpp"

namespace ldseg {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

// Deterministic random stream addressed by (seed, stream id). Identical ids
// reproduce identical draw sequences; distinct ids decorrelate via splitmix
// seeding of the underlying mt19937_64. All distributions are hand-rolled on
// top of the raw 64-bit output so sequences do not depend on the standard
// library's distribution implementations.
class RngStream {
public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream), gen_(detail::splitmix64(detail::splitmix64(seed) ^ (stream + 0x51ab5ULL))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds, unbiased via rejection
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit range
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  bool bernoulli(double p = 0.5) { return uniform() < p; }

  // Marsaglia polar method; avoids trig so the sequence depends only on the
  // generator bits, sqrt and log.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename S>
  void fill_normal(TensorT<S>& t, double mean = 0.0, double stddev = 1.0) {
    for (auto& v : t.data) v = static_cast<S>(normal(mean, stddev));
  }

  template <typename S>
  void fill_uniform(TensorT<S>& t, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<S>(uniform(lo, hi));
  }

private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ldseg
