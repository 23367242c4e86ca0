#include "latentlab/rng.hpp"

#include <cmath>

#include "latentlab/error.hpp"

namespace latentlab {

namespace {

// splitmix64 finalizer; two rounds over the keyed counter give a solid
// stateless bit mixer (the usual recipe for counter-based streams).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

RngStream RngStream::derive(std::uint64_t substream) const {
  return RngStream(seed_, mix64(stream_id_ ^ mix64(substream ^ 0xa5a5a5a5a5a5a5a5ULL)));
}

std::uint64_t RngStream::next_u64() {
  std::uint64_t x = mix64(seed_ ^ mix64(stream_id_));
  x = mix64(x ^ counter_);
  ++counter_;
  return x;
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_int(std::uint64_t n) {
  if (n == 0) throw UsageError("uniform_int: n must be positive");
  // Rejection to avoid modulo bias.
  std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  if (have_normal_) {
    have_normal_ = false;
    return cached_normal_;
  }
  // Box-Muller; u1 kept away from 0.
  double u1, u2;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925287 * u2;
  cached_normal_ = r * std::sin(a);
  have_normal_ = true;
  return r * std::cos(a);
}

double RngStream::truncated_normal(double stddev) {
  for (;;) {
    double x = normal();
    if (x >= -2.0 && x <= 2.0) return x * stddev;
  }
}

std::vector<std::uint32_t> RngStream::permutation(std::uint32_t n) {
  std::vector<std::uint32_t> p(n);
  for (std::uint32_t i = 0; i < n; ++i) p[i] = i;
  for (std::uint32_t i = n; i > 1; --i) {
    std::uint32_t j = static_cast<std::uint32_t>(uniform_int(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace latentlab
