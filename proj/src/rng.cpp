#include "lgaf/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lgaf {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}
}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t counter)
    : seed_(seed), key_(splitmix64(seed + kGolden)), counter_(counter) {}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return splitmix64(key_ + counter_ * kGolden);
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("RngStream::below: n must be positive");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double RngStream::normal(double mean, double stddev) { return mean + stddev * normal(); }

bool RngStream::bernoulli(double p) { return uniform() < p; }

RngStream RngStream::substream(std::string_view label, std::uint64_t index) const {
  std::uint64_t h = splitmix64(seed_ ^ fnv1a(label));
  h = splitmix64(h + (index + 1) * kGolden);
  return RngStream(h);
}

}  // namespace lgaf
