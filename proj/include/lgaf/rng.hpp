#pragma once

#include <cstdint>
#include <string_view>

namespace lgaf {

/// Counter-based random stream.
///
/// Draw i of a stream is splitmix64(key + i * 0x9E3779B97F4A7C15), where key
/// is the stream's seed after one splitmix64 finalization. The output depends
/// only on (seed, counter), so it is identical on every platform and a stream
/// can be repositioned by setting its counter. Substreams derive a new seed by
/// hashing the parent seed with a label and an index, so modules draw from
/// disjoint sequences regardless of call order elsewhere.
///
/// Floating-point draws use only integer arithmetic except normal(), which
/// applies Box-Muller with std::log/std::sqrt/std::cos.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t counter) { counter_ = counter; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev);
  bool bernoulli(double p);

  RngStream substream(std::string_view label, std::uint64_t index = 0) const;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace lgaf
