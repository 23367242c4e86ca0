#pragma once

#include <cstdint>
#include <vector>

namespace latentlab {

// Counter-based random stream: every draw is a hash of (seed, stream_id,
// counter), so identical (seed, stream_id) reproduces identical sequences
// regardless of thread layout or what other streams drew in between.
// Streams derived with derive() are statistically independent.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id), counter_(0) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; have_normal_ = false; }

  // Child stream keyed off this stream's identity; does not consume draws.
  RngStream derive(std::uint64_t substream) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1), 53-bit resolution.
  double uniform();
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  // Standard normal (Box-Muller; second value cached).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  // Normal truncated to [-2*std, 2*std], mean 0 (rejection).
  double truncated_normal(double stddev);

  // Fisher-Yates shuffle of [0, n) indices.
  std::vector<std::uint32_t> permutation(std::uint32_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_;
  bool have_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace latentlab
