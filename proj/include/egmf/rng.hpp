#pragma once

#include <cstdint>

namespace egmf {

/// Reproducible random stream identified by (seed, stream_id).
///
/// Counter-based SplitMix64: output n is SplitMix64(s0 + n * golden) with
/// s0 = SplitMix64(seed) xor SplitMix64(stream_id + c). Construction is a
/// few integer operations, so per-member substreams are cheap, and distinct
/// stream ids start at unrelated points of the sequence. Normal deviates use
/// the Box-Muller transform (both values of a pair are consumed) and uniforms
/// take the top 53 bits of one engine output. Nothing here depends on the
/// implementation-defined std:: distributions.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  /// Raw 64-bit engine output.
  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  /// Standard normal N(0, 1).
  double normal();

  /// Fresh key drawn from this stream; used to derive per-member substreams
  /// so that each call site advances the parent exactly once.
  std::uint64_t fork_key() { return next_u64(); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t state_;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace egmf
