#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>

namespace empower {

/// Counter-based SplitMix64 generator.
///
/// Draw n of a stream with key k is mix64(k + (n + 1) * golden), so a stream
/// is fully described by (key, counter) and can be re-derived anywhere.
/// Independent streams are obtained with `split`, which hashes a child id
/// into a fresh key. Every random quantity in the project (initialization,
/// episode sampling, smoothing noise) comes from streams of this generator.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t key = 0, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  /// Stream addressed by a path of ids below a master seed, e.g. {run, batch, episode}.
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()();

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  /// Standard normal via Box-Muller (one output per two uniforms, no caching).
  double normal();
  /// Index drawn from a categorical distribution. Weights need not be normalized;
  /// zero-weight entries are never returned.
  std::size_t categorical(std::span<const double> weights);

  [[nodiscard]] Rng split(std::uint64_t id) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace empower
