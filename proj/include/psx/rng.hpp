#pragma once

#include <cstdint>
#include <vector>

namespace psx {

/// xoshiro256** seeded through splitmix64. The exact stream is part of the
/// reproducibility contract: a seed selects the same samples in any
/// implementation that follows these definitions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();

  /// Uniform double in [0, 1) from the top 53 bits.
  double uniform();

  /// Uniform integer in [0, bound) by rejection (Lemire's multiply-shift).
  std::uint64_t below(std::uint64_t bound);

  /// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  /// Full Fisher-Yates permutation of [0, n).
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t state_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace psx
