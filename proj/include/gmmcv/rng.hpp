#pragma once

// Counter-based random streams (Philox4x32-10, Salmon et al. SC'11).
//
// Every Monte-Carlo replication owns an independent stream keyed by
// (seed, stream id), so results do not depend on scheduling or thread count.

#include <array>
#include <cstdint>
#include <limits>

namespace gmmcv {

class Philox4x32 {
 public:
  using result_type = std::uint32_t;
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  /// Raw block function: ten rounds of Philox4x32 on (counter, key).
  static Counter block(Counter counter, Key key) noexcept;

  Philox4x32(std::uint64_t seed, std::uint64_t stream) noexcept;

  result_type operator()() noexcept;

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

 private:
  Counter counter_{};
  Key key_{};
  Counter buffer_{};
  int used_ = 4;
};

/// Stream of doubles built on Philox4x32. Uniforms carry 53 random bits;
/// normals use the Box-Muller transform (both outputs are consumed).
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream) noexcept
      : engine_(seed, stream) {}

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept;
  double normal() noexcept;
  double normal(double mean, double sd) noexcept { return mean + sd * normal(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

 private:
  Philox4x32 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Mixes a tag into a seed so different consumers of one experiment seed
/// (data generation, multistart, shuffling) draw from unrelated streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) noexcept;

}  // namespace gmmcv
