#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>

namespace miml {

/// Seedable, splittable 64-bit random stream.
///
/// Generator: xoshiro256** (Blackman & Vigna, 2018). The 256-bit state is
/// expanded from the 64-bit seed with SplitMix64. `split(id)` derives an
/// independent child stream whose seed is SplitMix64(seed ^ mix(id)), so child
/// streams depend only on (parent seed, id) and never on how many values the
/// parent has drawn.
///
/// Every derived distribution is implemented here rather than through
/// <random>, whose distributions are implementation-defined:
///   uniform()  top 53 bits of next_u64() scaled by 2^-53, in [0, 1)
///   below(n)   Lemire's nearly-divisionless unbiased bounded integer
///   normal()   Box-Muller (cosine branch), two uniforms per draw
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  RngStream split(std::uint64_t stream_id) const;

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi);
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace miml
