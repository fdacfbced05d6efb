#pragma once

#include <cmath>
#include <cstdint>
#include <cstddef>
#include <utility>
#include <vector>

namespace autransfer {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a root seed and a stream tag.
/// Every source of randomness in the project draws from its own derived
/// stream, so stages never perturb each other's sequences.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ull * (stream + 1));
  return splitmix64(s);
}

namespace seed_stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kFoldSplit = 2;
inline constexpr std::uint64_t kStageOneShuffle = 3;
inline constexpr std::uint64_t kStageTwoShuffle = 4;
inline constexpr std::uint64_t kStageTwoSplit = 5;
inline constexpr std::uint64_t kLabelSubsample = 6;
inline constexpr std::uint64_t kCrossvalFold = 7;
}  // namespace seed_stream

/// Deterministic generator with a platform-independent sequence.
/// std engines/distributions are avoided on purpose: their output is
/// implementation-defined and would break byte-reproducible artifacts.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1), 53-bit resolution
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Box-Muller, two fresh draws per sample; stateless across calls
  double gaussian() {
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // unbiased integer in [0, n); n must be nonzero
  std::size_t below(std::size_t n) {
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = ~0ull - ~0ull % bound;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace autransfer
