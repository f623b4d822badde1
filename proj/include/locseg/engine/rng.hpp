#ifndef LOCSEG_ENGINE_RNG_HPP
#define LOCSEG_ENGINE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>

namespace locseg {

// Every random draw in the library is addressed by (seed, purpose, index, counter),
// so a value never depends on how work was scheduled across threads.
enum class Purpose : std::uint64_t {
  split = 1,
  glorot = 2,
  positive_sampling = 3,
  negative_sampling = 4,
  shuffle = 5,
  dropout = 6,
  bootstrap = 7,
  synth = 8,
  ablation = 9,
  test = 99,
};

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng(std::uint64_t seed, Purpose purpose, std::uint64_t index = 0)
      : key_(mix64(mix64(mix64(seed) ^ static_cast<std::uint64_t>(purpose)) ^ index)) {}

  /// Derives an independent child stream, e.g. one per layer within a sample.
  CounterRng substream(std::uint64_t index) const {
    CounterRng child = *this;
    child.key_ = mix64(key_ ^ mix64(index + 0x632be59bd9b4e019ULL));
    child.counter_ = 0;
    return child;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() { return mix64(key_ + 0xd1b54a32d192ed03ULL * ++counter_); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n). Uses rejection to stay unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r;
    do {
      r = (*this)();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller; both uniforms are drawn on every call.
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace locseg

#endif  // LOCSEG_ENGINE_RNG_HPP
