#pragma once

#include <cstdint>
#include <limits>
#include <random>

namespace spectral {

// Counter-based generator: the n-th output is splitmix64_mix(key + n * golden),
// where key is derived from (seed, stream). Streams are independent sequences,
// and any position can be reached without generating the ones before it.
class Rng {
 public:
  using result_type = std::uint64_t;
  static constexpr const char* kName = "splitmix64-counter";

  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : key_(derive_key(seed, stream)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + (++counter_) * kGolden); }

  std::uint64_t counter() const { return counter_; }

  double normal() { return normal_(*this); }
  double uniform() { return uniform_(*this); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(*this); }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream) {
    return mix(mix(seed ^ 0x5851f42d4c957f2dULL) + stream * kGolden);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Stream ids used by the harness so that methods share gradient streams but
// draw internal noise independently.
enum class StreamId : std::uint64_t {
  problem = 1,
  gradients = 2,
  init = 3,
  data = 4,
  method_base = 1000,
};

inline std::uint64_t method_stream(std::uint64_t method_index) {
  return static_cast<std::uint64_t>(StreamId::method_base) + method_index;
}

}  // namespace spectral
