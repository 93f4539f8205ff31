#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace bilevel {

/// Seeded random stream. Independent streams for the same seed are obtained
/// through distinct `stream` ids so that, e.g., augmenter noise never shifts
/// the data-shuffling sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

  /// Integer uniformly drawn from [lo, hi].
  long long integer(long long lo, long long hi) { return std::uniform_int_distribution<long long>(lo, hi)(engine_); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Named stream ids used by the training pipeline.
namespace streams {
inline constexpr std::uint64_t classifier_init = 1;
inline constexpr std::uint64_t augmenter_init = 2;
inline constexpr std::uint64_t data_split = 3;
inline constexpr std::uint64_t augment = 4;
inline constexpr std::uint64_t flip = 5;
inline constexpr std::uint64_t eval = 6;
inline constexpr std::uint64_t dataset = 7;
}  // namespace streams

}  // namespace bilevel
