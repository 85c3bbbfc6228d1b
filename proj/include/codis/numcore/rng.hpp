#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace codis {

/// Seeded generator shared by every randomized operation. Same seed, same
/// call sequence, same draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t next() { return engine_(); }
  // Independent child stream, e.g. one per epoch or per worker.
  Rng fork() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    // Fisher-Yates with our own index() so the permutation is portable.
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace codis
