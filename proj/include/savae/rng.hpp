#pragma once

#include <cstdint>
#include <random>

namespace savae {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Child seed for an indexed stream under `parent`. Pure function, so every
/// consumer can re-derive the same seed without shared state.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) {
  return splitmix64(parent ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream, Rest... rest) {
  return derive_seed(derive_seed(parent, stream), static_cast<std::uint64_t>(rest)...);
}

/// Named stream tags used throughout training and analysis.
namespace stream {
inline constexpr std::uint64_t kFinalEval = 0xF17A1ULL;
inline constexpr std::uint64_t kSviSteps = 0x57E95ULL;
inline constexpr std::uint64_t kRandomInit = 0x1417ULL;
inline constexpr std::uint64_t kShuffle = 0x5AFF1EULL;
inline constexpr std::uint64_t kBatch = 0xBA7C4ULL;
inline constexpr std::uint64_t kInit = 0x1A17ULL;
inline constexpr std::uint64_t kData = 0xDA7AULL;
inline constexpr std::uint64_t kEval = 0xE7A1ULL;
}  // namespace stream

/// Deterministic source of standard normal and uniform draws.
class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  double normal() {
    ++draws_;
    return normal_(engine_);
  }
  double uniform(double lo, double hi) {
    ++draws_;
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }
  std::mt19937_64& engine() { return engine_; }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
};

}  // namespace savae
