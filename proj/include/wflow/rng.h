// Seeded random source shared by training, sampling and corpus generation.
// Streams are derived from a root seed plus integer tags so that independent
// consumers (levels, epochs, images) never share state.

#ifndef WFLOW_RNG_H_
#define WFLOW_RNG_H_

#include <cstdint>
#include <initializer_list>
#include <random>

namespace wflow {

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  // SplitMix64-style mixing of a seed with a sequence of tags.
  static uint64_t Derive(uint64_t seed, std::initializer_list<uint64_t> tags);

  // Uniform on [0, 1); never returns 1.
  double Uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double Normal() { return normal_(engine_); }
  // Uniform integer on [0, n).
  uint64_t UniformInt(uint64_t n) {
    return std::uniform_int_distribution<uint64_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace wflow

#endif  // WFLOW_RNG_H_
