#pragma once

#include <cstdint>

namespace unlearn {

// Key for one stochastic draw. Every random value in the trainer is a pure
// function of one fully-populated key; there is no stream state, so draws
// for a retained element never depend on what else shares its batch.
struct RngKey {
  uint64_t seed64 = 0;
  uint64_t example_id = 0;
  uint32_t token_idx = 0;
  uint32_t op_id = 0;
  uint32_t offset = 0;
};

// Operation ids carved out of the key space.
enum RngOp : uint32_t {
  kRngInitEmbed = 1,
  kRngInitDense1 = 2,
  kRngInitDense2 = 3,
  kRngDropout = 4,
  kRngShuffle = 5,
  kRngMicrobatchSeed = 6,
  kRngCorpusGen = 7,
  kRngBootstrap = 8,
  kRngAdapterInit = 9,
};

// SplitMix64 finalizer.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter hash over the packed key fields; order of absorption is fixed.
inline uint64_t rng_u64(const RngKey& k) {
  uint64_t h = mix64(k.seed64);
  h = mix64(h ^ k.example_id);
  h = mix64(h ^ ((uint64_t(k.token_idx) << 32) | k.op_id));
  h = mix64(h ^ k.offset);
  return h;
}

// Uniform in [0, 1): top 24 bits so the value is exact in f32.
inline float rng_uniform(const RngKey& k) {
  return static_cast<float>(rng_u64(k) >> 40) * (1.0f / 16777216.0f);
}

// Uniform in [-a, a).
inline float rng_symmetric(const RngKey& k, float a) {
  return (rng_uniform(k) * 2.0f - 1.0f) * a;
}

// Uniform integer in [0, n) by rejection-free widening multiply.
inline uint64_t rng_below(const RngKey& k, uint64_t n) {
  return static_cast<uint64_t>((static_cast<unsigned __int128>(rng_u64(k)) * n) >> 64);
}

}  // namespace unlearn
