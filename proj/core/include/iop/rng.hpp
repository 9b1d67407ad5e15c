#ifndef IOP_RNG_HPP
#define IOP_RNG_HPP

#include <cstdint>

namespace iop {

// splitmix64 finalizer; full-period scrambler used both as a stream
// generator and as a seed-derivation hash.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derive an independent seed from (base, tag, a, b, c). Every random
// decision in the pipeline draws its seed through this, so runs are
// reproducible from a single master seed and a step counter alone —
// no RNG stream state needs to survive a checkpoint.
inline uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t a = 0,
                            uint64_t b = 0, uint64_t c = 0) {
  uint64_t s = mix64(base ^ 0x6a09e667f3bcc909ULL);
  s = mix64(s ^ tag);
  s = mix64(s ^ a);
  s = mix64(s ^ b);
  s = mix64(s ^ c);
  return s;
}

// Seed-derivation tags, one per randomness consumer.
enum SeedTag : uint64_t {
  kSeedInit = 1,
  kSeedProblem,
  kSeedCorrupt,
  kSeedRollout,
  kSeedRepair,
  kSeedAnchor,
  kSeedGraft,
  kSeedEval,
  kSeedSftShuffle,
  kSeedColdstart,
  kSeedCloneStream,
};

// Minimal counter-style generator on top of splitmix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be >= 1.
  uint64_t next_below(uint64_t n) {
    // Rejection-free modulo is fine here: n is tiny (group sizes, digits)
    // relative to 2^64, so the bias is unobservable.
    return next_u64() % n;
  }

 private:
  uint64_t state_;
};

}  // namespace iop

#endif  // IOP_RNG_HPP
