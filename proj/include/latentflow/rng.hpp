#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace latentflow {

// splitmix64 finalizer. Used to derive independent stream seeds from a base
// seed plus integer labels, so every stage/sample/epoch gets its own stream
// and parallel evaluation can reproduce the serial draws.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t seed_mix(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

inline std::uint64_t seed_mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return seed_mix(seed_mix(a, b), c);
}

inline std::uint64_t seed_mix(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                              std::uint64_t d) {
  return seed_mix(seed_mix(a, b, c), d);
}

// Stream labels fed to seed_mix so distinct draw purposes never collide.
enum SeedStream : std::uint64_t {
  kStreamPath = 1,     // (t, y-) draws inside the flow-matching losses
  kStreamDropout = 2,  // condition dropout
  kStreamShuffle = 3,  // epoch shuffles
  kStreamInit = 4,     // parameter init
  kStreamPrompt = 5,   // per-sample prompt modality
  kStreamLyrics = 6,   // synthetic lyric alignments
  kStreamJitter = 7,   // alignment perturbation
  kStreamSample = 8,   // sampler noise
  kStreamData = 9,     // dataset generation
  kStreamTables = 10,     // conditioning tables
  kStreamPairs = 11,      // (t, y-) draws inside the DPO loss
  kStreamCandidates = 12, // candidate generation during pair mining
};

// Deterministic RNG. The engine is std::mt19937_64 (bit-exact by the
// standard); the uniform/normal transforms are written out explicitly so
// draws do not depend on implementation-defined std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; safe under log().
  double uniform_open0() {
    return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the paired draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open0();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  void fill_normal(double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = normal();
  }

  // Unbiased uniform integer in [0, n) via rejection.
  std::uint64_t bounded(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t r = engine_();
      if (r >= threshold) return r % n;
    }
  }

  // Inclusive integer range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span =
        static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(bounded(span));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Index draw from normalized weights (caller guarantees sum == 1).
  std::size_t categorical(const std::vector<double>& probs) {
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return i;
    }
    return probs.empty() ? 0 : probs.size() - 1;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace latentflow
