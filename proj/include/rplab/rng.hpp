#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rplab {

// splitmix64 finalizer; decorrelates nearby seed values.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic per-sample random stream. Monte Carlo loops give sample i the
// stream Rng(seed + i), so results do not depend on how samples are split
// across workers.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on (0,1); never returns 0.
    double uniform() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller, pair-cached.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Key for sample `index` under the counter-based seeding contract: a pure
// function of (seed, index), so Monte Carlo results cannot depend on how
// samples are split across workers. The mixing keeps the streams of nearby
// master seeds unrelated, which raw seed + index would not.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return mix64(seed + mix64(index + 1));
}

inline Rng sample_rng(std::uint64_t seed, std::uint64_t index) {
    return Rng(derive_seed(seed, index));
}

}  // namespace rplab
