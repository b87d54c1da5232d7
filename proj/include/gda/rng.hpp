#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "gda/common.hpp"
#include "gda/tensor.hpp"

namespace gda {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from (seed, stream, index). Every
// per-sample RNG in the pipeline goes through this, so results do not depend
// on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ 0x51ab5a7ed0c1u) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + index));
}

// Deterministic RNG with explicit sampling formulas. std::mt19937_64 output
// is pinned by the standard; the distributions are implemented here rather
// than via <random> adapters so draws are identical across standard
// libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    real uniform() { return static_cast<real>(next_u64() >> 11) * 0x1.0p-53; }

    real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds, rejection-free modulo bias acceptable for toy ranges
    int uniform_int(int lo, int hi) {
        GDA_CHECK(hi >= lo, "uniform_int empty range");
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    bool bernoulli(real p) { return uniform() < p; }

    // Box-Muller, cosine branch only. No cached state.
    real normal() {
        real u1 = uniform();
        real u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    real normal(real mean, real stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 gen_;
};

inline Tensor Tensor::randn(std::vector<int> s, Rng& rng, real stddev) {
    Tensor t(std::move(s));
    for (real& v : t.data) v = rng.normal() * stddev;
    return t;
}

}  // namespace gda
