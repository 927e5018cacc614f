#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace caw {

// Deterministic random source. All randomness in the library flows through
// this class so that a (seed, config) pair reproduces runs bit-exactly on
// any platform; std:: distributions are avoided because their output is
// implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // SplitMix warm-up so nearby seeds decorrelate.
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the second variate is discarded to
    // keep the stream position independent of call parity.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) {
            u1 = 1e-300;
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Unbiased index in [0, n).
    std::size_t index(std::size_t n) {
        if (n <= 1) {
            return 0;
        }
        const std::uint64_t limit = ~0ULL - (~0ULL % n);
        std::uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return static_cast<std::size_t>(v % n);
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[index(i)]);
        }
    }

    // Derive an independent stream, e.g. one per epoch or per attack call.
    Rng fork(std::uint64_t stream) {
        Rng child(state_ ^ (0xa0761d6478bd642fULL * (stream + 1)));
        return child;
    }

private:
    std::uint64_t state_;
};

} // namespace caw
