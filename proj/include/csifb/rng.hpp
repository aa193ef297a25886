#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace csifb {

// SplitMix64 output function. Bijective on 64-bit words.
inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

// Folds a list of stream identifiers into a sub-seed. Used to give every
// dataset sample / noise draw its own independent, reproducible stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t s = mix64(base ^ 0x6A09E667F3BCC909ULL);
    for (std::uint64_t p : parts) s = mix64(s ^ mix64(p + 0x9E3779B97F4A7C15ULL));
    return s;
}

// Counter-based generator: output i is mix64(key + i*gamma), so any draw is
// addressable by (key, counter) alone and sequences never depend on global
// state. This is exactly the SplitMix64 sequence for the given key.
class Rng {
  public:
    explicit Rng(std::uint64_t key) : key_(key) {}

    std::uint64_t next_u64() {
        counter_ += 1;
        return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    // Uniform in (0, 1]; never returns 0 so log() is always safe.
    double uniform() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the spare value is cached.
    double gauss() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Circularly symmetric complex normal with E|z|^2 = 1.
    std::complex<double> cgauss() {
        const double re = gauss();
        const double im = gauss();
        return {re * std::numbers::sqrt2 / 2.0, im * std::numbers::sqrt2 / 2.0};
    }

    // Exponential with the given mean.
    double exponential(double mean) { return -mean * std::log(uniform()); }

    // Zero-mean Laplacian with the given scale (std = scale * sqrt(2)).
    double laplacian(double scale) {
        const double u = uniform() - 0.5;
        const double s = u < 0 ? -1.0 : 1.0;
        return -s * scale * std::log(1.0 - 2.0 * std::abs(u));
    }

    std::uint64_t key() const { return key_; }

  private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace csifb
