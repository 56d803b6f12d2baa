#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace soap {

enum class ErrorKind {
    Shape,    // tensor shape / dimension mismatches
    Format,   // malformed files (bad magic, truncation, header mismatch)
    Io,       // filesystem failures
    Config,   // invalid configuration / usage
    Invalid,  // contract violations (wrong mode, wrong aux kind, ...)
    Numeric,  // NaN/Inf detected
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) raise(kind, msg);
}

// Deterministic PRNG (xoshiro256**, splitmix64 seeding). Self-contained so that
// identical seeds give identical streams across compilers and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t s = seed;
        for (auto& lane : state_) lane = splitmix64(s);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    float uniform() {
        return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (pairs cached)
    float normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        float u1 = uniform();
        float u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float theta = 6.28318530717958647692f * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
    }

    // independent stream derived from the original seed; does not advance this rng
    Rng split(uint64_t stream) const {
        uint64_t s = seed_ ^ (0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL);
        return Rng(splitmix64(s));
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t seed_;
    uint64_t state_[4];
    bool have_cached_ = false;
    float cached_ = 0.0f;
};

// FNV-1a, used for config hashes in run manifests.
inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace soap
