#pragma once
// Shared basics: error type, shape helpers, deterministic RNG streams.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stssad {

// All library failures surface as stssad::Error with a message that names the
// operation and the offending values. The CLI maps these to exit code 2.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic double-precision RNG. Raw 53-bit draws from mt19937_64 are used
// directly instead of std distributions, whose output is implementation-defined;
// this keeps trajectories bitwise reproducible for a given seed.
class RandomStream {
  public:
    explicit RandomStream(uint64_t seed) { reseed(seed); }

    // Derive an independent substream: same root seed + different tags never collide
    // in practice and never depend on call order elsewhere.
    RandomStream(uint64_t root, uint64_t consumer_tag, uint64_t index = 0)
        : RandomStream(splitmix64(splitmix64(root ^ 0x5851f42d4c957f2dull) ^
                                  splitmix64(consumer_tag * 0x2545f4914f6cdd1dull + index))) {}

    void reseed(uint64_t seed) {
        mt_init(seed);
        have_normal_ = false;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    // Box-Muller; deterministic, no std::normal_distribution.
    double normal() {
        if (have_normal_) {
            have_normal_ = false;
            return cached_normal_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_normal_ = r * std::sin(a);
        have_normal_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n). Modulo bias is irrelevant at these ranges; what
    // matters is determinism.
    uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

    uint64_t next_u64() {
        if (mt_pos_ >= 312) mt_refill();
        uint64_t x = mt_[mt_pos_++];
        x ^= (x >> 29) & 0x5555555555555555ull;
        x ^= (x << 17) & 0x71d67fffeda60000ull;
        x ^= (x << 37) & 0xfff7eee000000000ull;
        x ^= x >> 43;
        return x;
    }

  private:
    // Minimal mt19937_64 core (fixed algorithm, fixed constants) so the stream is
    // identical across standard libraries.
    void mt_init(uint64_t seed) {
        mt_[0] = seed;
        for (uint32_t i = 1; i < 312; ++i)
            mt_[i] = 6364136223846793005ull * (mt_[i - 1] ^ (mt_[i - 1] >> 62)) + i;
        mt_pos_ = 312;
    }
    void mt_refill() {
        static const uint64_t kMag[2] = {0ull, 0xb5026f5aa96619e9ull};
        const uint64_t kUpper = 0xffffffff80000000ull, kLower = 0x7fffffffull;
        for (uint32_t i = 0; i < 312; ++i) {
            uint64_t x = (mt_[i] & kUpper) | (mt_[(i + 1) % 312] & kLower);
            mt_[i] = mt_[(i + 156) % 312] ^ (x >> 1) ^ kMag[x & 1];
        }
        mt_pos_ = 0;
    }

    uint64_t mt_[312];
    uint32_t mt_pos_ = 312;
    bool have_normal_ = false;
    double cached_normal_ = 0.0;
};

// Consumer tags for substream derivation (keep stable: they are part of what makes
// a seed reproduce a run).
namespace rng_tag {
constexpr uint64_t kTextures = 1;
constexpr uint64_t kInjection = 2;
constexpr uint64_t kShuffle = 3;
constexpr uint64_t kWeights = 4;
constexpr uint64_t kPatchCenters = 5;
constexpr uint64_t kRandomSearch = 6;
constexpr uint64_t kWarmStart = 7;
}  // namespace rng_tag

}  // namespace stssad
