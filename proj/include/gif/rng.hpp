#ifndef GIF_RNG_HPP
#define GIF_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace gif {

namespace detail {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// FNV-1a, used only to turn substream labels into keys.
constexpr std::uint64_t label_hash(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

/// Counter-based 64-bit generator: output n is mix64(key + n * golden).
///
/// Streams are addressed by key, so `split` derives independent substreams
/// without consuming anything from the parent. Normals come from Box-Muller
/// with the second variate cached.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : key_(detail::mix64(seed ^ 0x6A09E667F3BCC909ULL)) {}

    /// Child stream addressed by a label ("data", "noise", "init", "dropout").
    Rng split(std::string_view label) const noexcept { return from_key(detail::mix64(key_ ^ detail::label_hash(label))); }

    /// Child stream addressed by an index (per-design, per-step).
    Rng split(std::uint64_t index) const noexcept {
        return from_key(detail::mix64(key_ + detail::mix64(index + detail::kGolden)));
    }

    std::uint64_t next_u64() noexcept { return detail::mix64(key_ + (counter_++) * detail::kGolden); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do v = next_u64();
        while (v >= limit);
        return v % n;
    }

    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so the log is finite.
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    static Rng from_key(std::uint64_t key) noexcept {
        Rng r;
        r.key_ = key;
        return r;
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// n standard-normal draws from a fresh stream seeded with `seed`.
inline std::vector<double> rng_stream(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    std::vector<double> out(n);
    for (auto& v : out) v = rng.normal();
    return out;
}

/// Labeled substreams of one experiment seed. Each consumer owns its stream,
/// so draws in one never shift another.
struct SeedStreams {
    explicit SeedStreams(std::uint64_t master) : root(master) {}

    Rng data() const { return root.split("data"); }
    Rng noise() const { return root.split("noise"); }
    Rng init() const { return root.split("init"); }
    Rng dropout() const { return root.split("dropout"); }
    Rng sampling() const { return root.split("sampling"); }

    Rng root;
};

}  // namespace gif

#endif  // GIF_RNG_HPP
