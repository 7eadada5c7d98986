// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random primitives. Mask sampling must give the same bits no
// matter how work is scheduled, so draws are addressed by (seed, tensor name,
// flat index) instead of consuming a shared stream. The mixer is the
// splitmix64 finalizer; the name hash is FNV-1a. Both are fixed here so files
// produced on different platforms stay byte-identical.

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace apl {

constexpr std::uint64_t kGolden64 = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline double bits_to_unit_double(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Addressable uniform stream for one (seed, tensor) pair. `at(i)` is the
/// i-th value of a splitmix64 sequence, so any subset of indices can be
/// evaluated independently and in any order.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::string_view stream_name)
        : base_(mix64(seed ^ kGolden64) ^ mix64(fnv1a64(stream_name))) {}

    std::uint64_t bits_at(std::uint64_t index) const {
        return mix64(base_ + (index + 1) * kGolden64);
    }

    double uniform_at(std::uint64_t index) const {
        return bits_to_unit_double(bits_at(index));
    }

private:
    std::uint64_t base_;
};

/// Sequential generator for data synthesis and initialization.
class SequentialRng {
public:
    explicit SequentialRng(std::uint64_t seed) : state_(seed) {}

    SequentialRng(std::uint64_t seed, std::string_view stream_name)
        : state_(mix64(seed ^ kGolden64) ^ mix64(fnv1a64(stream_name))) {}

    std::uint64_t next_bits() {
        state_ += kGolden64;
        return mix64(state_);
    }

    double next_uniform() { return bits_to_unit_double(next_bits()); }

    /// Box-Muller; pairs are drawn eagerly and the second value cached.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_uniform();
        double u2 = next_uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace apl
