#pragma once

#include <cstdint>

#include "dblend/tensor.hpp"

namespace dblend {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based generator: the i-th 64-bit draw (i = 1, 2, ...) is
// mix64(seed + i * 0x9e3779b97f4a7c15), i.e. the SplitMix64 stream started
// at `seed`. Uniforms take the top 53 bits; normals use Box-Muller on
// consecutive uniform pairs (u1 -> 1 - u, u2), emitting cos then sin.
class CounterRng {
   public:
    static constexpr std::uint64_t golden = 0x9e3779b97f4a7c15ULL;

    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    // Independent stream derived from (seed, stream id).
    static CounterRng stream(std::uint64_t seed, std::uint64_t id) { return CounterRng(mix64(seed ^ mix64(id + golden))); }

    std::uint64_t next_u64() {
        ++counter_;
        return mix64(seed_ + counter_ * golden);
    }

    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return std::uint64_t(uniform() * double(n)); }

    double normal();

    std::uint64_t counter() const noexcept { return counter_; }

   private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

template <typename T>
BasicTensor<T> normal_tensor(const Shape& shape, CounterRng& rng) {
    BasicTensor<T> t(shape);
    for (T& v : t.data()) v = static_cast<T>(rng.normal());
    return t;
}

}  // namespace dblend
