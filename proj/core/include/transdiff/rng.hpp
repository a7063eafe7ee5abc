// Counter-based random number generation. Every draw is a pure function of
// (seed, stream, counter), so sequences are reproducible independently of
// evaluation order and resumable without serialized generator state.
#pragma once

#include "transdiff/tensor.hpp"

#include <cstdint>

namespace transdiff {

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t hash3(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
    std::uint64_t h = mix64(seed);
    h = mix64(h ^ mix64(stream ^ 0xd6e8feb86659fd93ULL));
    h = mix64(h ^ counter);
    return h;
}

// uniform on (0, 1]: never 0, so log() below stays finite
inline double unit_open(std::uint64_t h) {
    return (static_cast<double>(h >> 11) + 1.0) * 0x1.0p-53;
}

}  // namespace detail

class SeededRng {
  public:
    SeededRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    // standard-normal draw at an absolute index, Box-Muller over hashed counters
    double normal_at(std::uint64_t index) const {
        const std::uint64_t pair = index >> 1;
        const double u1 = detail::unit_open(detail::hash3(seed_, stream_, 2 * pair));
        const double u2 = detail::unit_open(detail::hash3(seed_, stream_, 2 * pair + 1));
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        return (index & 1) ? r * std::sin(a) : r * std::cos(a);
    }

    double uniform_at(std::uint64_t index) const {
        return detail::unit_open(detail::hash3(seed_, stream_, index ^ 0x5851f42d4c957f2dULL));
    }

    // uniform integer in [0, n)
    std::uint64_t index_below_at(std::uint64_t index, std::uint64_t n) const {
        return detail::hash3(seed_, stream_, index ^ 0x14057b7ef767814fULL) % n;
    }

    // stateful convenience: advancing the internal counter is the only state change
    double normal() { return normal_at(counter_++); }
    double uniform() { return uniform_at(counter_++); }
    std::uint64_t index_below(std::uint64_t n) { return index_below_at(counter_++, n); }

    std::uint64_t counter() const { return counter_; }

    SeededRng substream(std::uint64_t sub) const {
        return SeededRng(seed_, detail::mix64(stream_ ^ detail::mix64(sub)));
    }

  private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
};

template <class T>
Tensor<T> rng_normal(SeededRng& rng, const Shape& shape) {
    Tensor<T> out(shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(rng.normal());
    return out;
}

template <class T>
Tensor<T> rng_normal(SeededRng& rng, const Shape& shape, T stddev) {
    Tensor<T> out(shape);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<T>(rng.normal()) * stddev;
    return out;
}

}  // namespace transdiff
