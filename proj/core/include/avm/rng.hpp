#pragma once

#include <cstdint>

namespace avm {

// splitmix64 finalizer; the basis of every random stream in the project.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Combine a seed with up to three coordinates into an independent stream key,
// so generation keyed per (image, repeat, neuron) is order-independent.
constexpr std::uint64_t stream_key(std::uint64_t seed, std::uint64_t a,
                                   std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t k = mix64(seed ^ 0x5851f42d4c957f2dULL);
    k = mix64(k ^ (a * 0xd1342543de82ef95ULL));
    k = mix64(k ^ (b * 0xaf251af3b0f025b5ULL));
    k = mix64(k ^ (c * 0x9e3779b97f4a7c15ULL));
    return k;
}

// Counter-based generator: state is (key, counter) plus the Box-Muller cache,
// all of which serializes into a checkpoint.
class Rng {
public:
    struct State {
        std::uint64_t key = 0;
        std::uint64_t counter = 0;
        bool has_cached_normal = false;
        double cached_normal = 0.0;
    };

    explicit Rng(std::uint64_t seed) { state_.key = mix64(seed); }
    explicit Rng(State s) : state_(s) {}

    std::uint64_t next_u64() { return mix64(state_.key + 0x9e3779b97f4a7c15ULL * ++state_.counter); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, second value cached
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // exact Poisson sample; rates above 30 are split into independent chunks
    std::uint64_t poisson(double rate);

    State state() const { return state_; }
    void restore(const State& s) { state_ = s; }

private:
    State state_;
};

// A stream whose draws depend only on (seed, a, b, c), never on call order.
inline Rng keyed_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                     std::uint64_t c = 0) {
    Rng::State s;
    s.key = stream_key(seed, a, b, c);
    return Rng(s);
}

}  // namespace avm
