#pragma once
// Deterministic randomness. Two flavors:
//  - hash_rng: counter-based (pure function of seed + counters), used by the
//    dataset so corpora are reproducible independent of call order.
//  - Rng: a small stateful splitmix64 stream for training; its state is a
//    single u64 so it serializes into checkpoints trivially.

#include <cmath>
#include <cstdint>

namespace tig {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_u64(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc908ULL);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

// uniform in [0,1)
inline double hash_uniform(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    return double(hash_u64(seed, a, b, c) >> 11) * (1.0 / 9007199254740992.0);
}

// uniform integer in [0, n)
inline uint64_t hash_below(uint64_t seed, uint64_t n, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    return hash_u64(seed, a, b, c) % n;
}

class Rng {
public:
    explicit Rng(uint64_t seed = 1) : state_(seed ? seed : 0xdeadbeefULL) {}

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return splitmix64(state_);
    }
    double uniform() { return double(next_u64() >> 11) * (1.0 / 9007199254740992.0); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    long below(long n) { return long(next_u64() % uint64_t(n)); }

    double normal() {
        // Box-Muller; draws two uniforms per call, no cached spare so the
        // state stays a pure function of the number of calls.
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    uint64_t state_;
};

}  // namespace tig
