#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace latentsteer {

// Advances `state` and returns the next splitmix64 output.
uint64_t splitmix64(uint64_t& state);

// Deterministic RNG. mt19937_64 produces identical streams on every
// platform; the distributions below avoid std::*_distribution, whose output
// is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next();            // raw 64 bits
    double uniform();           // [0, 1), 53-bit resolution
    double normal();            // standard normal, Box-Muller
    uint64_t below(uint64_t n); // unbiased integer in [0, n)
    int coin() { return uniform() < 0.5 ? 0 : 1; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // Independent child stream; children with distinct ids never collide
    // with each other or with the parent.
    Rng substream(uint64_t id) const;

private:
    uint64_t seed_;
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace latentsteer
