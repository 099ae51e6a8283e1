#include "latentsteer/rng.hpp"

#include <cmath>

namespace latentsteer {

uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace {
uint64_t scramble(uint64_t seed) {
    uint64_t s = seed;
    splitmix64(s);
    return splitmix64(s);
}
}  // namespace

Rng::Rng(uint64_t seed) : seed_(seed), gen_(scramble(seed)) {}

uint64_t Rng::next() { return gen_(); }

double Rng::uniform() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 shifted away from 0 so log() stays finite.
    double u1 = (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

uint64_t Rng::below(uint64_t n) {
    if (n <= 1) return 0;
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = next();
    } while (x >= limit);
    return x % n;
}

Rng Rng::substream(uint64_t id) const {
    uint64_t s = seed_ ^ (0x9e3779b97f4a7c15ULL * (id + 1));
    splitmix64(s);
    return Rng(splitmix64(s));
}

}  // namespace latentsteer
