#ifndef MCOMP_RNG_HPP
#define MCOMP_RNG_HPP

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace mcomp {

inline uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// xoshiro256++ with explicit, serializable state. Every stochastic decision in
// the project flows through this type so that runs are reproducible bit-for-bit
// and resumable from persisted state.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
    }

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        return int((static_cast<__uint128_t>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Standard normal via Box-Muller; the spare sample is cached and part of
    // the serialized state.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Independent stream derived from this stream's seed and a label. Does not
    // advance this stream.
    Rng split(const std::string& label) const {
        uint64_t x = seed_ ^ fnv1a64(label);
        return Rng(splitmix64(x));
    }

    nlohmann::json state_to_json() const {
        return nlohmann::json{{"seed", seed_},
                              {"s", {s_[0], s_[1], s_[2], s_[3]}},
                              {"has_spare", has_spare_},
                              {"spare", spare_}};
    }

    static Rng state_from_json(const nlohmann::json& j) {
        Rng r(j.at("seed").get<uint64_t>());
        for (int i = 0; i < 4; ++i) r.s_[i] = j.at("s").at(i).get<uint64_t>();
        r.has_spare_ = j.at("has_spare").get<bool>();
        r.spare_ = j.at("spare").get<double>();
        return r;
    }

    bool operator==(const Rng& o) const {
        return seed_ == o.seed_ && s_[0] == o.s_[0] && s_[1] == o.s_[1] && s_[2] == o.s_[2] &&
               s_[3] == o.s_[3] && has_spare_ == o.has_spare_ &&
               (!has_spare_ || spare_ == o.spare_);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t seed_ = 0;
    uint64_t s_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mcomp

#endif
