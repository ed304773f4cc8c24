#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace bikevol::core {

// Seedable random stream. Independent streams are derived from one master
// seed plus a stream name, so each pipeline component (model init, dropout,
// neighbor sampling, latent sampling, CV splits) draws from its own sequence
// and ablating one component leaves the others' draws untouched.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return uniform_(engine_); }               // [0, 1)
    double normal() { return normal_(engine_); }                 // N(0, 1)
    std::uint64_t uniform_int(std::uint64_t n);                  // [0, n)

    template <typename T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), engine_);
    }

    // k distinct values from [0, n), order randomized.
    std::vector<std::uint32_t> sample_without_replacement(std::uint32_t n, std::uint32_t k);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
    std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

// Derive the seed for a named stream from the master seed.
std::uint64_t derive_seed(std::uint64_t master_seed, std::string_view stream_name);

inline RngStream derive_stream(std::uint64_t master_seed, std::string_view stream_name) {
    return RngStream(derive_seed(master_seed, stream_name));
}

}  // namespace bikevol::core
