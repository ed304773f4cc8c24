#include "bikevol/rng.hpp"

#include "bikevol/errors.hpp"

namespace bikevol::core {

std::uint64_t RngStream::uniform_int(std::uint64_t n) {
    if (n == 0) {
        throw ContractError("uniform_int: empty range");
    }
    std::uniform_int_distribution<std::uint64_t> dist(0, n - 1);
    return dist(engine_);
}

std::vector<std::uint32_t> RngStream::sample_without_replacement(std::uint32_t n, std::uint32_t k) {
    if (k > n) {
        throw ContractError("sample_without_replacement: k > n");
    }
    std::vector<std::uint32_t> pool(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        pool[i] = i;
    }
    // Partial Fisher-Yates: first k entries are the sample.
    for (std::uint32_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::uint32_t>(uniform_int(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t master_seed, std::string_view stream_name) {
    return splitmix64(master_seed ^ fnv1a64(stream_name));
}

}  // namespace bikevol::core
