#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace resfim {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a tag path, e.g.
/// (run seed, round, client, purpose). Streams never share generator state,
/// so results do not depend on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags)
{
    std::uint64_t h = splitmix64(base);
    for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
    return h;
}

// Stream purposes.
enum StreamTag : std::uint64_t {
    kInitStream = 1,
    kShuffleStream,
    kSpectralStream,
    kFisherRealStream,
    kFisherSimStream,
    kBenchmarkStream,
    kSplitStream,
};

} // namespace resfim
