#ifndef CHANPRUNE_RANDOM_HPP_
#define CHANPRUNE_RANDOM_HPP_

#include <cstdint>
#include <random>

namespace chanprune {

/// SplitMix64 finalizer; a bijective 64-bit mix.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
	x += 0x9e3779b97f4a7c15ULL;
	x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
	x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
	return x ^ (x >> 31);
}

/// Combines a seed with a sequence of counters into one stream key.
constexpr std::uint64_t stream_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
	return mix64(mix64(mix64(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

/**
 * Counter-based generator: the stream depends only on (seed, a, b), never on
 * how many values were drawn elsewhere. Used to key random output gradients by
 * example index so batch partitioning cannot change them.
 */
inline std::mt19937_64 keyed_engine(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
	return std::mt19937_64(stream_key(seed, a, b));
}

}  // namespace chanprune

#endif  // CHANPRUNE_RANDOM_HPP_
