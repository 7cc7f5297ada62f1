#pragma once

#include <cstdint>
#include <random>

namespace doseopt {

// Purpose tags for keyed random streams. Values are part of the on-disk
// reproducibility contract; do not renumber.
enum class Stream : std::uint64_t {
  Patients = 1,
  McmcEnroll = 2,
  McmcFutility = 3,
  McmcFinal = 4,
  Randomization = 5,
  PkSampler = 6,
  Test = 99,
};

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based key derivation: the stream for (seed, replicate, purpose,
// index) does not depend on how many draws other streams consumed.
inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t replicate, Stream purpose,
                                std::uint64_t index = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ replicate);
  h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
  return splitmix64(h ^ index);
}

inline Engine make_engine(std::uint64_t key) { return Engine(key); }

inline Engine make_engine(std::uint64_t seed, std::uint64_t replicate, Stream purpose,
                          std::uint64_t index = 0) {
  return Engine(stream_key(seed, replicate, purpose, index));
}

inline double uniform01(Engine& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double standard_normal(Engine& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace doseopt
