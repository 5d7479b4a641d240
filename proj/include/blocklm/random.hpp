#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace blocklm {

using Rng = std::mt19937_64;

// Per-component seed from the single user seed: splitmix64 over the seed
// mixed with an FNV-1a hash of the component tag.
uint64_t derive_seed(uint64_t seed, std::string_view tag);
uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index);

}  // namespace blocklm
