#include "blocklm/random.hpp"

namespace blocklm {

static uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

static uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

uint64_t derive_seed(uint64_t seed, std::string_view tag) { return splitmix64(seed ^ fnv1a(tag)); }

uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index) {
  return splitmix64(derive_seed(seed, tag) + index);
}

}  // namespace blocklm
