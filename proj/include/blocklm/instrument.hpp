#pragma once

#include <cstdint>

namespace blocklm {

// Multiply-accumulate counter fed by the forward kernels (matmul, attention)
// while a MacScope naming it is active on the current thread. Backward
// kernels do not count.
struct MacCounter {
  uint64_t macs = 0;
  uint64_t calls = 0;

  void reset() { macs = 0; calls = 0; }
};

class MacScope {
 public:
  explicit MacScope(MacCounter& counter);
  ~MacScope();
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  MacCounter* previous_;
};

void count_macs(uint64_t macs);

}  // namespace blocklm
