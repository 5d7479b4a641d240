#include "blocklm/instrument.hpp"

namespace blocklm {

namespace {
thread_local MacCounter* g_active = nullptr;
}

MacScope::MacScope(MacCounter& counter) : previous_(g_active) { g_active = &counter; }

MacScope::~MacScope() { g_active = previous_; }

void count_macs(uint64_t macs) {
  if (g_active) {
    g_active->macs += macs;
    g_active->calls += 1;
  }
}

}  // namespace blocklm
