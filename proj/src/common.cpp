#include "engram/common.hpp"

#include <cstdio>

namespace engram {

namespace {
bool g_finite_checks = false;
}

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool on) { g_finite_checks = on; }

std::string to_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace engram
