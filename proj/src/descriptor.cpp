#include "kslam/descriptor.h"

#include <cstdio>
#include <stdexcept>

namespace kslam {

std::string to_hex(const Descriptor& d) {
  char buf[65];
  for (int i = 0; i < 4; ++i) {
    std::snprintf(buf + 16 * i, 17, "%016llx", static_cast<unsigned long long>(d.words[i]));
  }
  return std::string(buf, 64);
}

Descriptor descriptor_from_hex(const std::string& hex) {
  if (hex.size() != 64) {
    throw std::invalid_argument("descriptor_from_hex: expected 64 hex characters");
  }
  Descriptor d;
  for (int i = 0; i < 4; ++i) {
    uint64_t w = 0;
    for (int j = 0; j < 16; ++j) {
      const char c = hex[16 * i + j];
      uint64_t nibble;
      if (c >= '0' && c <= '9') {
        nibble = uint64_t(c - '0');
      } else if (c >= 'a' && c <= 'f') {
        nibble = uint64_t(c - 'a') + 10;
      } else if (c >= 'A' && c <= 'F') {
        nibble = uint64_t(c - 'A') + 10;
      } else {
        throw std::invalid_argument("descriptor_from_hex: invalid hex character");
      }
      w = (w << 4) | nibble;
    }
    d.words[i] = w;
  }
  return d;
}

}  // namespace kslam
