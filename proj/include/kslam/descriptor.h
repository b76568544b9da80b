#ifndef KSLAM_DESCRIPTOR_H
#define KSLAM_DESCRIPTOR_H

#include <array>
#include <bit>
#include <compare>
#include <cstdint>
#include <string>

namespace kslam {

/// 256-bit binary feature descriptor.
struct Descriptor {
  std::array<uint64_t, 4> words{};

  bool operator==(const Descriptor&) const = default;
  auto operator<=>(const Descriptor&) const = default;

  bool bit(int i) const { return (words[i >> 6] >> (i & 63)) & 1u; }
  void flip_bit(int i) { words[i >> 6] ^= uint64_t{1} << (i & 63); }
  void set_bit(int i) { words[i >> 6] |= uint64_t{1} << (i & 63); }
};

/// Number of differing bits, 0..256.
inline int hamming(const Descriptor& a, const Descriptor& b) {
  int d = 0;
  for (int i = 0; i < 4; ++i) d += std::popcount(a.words[i] ^ b.words[i]);
  return d;
}

/// 64-character lowercase hex encoding, word 0 first, most significant
/// nibble of each word first.
std::string to_hex(const Descriptor& d);

/// Inverse of to_hex. Throws std::invalid_argument on malformed input.
Descriptor descriptor_from_hex(const std::string& hex);

}  // namespace kslam

#endif
