#pragma once

#include <bit>
#include <cstdint>
#include <vector>

namespace dfternet {

// Bit order: element i lives at bit (i mod 64) of word (i div 64), LSB-first.
// Planes are padded to whole words with zero bits.

inline int64_t words_for_bits(int64_t bits) { return (bits + 63) >> 6; }

inline bool get_bit(const std::vector<uint64_t>& plane, int64_t i) {
  return (plane[static_cast<size_t>(i >> 6)] >> (i & 63)) & 1u;
}

inline void set_bit(std::vector<uint64_t>& plane, int64_t i) {
  plane[static_cast<size_t>(i >> 6)] |= uint64_t(1) << (i & 63);
}

// Read `count` (1..64) bits starting at bit `off`; result in the low bits.
inline uint64_t read_bits(const uint64_t* src, int64_t off, int count) {
  const int64_t w = off >> 6;
  const int b = static_cast<int>(off & 63);
  uint64_t v = src[w] >> b;
  if (b != 0 && b + count > 64) v |= src[w + 1] << (64 - b);
  if (count < 64) v &= (uint64_t(1) << count) - 1;
  return v;
}

// OR `count` (1..64) low bits of `val` into dst at bit `off` (dst pre-zeroed).
inline void write_bits(uint64_t* dst, int64_t off, int count, uint64_t val) {
  const int64_t w = off >> 6;
  const int b = static_cast<int>(off & 63);
  dst[w] |= val << b;
  if (b != 0 && b + count > 64) dst[w + 1] |= val >> (64 - b);
}

inline void copy_bits(const uint64_t* src, int64_t src_off, uint64_t* dst, int64_t dst_off,
                      int64_t count) {
  while (count > 0) {
    const int chunk = static_cast<int>(count > 64 ? 64 : count);
    write_bits(dst, dst_off, chunk, read_bits(src, src_off, chunk));
    src_off += chunk;
    dst_off += chunk;
    count -= chunk;
  }
}

// Signed popcount balance of one aligned row pair:
// (#matching-sign nonzero pairs) - (#opposite-sign nonzero pairs).
inline int64_t popcount_balance(const uint64_t* a_sign, const uint64_t* a_val,
                                const uint64_t* b_sign, const uint64_t* b_val, int64_t words) {
  int64_t same = 0, diff = 0;
  for (int64_t w = 0; w < words; ++w) {
    const uint64_t both = a_val[w] & b_val[w];
    const uint64_t x = a_sign[w] ^ b_sign[w];
    same += std::popcount(~x & both);
    diff += std::popcount(x & both);
  }
  return same - diff;
}

}  // namespace dfternet
