#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "motok/common.hpp"

namespace motok {

// Flattened motion token sequence. Interleave is frame-major, trunk-minor:
// tokens[t * N + n] is codebook n's index for downsampled frame t.
struct TokenStream {
  int codebook_count = 0;   // N
  int codebook_size = 0;    // K
  int downsample = 1;       // r
  float source_fps = 60.0f;
  std::vector<uint32_t> tokens;

  int64_t length() const { return static_cast<int64_t>(tokens.size()); }
  int64_t frame_count() const {
    return codebook_count > 0 ? length() / codebook_count : 0;
  }

  uint32_t at(int64_t t, int n) const { return tokens[t * codebook_count + n]; }
  void set(int64_t t, int n, uint32_t v) { tokens[t * codebook_count + n] = v; }

  void validate() const {
    if (codebook_count < 1 || codebook_size < 1 || downsample < 1)
      fail_domain("BadTokenStream", "layout fields must be positive");
    if (length() % codebook_count != 0)
      fail_domain("BadTokenStream", "token count not a multiple of codebook count");
    for (uint32_t v : tokens)
      if (v >= static_cast<uint32_t>(codebook_size))
        fail_domain("BadTokenStream", "token index out of range");
  }
};

}  // namespace motok
