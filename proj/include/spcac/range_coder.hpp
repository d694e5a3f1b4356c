// Copyright (c) the spcac project authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Byte-wise carry-less range coder (Subbotin variant, widened to 64 bits).
//
// 64-bit low/range with byte renormalization; instead of propagating carries
// the range is clipped whenever the interval straddles a byte boundary and
// gets too small, which costs a fraction of a bit on rare occasions and keeps
// the coder branch-exact on every platform. Renormalization keeps the range
// at 2^32 or above while totals are capped at 2^16, so the truncation in
// range / total wastes less than 2^-16 of the code space per symbol and
// cum * (range / total) never overflows 64 bits. Integer state only --
// encode and decode are bit-exact inverses by construction.

#include <cstdint>
#include <vector>

#include "spcac/common.hpp"
#include "spcac/entropy_model.hpp"

namespace spcac {

namespace rc {
constexpr uint64_t kTop = 1ull << 56;
constexpr uint64_t kBot = 1ull << 32;
constexpr uint32_t kMaxTotal = 1u << 16;
}  // namespace rc

class RangeEncoder {
 public:
  // cum/freq/total describe [cum, cum+freq) out of total; total <= 2^16.
  void encode(uint32_t cum, uint32_t freq, uint32_t total) {
    require(!flushed_, Err::state, "encoder already flushed");
    require(freq > 0 && total <= rc::kMaxTotal && cum + freq <= total, Err::config,
            "invalid coding interval");
    low_ += cum * (range_ /= total);
    range_ *= freq;
    normalize();
  }

  // Raw bits, most significant chunk first; nbits in [0, 32].
  void encode_bypass(uint32_t value, int nbits) {
    require(nbits >= 0 && nbits <= 32, Err::config, "bypass width out of range");
    if (nbits > 16) {
      encode_bypass(value >> 16, nbits - 16);
      nbits = 16;
      value &= 0xffffu;
    }
    if (nbits == 0) return;
    require(value < (1u << nbits), Err::config, "bypass value exceeds width");
    encode(value, 1, 1u << nbits);
  }

  // In-range symbols use their CDF slot; out-of-range symbols code an escape
  // followed by 16 raw bits of the biased value.
  void encode_symbol(int32_t s, const QuantizedCDF& cdf) {
    require(s >= -32768 && s <= kSymbolMax, Err::overflow, "symbol exceeds coder range");
    const int idx = cdf.index_of(s);
    encode(cdf.cum[size_t(idx)], cdf.freq(idx), cdf.total());
    if (idx == 0 || idx == cdf.escape_hi_index())
      encode_bypass(uint32_t(s + 32768), 16);
  }

  const std::vector<uint8_t>& flush() {
    require(!flushed_, Err::state, "encoder already flushed");
    flushed_ = true;
    for (int i = 0; i < 8; ++i) {
      bytes_.push_back(uint8_t(low_ >> 56));
      low_ <<= 8;
    }
    return bytes_;
  }

  // Exact after flush(); feeds bpp accounting.
  size_t bit_count() const { return bytes_.size() * 8; }
  const std::vector<uint8_t>& bytes() const { return bytes_; }

 private:
  void normalize() {
    while ((low_ ^ (low_ + range_)) < rc::kTop ||
           (range_ < rc::kBot && ((range_ = (0ull - low_) & (rc::kBot - 1)), true))) {
      bytes_.push_back(uint8_t(low_ >> 56));
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  uint64_t low_ = 0, range_ = 0xffffffffffffffffull;
  std::vector<uint8_t> bytes_;
  bool flushed_ = false;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
    for (int i = 0; i < 8; ++i) code_ = (code_ << 8) | next_byte();
  }
  explicit RangeDecoder(const std::vector<uint8_t>& bytes)
      : RangeDecoder(bytes.data(), bytes.size()) {}

  // Returns the cumulative-frequency bucket of the next symbol; must be
  // followed by decode_advance with the chosen interval.
  uint32_t decode_freq(uint32_t total) {
    require(total <= rc::kMaxTotal, Err::config, "invalid coding total");
    const uint64_t t = (code_ - low_) / (range_ /= total);
    if (t >= total)
      fail(Err::stream, "corrupt stream near byte " + std::to_string(pos_));
    return uint32_t(t);
  }

  void decode_advance(uint32_t cum, uint32_t freq, uint32_t total) {
    require(freq > 0 && cum + freq <= total, Err::config, "invalid coding interval");
    low_ += cum * range_;
    range_ *= freq;
    normalize();
  }

  uint32_t decode_bypass(int nbits) {
    require(nbits >= 0 && nbits <= 32, Err::config, "bypass width out of range");
    if (nbits > 16) {
      const uint32_t hi = decode_bypass(nbits - 16);
      return (hi << 16) | decode_bypass(16);
    }
    if (nbits == 0) return 0;
    const uint32_t total = 1u << nbits;
    const uint32_t v = decode_freq(total);
    decode_advance(v, 1, total);
    return v;
  }

  int32_t decode_symbol(const QuantizedCDF& cdf) {
    const uint32_t t = decode_freq(cdf.total());
    // largest index with cum[index] <= t
    size_t lo = 0, hi = cdf.cum.size() - 1;
    while (hi - lo > 1) {
      const size_t mid = (lo + hi) / 2;
      if (cdf.cum[mid] <= t)
        lo = mid;
      else
        hi = mid;
    }
    const int idx = int(lo);
    decode_advance(cdf.cum[size_t(idx)], cdf.freq(idx), cdf.total());
    if (idx == 0 || idx == cdf.escape_hi_index())
      return int32_t(decode_bypass(16)) - 32768;
    return cdf.sym_lo + int32_t(idx) - 1;
  }

  size_t byte_pos() const { return pos_; }

 private:
  uint8_t next_byte() {
    if (pos_ >= size_)
      fail(Err::stream, "stream truncated at byte " + std::to_string(pos_));
    return data_[pos_++];
  }

  void normalize() {
    while ((low_ ^ (low_ + range_)) < rc::kTop ||
           (range_ < rc::kBot && ((range_ = (0ull - low_) & (rc::kBot - 1)), true))) {
      code_ = (code_ << 8) | next_byte();
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  const uint8_t* data_;
  size_t size_, pos_ = 0;
  uint64_t low_ = 0, range_ = 0xffffffffffffffffull, code_ = 0;
};

}  // namespace spcac
