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

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spcac {

// ---------------------------------------------------------------------------
// Errors. Every failure carries a machine-parsable code; the CLI forwards the
// code verbatim so scripts can branch on it.
// ---------------------------------------------------------------------------

enum class Err {
  invalid_input,  // bad caller-supplied data
  config,         // inconsistent shapes / strides / options
  state,          // object used out of its lifecycle (e.g. tape reuse)
  overflow,       // quantizer overflow, signals training divergence
  stream,         // undecodable or corrupted bitstream
  io,             // filesystem failure
  format,         // malformed file contents
  mismatch,       // model-id / geometry disagreement
  no_overlap,     // curves do not overlap for BD metrics
  divergence,     // non-finite values during optimization
};

inline const char* err_code(Err e) {
  switch (e) {
    case Err::invalid_input: return "E_INVALID_INPUT";
    case Err::config: return "E_CONFIG";
    case Err::state: return "E_STATE";
    case Err::overflow: return "E_OVERFLOW";
    case Err::stream: return "E_STREAM";
    case Err::io: return "E_IO";
    case Err::format: return "E_FORMAT";
    case Err::mismatch: return "E_MISMATCH";
    case Err::no_overlap: return "E_NO_OVERLAP";
    case Err::divergence: return "E_DIVERGENCE";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_code(code)) + ": " + msg), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

// ---------------------------------------------------------------------------
// Seed mixing / hashing. splitmix64 finalizer; used for seed derivation,
// coordinate hashing and the 128-bit model id.
// ---------------------------------------------------------------------------

inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seeds(uint64_t a, uint64_t b) { return mix64(mix64(a) ^ b); }
inline uint64_t mix_seeds(uint64_t a, uint64_t b, uint64_t c) {
  return mix64(mix_seeds(a, b) ^ c);
}
inline uint64_t mix_seeds(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return mix64(mix_seeds(a, b, c) ^ d);
}

struct Hash128 {
  uint64_t lo = 0, hi = 0;

  void update(const uint8_t* data, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
      uint64_t w;
      std::memcpy(&w, data + i, 8);
      lo = mix64(lo ^ w);
      hi = mix64(hi + (w ^ 0xc2b2ae3d27d4eb4full));
    }
    uint64_t tail = 0;
    for (size_t k = 0; i + k < n; ++k) tail |= uint64_t(data[i + k]) << (8 * k);
    if (i < n) {
      lo = mix64(lo ^ tail ^ (uint64_t(n) << 56));
      hi = mix64(hi + tail);
    }
  }
  void finalize(uint64_t total_len) {
    lo = mix64(lo ^ total_len);
    hi = mix64(hi ^ (total_len * 0x9e3779b97f4a7c15ull) ^ lo);
  }
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 raw draws only; the mapping to doubles and
// bounded ints is spelled out here so results do not depend on library
// distribution internals.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next() { return gen_(); }

  // [0, 1)
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), n > 0
  int64_t uniform_int(int64_t n) {
    return int64_t((static_cast<unsigned __int128>(next()) *
                    static_cast<unsigned __int128>(n)) >> 64);
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Dense row-major matrix of doubles. Per-point feature blocks everywhere.
// ---------------------------------------------------------------------------

class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double value = 0.0)
      : rows_(rows), cols_(cols), data_(size_t(rows) * size_t(cols), value) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool empty() const { return data_.empty(); }
  size_t size() const { return data_.size(); }

  double* row(int i) { return data_.data() + size_t(i) * cols_; }
  const double* row(int i) const { return data_.data() + size_t(i) * cols_; }

  double& at(int i, int j) { return data_[size_t(i) * cols_ + j]; }
  double at(int i, int j) const { return data_[size_t(i) * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  int rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

// A differentiable feature block: value plus (lazily allocated) gradient.
struct FeatureNode {
  Matrix value;
  Matrix grad;

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad() {
    if (!has_grad()) grad = Matrix(value.rows(), value.cols());
  }
};

// ---------------------------------------------------------------------------
// Little-endian byte serialization.
// ---------------------------------------------------------------------------

inline void put_u8(std::vector<uint8_t>& out, uint8_t v) { out.push_back(v); }
inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
}
inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
}
inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
}
inline void put_f64(std::vector<uint8_t>& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::io, "cannot open " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff n = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  if (n > 0) f.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!f) fail(Err::io, "cannot read " + path);
  return bytes;
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Err::io, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) fail(Err::io, "cannot write " + path);
}

class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

  size_t pos() const { return pos_; }
  size_t remaining() const { return size_ - pos_; }

  uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(data_[pos_]) | uint16_t(data_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  const uint8_t* bytes(size_t n) {
    need(n);
    const uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }

 private:
  void need(size_t n) {
    if (pos_ + n > size_)
      fail(Err::format, "truncated input at byte offset " + std::to_string(pos_));
  }
  const uint8_t* data_;
  size_t size_, pos_ = 0;
};

}  // namespace spcac
