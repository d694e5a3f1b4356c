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

// Sparse voxel tensors.
//
// A sparse tensor is a pair {C, F}: a coordinate map C (deduplicated integer
// voxel coordinates in canonical lexicographic order plus a hash index) and a
// dense N x C feature matrix F whose row order follows the map. Convolutions
// never touch coordinates directly; they consume a KernelMap, the precomputed
// list of (input row, output row) pairs per kernel offset. Downscaling is
// floor division of coordinates by the stride ratio, so the full stride
// hierarchy {1, 2, 4, 8, 16, 32} is derivable from geometry alone -- both
// codec endpoints rebuild identical maps from the shared geometry.

#include <algorithm>
#include <array>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "spcac/common.hpp"

namespace spcac {

struct Coordinate {
  int32_t x = 0, y = 0, z = 0;
  friend bool operator==(const Coordinate&, const Coordinate&) = default;
};

inline bool lex_less(const Coordinate& a, const Coordinate& b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.z < b.z;
}

struct CoordinateHash {
  size_t operator()(const Coordinate& c) const {
    uint64_t h = mix64(uint64_t(uint32_t(c.x)));
    h = mix64(h ^ uint64_t(uint32_t(c.y)));
    h = mix64(h ^ uint64_t(uint32_t(c.z)));
    return size_t(h);
  }
};

// Floor division (rounds toward negative infinity, unlike C++ `/`).
inline int32_t floor_div(int32_t a, int32_t b) {
  int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// ---------------------------------------------------------------------------
// CoordinateMap: canonical-ordered coordinate list + row lookup.
// ---------------------------------------------------------------------------

class CoordinateMap {
 public:
  CoordinateMap() = default;

  int size() const { return int(list_.size()); }
  int32_t stride() const { return stride_; }
  const std::vector<Coordinate>& list() const { return list_; }
  const Coordinate& coord(int row) const { return list_[size_t(row)]; }

  // Row index of a coordinate, or -1 when absent.
  int lookup(const Coordinate& c) const {
    auto it = index_.find(c);
    return it == index_.end() ? -1 : it->second;
  }

  // Takes coordinates already sorted, deduplicated and stride-aligned.
  static CoordinateMap from_canonical(std::vector<Coordinate> coords, int32_t stride) {
    CoordinateMap m;
    m.stride_ = stride;
    m.list_ = std::move(coords);
    m.index_.reserve(m.list_.size() * 2);
    for (int i = 0; i < int(m.list_.size()); ++i) m.index_.emplace(m.list_[size_t(i)], i);
    return m;
  }

 private:
  std::vector<Coordinate> list_;
  std::unordered_map<Coordinate, int, CoordinateHash> index_;
  int32_t stride_ = 1;
};

using CoordMapPtr = std::shared_ptr<const CoordinateMap>;

// Deduplicates, sorts into canonical (lexicographic) order and indexes.
// Every coordinate must be a multiple of `stride`.
inline CoordMapPtr build_coordinate_map(std::vector<Coordinate> coords, int32_t stride) {
  require(stride >= 1, Err::config, "stride must be >= 1");
  for (const Coordinate& c : coords) {
    if (c.x % stride != 0 || c.y % stride != 0 || c.z % stride != 0)
      fail(Err::invalid_input, "coordinate not aligned to stride " + std::to_string(stride));
  }
  std::sort(coords.begin(), coords.end(), lex_less);
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return std::make_shared<const CoordinateMap>(
      CoordinateMap::from_canonical(std::move(coords), stride));
}

// Coarsens a map by an integer factor: c -> ns * floor(c / ns) with
// ns = stride * factor, deduplicated. factor == 1 returns an identical map.
inline CoordMapPtr downscale_coords(const CoordinateMap& map, int factor = 2) {
  require(factor >= 1, Err::config, "downscale factor must be >= 1");
  const int32_t ns = map.stride() * factor;
  std::vector<Coordinate> out;
  out.reserve(map.list().size());
  for (const Coordinate& c : map.list())
    out.push_back({ns * floor_div(c.x, ns), ns * floor_div(c.y, ns), ns * floor_div(c.z, ns)});
  std::sort(out.begin(), out.end(), lex_less);
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return std::make_shared<const CoordinateMap>(CoordinateMap::from_canonical(std::move(out), ns));
}

// ---------------------------------------------------------------------------
// SparseTensor.
// ---------------------------------------------------------------------------

struct SparseTensor {
  CoordMapPtr coords;
  std::shared_ptr<FeatureNode> feat;

  int rows() const { return feat ? feat->value.rows() : 0; }
  int channels() const { return feat ? feat->value.cols() : 0; }
  Matrix& values() { return feat->value; }
  const Matrix& values() const { return feat->value; }

  static SparseTensor zeros(CoordMapPtr map, int channels) {
    SparseTensor t;
    t.feat = std::make_shared<FeatureNode>();
    t.feat->value = Matrix(map->size(), channels);
    t.coords = std::move(map);
    return t;
  }

  static SparseTensor from_values(CoordMapPtr map, Matrix values) {
    require(values.rows() == map->size(), Err::config,
            "feature rows do not match coordinate count");
    SparseTensor t;
    t.coords = std::move(map);
    t.feat = std::make_shared<FeatureNode>();
    t.feat->value = std::move(values);
    return t;
  }
};

// A voxelized point cloud with 8-bit color attributes. Geometry is carried
// losslessly beside any bitstream; only attributes are coded.
struct PointCloud {
  std::vector<Coordinate> points;
  std::vector<std::array<uint8_t, 3>> colors;

  size_t size() const { return points.size(); }
};

// ---------------------------------------------------------------------------
// Kernel offsets. A cubic window of odd size n enumerates offsets in
// lexicographic order, components in [-n/2, n/2].
// ---------------------------------------------------------------------------

inline int kernel_volume(int kernel_size) { return kernel_size * kernel_size * kernel_size; }

inline Coordinate kernel_offset(int kernel_size, int index) {
  const int r = kernel_size / 2;
  const int dz = index % kernel_size;
  const int dy = (index / kernel_size) % kernel_size;
  const int dx = index / (kernel_size * kernel_size);
  return {int32_t(dx - r), int32_t(dy - r), int32_t(dz - r)};
}

// ---------------------------------------------------------------------------
// KernelMap: per-offset (input row, output row) pairs plus a CSR view over
// output rows used by the compute kernels. Offsets are expressed in units of
// the finer stride. Forward relation per offset k:
//     in.coord == out.coord + k * s_fine
// The transposed map uses the same relation with the roles of in/out swapped,
// which makes a transposed convolution the exact adjoint of the matching
// forward convolution.
// ---------------------------------------------------------------------------

struct KernelMap {
  CoordMapPtr in, out;
  int kernel_size = 0;
  bool transposed = false;

  // pairs[k] lists (in_row, out_row), ascending in out_row.
  std::vector<std::vector<std::pair<int32_t, int32_t>>> pairs;

  // CSR over output rows; entries are (offset index, input row), ascending in
  // offset index within each row. This fixes the per-row accumulation order.
  std::vector<int32_t> row_ptr;
  std::vector<std::pair<int32_t, int32_t>> row_entries;

  size_t pair_count() const { return row_entries.size(); }
};

inline KernelMap build_kernel_map(CoordMapPtr in, CoordMapPtr out, int kernel_size,
                                  bool transposed) {
  require(kernel_size >= 1 && kernel_size % 2 == 1, Err::config, "kernel size must be odd");
  if (transposed)
    require(in->stride() % out->stride() == 0, Err::config,
            "transposed kernel map needs in stride divisible by out stride");
  else
    require(out->stride() % in->stride() == 0, Err::config,
            "kernel map needs out stride divisible by in stride");

  KernelMap km;
  km.kernel_size = kernel_size;
  km.transposed = transposed;
  const int volume = kernel_volume(kernel_size);
  km.pairs.resize(size_t(volume));

  // Offsets step in units of the finer of the two strides.
  const int32_t unit = transposed ? out->stride() : in->stride();
  const int n_out = out->size();
  km.row_ptr.reserve(size_t(n_out) + 1);
  km.row_ptr.push_back(0);

  std::array<Coordinate, 343> offs{};  // up to 7^3 precomputed
  require(volume <= int(offs.size()), Err::config, "kernel size too large");
  for (int k = 0; k < volume; ++k) {
    Coordinate o = kernel_offset(kernel_size, k);
    offs[size_t(k)] = {o.x * unit, o.y * unit, o.z * unit};
  }

  for (int j = 0; j < n_out; ++j) {
    const Coordinate c = out->coord(j);
    for (int k = 0; k < volume; ++k) {
      const Coordinate nb = {c.x + offs[size_t(k)].x, c.y + offs[size_t(k)].y,
                             c.z + offs[size_t(k)].z};
      const int i = in->lookup(nb);
      if (i < 0) continue;
      km.pairs[size_t(k)].push_back({int32_t(i), int32_t(j)});
      km.row_entries.push_back({int32_t(k), int32_t(i)});
    }
    km.row_ptr.push_back(int32_t(km.row_entries.size()));
  }

  km.in = std::move(in);
  km.out = std::move(out);
  return km;
}

// ---------------------------------------------------------------------------
// Stride hierarchy. Fixed levels {1, 2, 4, 8, 16, 32}; level k is the
// floor-division coarsening of level k-1, so it is a pure function of the
// input geometry.
// ---------------------------------------------------------------------------

struct CoordinateHierarchy {
  static constexpr int kLevels = 6;
  static constexpr std::array<int32_t, kLevels> kStrides = {1, 2, 4, 8, 16, 32};

  std::array<CoordMapPtr, kLevels> levels;

  const CoordMapPtr& at_stride(int32_t stride) const {
    for (int i = 0; i < kLevels; ++i)
      if (kStrides[size_t(i)] == stride) return levels[size_t(i)];
    fail(Err::config, "no hierarchy level at stride " + std::to_string(stride));
  }
};

inline CoordinateHierarchy build_hierarchy(const std::vector<Coordinate>& geometry) {
  require(!geometry.empty(), Err::invalid_input, "empty geometry");
  CoordinateHierarchy h;
  h.levels[0] = build_coordinate_map(geometry, 1);
  for (int i = 1; i < CoordinateHierarchy::kLevels; ++i)
    h.levels[size_t(i)] = downscale_coords(*h.levels[size_t(i) - 1], 2);
  return h;
}

}  // namespace spcac
