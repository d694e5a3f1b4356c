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

// Evaluation: PLY point cloud I/O, color PSNR and Bjontegaard metrics.
//
// PSNR operates in full-range YUV (the same conversion the training loss
// uses), joins reference and reconstruction by coordinate, caps at 99.99 dB
// and combines channel MSEs 6:1:1 for the YUV aggregate. BD metrics fit a
// cubic in log10(rate) per curve and integrate analytically over the
// overlapping interval; curves that do not overlap are an error, never an
// extrapolation.

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "spcac/color.hpp"
#include "spcac/common.hpp"
#include "spcac/sparse_tensor.hpp"

namespace spcac {

constexpr double kPsnrCap = 99.99;

// ---------------------------------------------------------------------------
// PLY I/O. ASCII and binary_little_endian, scalar vertex properties; needs
// x/y/z and uchar red/green/blue, ignores everything after the vertex data.
// ---------------------------------------------------------------------------

namespace detail {

inline int ply_type_size(const std::string& t) {
  if (t == "char" || t == "int8" || t == "uchar" || t == "uint8") return 1;
  if (t == "short" || t == "int16" || t == "ushort" || t == "uint16") return 2;
  if (t == "int" || t == "int32" || t == "uint" || t == "uint32" || t == "float" ||
      t == "float32")
    return 4;
  if (t == "double" || t == "float64") return 8;
  fail(Err::format, "unsupported ply property type: " + t);
}

inline double ply_read_scalar(const uint8_t* p, const std::string& t) {
  if (t == "char" || t == "int8") return double(*reinterpret_cast<const int8_t*>(p));
  if (t == "uchar" || t == "uint8") return double(*p);
  auto load = [&](auto v) {
    std::memcpy(&v, p, sizeof(v));
    return v;
  };
  if (t == "short" || t == "int16") return double(load(int16_t{}));
  if (t == "ushort" || t == "uint16") return double(load(uint16_t{}));
  if (t == "int" || t == "int32") return double(load(int32_t{}));
  if (t == "uint" || t == "uint32") return double(load(uint32_t{}));
  if (t == "float" || t == "float32") return double(load(float{}));
  return load(double{});
}

inline int32_t ply_coord_to_voxel(double v, const std::string& axis) {
  const double r = std::round(v);
  if (std::abs(v - r) > 1e-6)
    fail(Err::format, "non-integer " + axis + " coordinate " + std::to_string(v) +
                          " (expected a voxelized cloud)");
  return int32_t(r);
}

}  // namespace detail

// Reads a voxelized cloud. With require_colors=false a color-less file is
// accepted and colors come back as zeros (enough for decode-side geometry).
inline PointCloud read_ply(const std::string& path, bool require_colors = true) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::io, "cannot open " + path);

  std::string line;
  if (!std::getline(f, line)) fail(Err::format, "empty file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "ply", Err::format, "not a ply file: " + path);

  bool binary = false, format_seen = false;
  long vertex_count = -1;
  struct Prop {
    std::string type, name;
  };
  std::vector<Prop> props;
  bool in_vertex_element = false;

  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment" || tok.empty()) continue;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii")
        binary = false;
      else if (fmt == "binary_little_endian")
        binary = true;
      else
        fail(Err::format, "unsupported ply format: " + fmt);
      format_seen = true;
    } else if (tok == "element") {
      std::string name;
      long count = 0;
      ls >> name >> count;
      if (name == "vertex") {
        vertex_count = count;
        in_vertex_element = true;
      } else {
        require(vertex_count >= 0, Err::format, "ply must lead with the vertex element");
        in_vertex_element = false;  // later elements are ignored
      }
    } else if (tok == "property") {
      if (!in_vertex_element) continue;
      std::string type;
      ls >> type;
      require(type != "list", Err::format, "list properties unsupported on vertices");
      Prop p;
      p.type = type;
      ls >> p.name;
      props.push_back(p);
    } else if (tok == "end_header") {
      break;
    } else {
      fail(Err::format, "unexpected ply header token: " + tok);
    }
  }
  require(format_seen, Err::format, "ply header missing format line");
  require(vertex_count >= 0, Err::format, "ply header missing vertex element");

  int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
  for (size_t i = 0; i < props.size(); ++i) {
    const std::string& n = props[i].name;
    if (n == "x") ix = int(i);
    if (n == "y") iy = int(i);
    if (n == "z") iz = int(i);
    if (n == "red") ir = int(i);
    if (n == "green") ig = int(i);
    if (n == "blue") ib = int(i);
  }
  require(ix >= 0 && iy >= 0 && iz >= 0, Err::format, "ply is missing x/y/z properties");
  const bool has_colors = ir >= 0 && ig >= 0 && ib >= 0;
  require(has_colors || !require_colors, Err::format,
          "ply is missing red/green/blue properties");
  if (has_colors)
    for (int c : {ir, ig, ib})
      require(props[size_t(c)].type == "uchar" || props[size_t(c)].type == "uint8", Err::format,
              "color properties must be uchar");

  PointCloud pc;
  pc.points.reserve(size_t(vertex_count));
  pc.colors.reserve(size_t(vertex_count));

  if (binary) {
    std::vector<int> offsets(props.size());
    int record = 0;
    for (size_t i = 0; i < props.size(); ++i) {
      offsets[i] = record;
      record += detail::ply_type_size(props[i].type);
    }
    std::vector<uint8_t> buf(static_cast<size_t>(record));
    for (long v = 0; v < vertex_count; ++v) {
      f.read(reinterpret_cast<char*>(buf.data()), record);
      if (!f) fail(Err::format, "truncated ply vertex data in " + path);
      auto get = [&](int i) {
        return detail::ply_read_scalar(buf.data() + offsets[size_t(i)], props[size_t(i)].type);
      };
      pc.points.push_back({detail::ply_coord_to_voxel(get(ix), "x"),
                           detail::ply_coord_to_voxel(get(iy), "y"),
                           detail::ply_coord_to_voxel(get(iz), "z")});
      if (has_colors)
        pc.colors.push_back({uint8_t(get(ir)), uint8_t(get(ig)), uint8_t(get(ib))});
      else
        pc.colors.push_back({0, 0, 0});
    }
  } else {
    for (long v = 0; v < vertex_count; ++v) {
      std::vector<double> vals(props.size());
      for (size_t i = 0; i < props.size(); ++i)
        if (!(f >> vals[i])) fail(Err::format, "truncated ply vertex data in " + path);
      pc.points.push_back({detail::ply_coord_to_voxel(vals[size_t(ix)], "x"),
                           detail::ply_coord_to_voxel(vals[size_t(iy)], "y"),
                           detail::ply_coord_to_voxel(vals[size_t(iz)], "z")});
      if (has_colors)
        pc.colors.push_back({uint8_t(vals[size_t(ir)]), uint8_t(vals[size_t(ig)]),
                             uint8_t(vals[size_t(ib)])});
      else
        pc.colors.push_back({0, 0, 0});
    }
  }
  return pc;
}

inline void write_ply(const std::string& path, const PointCloud& pc, bool binary = true) {
  require(pc.colors.size() == pc.points.size(), Err::invalid_input,
          "color count does not match point count");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Err::io, "cannot open " + path + " for writing");
  f << "ply\n"
    << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n")
    << "element vertex " << pc.points.size() << "\n"
    << "property float x\nproperty float y\nproperty float z\n"
    << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
    << "end_header\n";
  if (binary) {
    for (size_t i = 0; i < pc.points.size(); ++i) {
      const float xyz[3] = {float(pc.points[i].x), float(pc.points[i].y), float(pc.points[i].z)};
      f.write(reinterpret_cast<const char*>(xyz), 12);
      f.write(reinterpret_cast<const char*>(pc.colors[i].data()), 3);
    }
  } else {
    for (size_t i = 0; i < pc.points.size(); ++i)
      f << pc.points[i].x << " " << pc.points[i].y << " " << pc.points[i].z << " "
        << int(pc.colors[i][0]) << " " << int(pc.colors[i][1]) << " " << int(pc.colors[i][2])
        << "\n";
  }
  if (!f) fail(Err::io, "cannot write " + path);
}

// ---------------------------------------------------------------------------
// PSNR.
// ---------------------------------------------------------------------------

struct PsnrResult {
  double psnr_y = 0, psnr_u = 0, psnr_v = 0, psnr_yuv = 0;
  double mse_y = 0, mse_u = 0, mse_v = 0;
};

inline double mse_to_psnr(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  const double p = 10.0 * std::log10(255.0 * 255.0 / mse);
  return p > kPsnrCap ? kPsnrCap : p;
}

// Pairs points by coordinate; the clouds must cover the same voxel set.
inline PsnrResult psnr_metrics(const PointCloud& ref, const PointCloud& recon) {
  require(!ref.points.empty(), Err::invalid_input, "empty reference cloud");
  require(ref.points.size() == recon.points.size(), Err::invalid_input,
          "point count mismatch between reference and reconstruction");
  std::unordered_map<Coordinate, size_t, CoordinateHash> index;
  index.reserve(recon.points.size() * 2);
  for (size_t i = 0; i < recon.points.size(); ++i) index.emplace(recon.points[i], i);

  double se_y = 0, se_u = 0, se_v = 0;
  for (size_t i = 0; i < ref.points.size(); ++i) {
    auto it = index.find(ref.points[i]);
    if (it == index.end())
      fail(Err::invalid_input, "reconstruction is missing a reference coordinate");
    const auto& a = ref.colors[i];
    const auto& b = recon.colors[it->second];
    const auto ya = rgb_to_yuv_8bit(a[0], a[1], a[2]);
    const auto yb = rgb_to_yuv_8bit(b[0], b[1], b[2]);
    se_y += (ya[0] - yb[0]) * (ya[0] - yb[0]);
    se_u += (ya[1] - yb[1]) * (ya[1] - yb[1]);
    se_v += (ya[2] - yb[2]) * (ya[2] - yb[2]);
  }
  const double n = double(ref.points.size());
  PsnrResult r;
  r.mse_y = se_y / n;
  r.mse_u = se_u / n;
  r.mse_v = se_v / n;
  r.psnr_y = mse_to_psnr(r.mse_y);
  r.psnr_u = mse_to_psnr(r.mse_u);
  r.psnr_v = mse_to_psnr(r.mse_v);
  r.psnr_yuv = mse_to_psnr((6.0 * r.mse_y + r.mse_u + r.mse_v) / 8.0);
  return r;
}

// ---------------------------------------------------------------------------
// Rate-distortion points and CSV.
// ---------------------------------------------------------------------------

struct RDPoint {
  std::string label;
  double bpp = 0, psnr_y = 0, psnr_yuv = 0;
};
using RDCurve = std::vector<RDPoint>;

inline std::string rd_csv_line(const RDPoint& p) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%.10g", p.label.c_str(), p.bpp, p.psnr_y,
                p.psnr_yuv);
  return std::string(buf);
}

inline std::string rd_csv(const RDCurve& curve) {
  std::string out = "label,bpp,psnr_y,psnr_yuv\n";
  for (const RDPoint& p : curve) {
    out += rd_csv_line(p);
    out += '\n';
  }
  return out;
}

inline void write_rd_csv(const std::string& path, const RDCurve& curve) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(Err::io, "cannot open " + path + " for writing");
  f << rd_csv(curve);
  if (!f) fail(Err::io, "cannot write " + path);
}

inline RDCurve read_rd_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Err::io, "cannot open " + path);
  RDCurve curve;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!fields.empty() && fields[0] == "label") continue;  // header
    require(fields.size() == 4, Err::format, "csv line needs 4 fields: " + line);
    RDPoint p;
    p.label = fields[0];
    try {
      p.bpp = std::stod(fields[1]);
      p.psnr_y = std::stod(fields[2]);
      p.psnr_yuv = std::stod(fields[3]);
    } catch (const std::exception&) {
      fail(Err::format, "bad number in csv line: " + line);
    }
    curve.push_back(p);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Bjontegaard metrics.
// ---------------------------------------------------------------------------

struct BdResult {
  double bd_rate_percent = 0;  // average rate delta of `test` vs `ref`
  double bd_psnr_db = 0;       // average quality delta of `test` vs `ref`
};

namespace detail {

// Least-squares cubic through (x, y), x centered at its mean for
// conditioning. Returns {c0..c3, x_mean}.
struct CubicFit {
  std::array<double, 4> c{};
  double x0 = 0;

  double integral(double a, double b) const {
    auto anti = [&](double x) {
      const double t = x - x0;
      return c[0] * t + c[1] * t * t / 2 + c[2] * t * t * t / 3 + c[3] * t * t * t * t / 4;
    };
    return anti(b) - anti(a);
  }
};

inline CubicFit fit_cubic(const std::vector<double>& xs, const std::vector<double>& ys) {
  const size_t n = xs.size();
  double x0 = 0;
  for (double x : xs) x0 += x;
  x0 /= double(n);

  // normal equations A c = b with A[i][j] = sum t^(i+j), b[i] = sum t^i y
  double mom[7] = {0};
  double rhs[4] = {0};
  for (size_t i = 0; i < n; ++i) {
    const double t = xs[i] - x0;
    double tp = 1;
    for (int p = 0; p <= 6; ++p, tp *= t) mom[p] += tp;
    tp = 1;
    for (int p = 0; p <= 3; ++p, tp *= t) rhs[p] += tp * ys[i];
  }
  double a[4][5];
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) a[i][j] = mom[i + j];
    a[i][4] = rhs[i];
  }
  // Gaussian elimination with partial pivoting
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (piv != col)
      for (int j = 0; j < 5; ++j) std::swap(a[col][j], a[piv][j]);
    require(std::abs(a[col][col]) > 1e-12, Err::invalid_input,
            "degenerate rate-distortion curve (singular fit)");
    for (int r = col + 1; r < 4; ++r) {
      const double f = a[r][col] / a[col][col];
      for (int j = col; j < 5; ++j) a[r][j] -= f * a[col][j];
    }
  }
  CubicFit fit;
  fit.x0 = x0;
  for (int i = 3; i >= 0; --i) {
    double v = a[i][4];
    for (int j = i + 1; j < 4; ++j) v -= a[i][j] * fit.c[size_t(j)];
    fit.c[size_t(i)] = v / a[i][i];
  }
  return fit;
}

inline void validate_rd_curve(const RDCurve& curve, const char* which) {
  require(curve.size() >= 4, Err::invalid_input,
          std::string(which) + " curve needs at least 4 points");
  for (size_t i = 0; i < curve.size(); ++i) {
    require(curve[i].bpp > 0, Err::invalid_input, std::string(which) + " curve has bpp <= 0");
    if (i > 0)
      require(curve[i].bpp > curve[i - 1].bpp, Err::invalid_input,
              std::string(which) + " curve must have strictly increasing bpp");
  }
}

}  // namespace detail

// Average differences between two RD curves over their overlapping range;
// positive bd_rate_percent means `test` spends more bits at equal quality.
inline BdResult bd_metrics(const RDCurve& ref, const RDCurve& test, bool use_yuv = false) {
  detail::validate_rd_curve(ref, "reference");
  detail::validate_rd_curve(test, "test");
  auto psnr_of = [&](const RDPoint& p) { return use_yuv ? p.psnr_yuv : p.psnr_y; };

  std::vector<double> ra, pa, rb, pb;
  for (const RDPoint& p : ref) {
    ra.push_back(std::log10(p.bpp));
    pa.push_back(psnr_of(p));
  }
  for (const RDPoint& p : test) {
    rb.push_back(std::log10(p.bpp));
    pb.push_back(psnr_of(p));
  }

  BdResult out;
  {
    // BD quality delta: psnr as a function of log-rate
    const double lo = std::max(ra.front(), rb.front());
    const double hi = std::min(ra.back(), rb.back());
    require(hi > lo, Err::no_overlap, "rate ranges do not overlap");
    const auto fa = detail::fit_cubic(ra, pa);
    const auto fb = detail::fit_cubic(rb, pb);
    out.bd_psnr_db = (fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
  }
  {
    // BD rate delta: log-rate as a function of psnr
    double alo = pa[0], ahi = pa[0], blo = pb[0], bhi = pb[0];
    for (double v : pa) {
      alo = std::min(alo, v);
      ahi = std::max(ahi, v);
    }
    for (double v : pb) {
      blo = std::min(blo, v);
      bhi = std::max(bhi, v);
    }
    const double lo = std::max(alo, blo);
    const double hi = std::min(ahi, bhi);
    require(hi > lo, Err::no_overlap, "quality ranges do not overlap");
    const auto ga = detail::fit_cubic(pa, ra);
    const auto gb = detail::fit_cubic(pb, rb);
    const double avg = (gb.integral(lo, hi) - ga.integral(lo, hi)) / (hi - lo);
    out.bd_rate_percent = (std::pow(10.0, avg) - 1.0) * 100.0;
  }
  return out;
}

}  // namespace spcac
