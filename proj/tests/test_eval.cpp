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

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>

#include "spcac/eval.hpp"

using namespace spcac;

namespace {

PointCloud sample_cloud(uint64_t seed, int n) {
  Rng rng(seed);
  PointCloud pc;
  std::vector<Coordinate> coords;
  for (int i = 0; i < n; ++i)
    coords.push_back({int32_t(rng.uniform_int(64)) - 16, int32_t(rng.uniform_int(64)),
                      int32_t(rng.uniform_int(64))});
  CoordMapPtr map = build_coordinate_map(std::move(coords), 1);
  pc.points = map->list();
  for (size_t i = 0; i < pc.points.size(); ++i)
    pc.colors.push_back({uint8_t(rng.uniform_int(256)), uint8_t(rng.uniform_int(256)),
                         uint8_t(rng.uniform_int(256))});
  return pc;
}

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

RDCurve reference_curve() {
  RDCurve c;
  for (int i = 0; i < 4; ++i) {
    RDPoint p;
    p.label = "r" + std::to_string(i);
    p.bpp = 0.5 * std::pow(2.0, double(i));
    p.psnr_y = 30.0 + 2.0 * double(i);
    p.psnr_yuv = p.psnr_y + 0.5;
    c.push_back(p);
  }
  return c;
}

}  // namespace

TEST_CASE("ply files round trip in both formats") {
  PointCloud pc = sample_cloud(3, 500);
  for (bool binary : {true, false}) {
    TempFile f(binary ? "test_eval_bin.ply" : "test_eval_asc.ply");
    write_ply(f.path, pc, binary);
    PointCloud back = read_ply(f.path);
    REQUIRE(back.points == pc.points);
    REQUIRE(back.colors == pc.colors);
  }
}

TEST_CASE("ply reader accepts color-less geometry when told to") {
  TempFile f("test_eval_geom.ply");
  std::ofstream o(f.path);
  o << "ply\nformat ascii 1.0\ncomment decode-side geometry\n"
    << "element vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
    << "end_header\n0 0 0\n1 2 3\n-4 5 -6\n";
  o.close();
  CHECK_THROWS_AS(read_ply(f.path), Error);
  PointCloud pc = read_ply(f.path, false);
  REQUIRE(pc.size() == 3);
  CHECK(pc.points[2] == Coordinate{-4, 5, -6});
  CHECK(pc.colors[2] == std::array<uint8_t, 3>{0, 0, 0});
}

TEST_CASE("ply reader survives extra properties and later elements") {
  TempFile f("test_eval_extra.ply");
  std::ofstream o(f.path);
  o << "ply\nformat ascii 1.0\n"
    << "element vertex 2\n"
    << "property float x\nproperty float y\nproperty float z\n"
    << "property float nx\n"  // ignored payload column
    << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
    << "element face 1\nproperty int dummy\n"
    << "end_header\n"
    << "1 2 3 0.5 10 20 30\n4 5 6 0.25 40 50 60\n7\n";
  o.close();
  PointCloud pc = read_ply(f.path);
  REQUIRE(pc.size() == 2);
  CHECK(pc.points[0] == Coordinate{1, 2, 3});
  CHECK(pc.colors[1] == std::array<uint8_t, 3>{40, 50, 60});
}

TEST_CASE("ply reader rejects malformed input") {
  auto write_and_fail = [](const std::string& body, Err want) {
    TempFile f("test_eval_bad.ply");
    std::ofstream o(f.path);
    o << body;
    o.close();
    try {
      read_ply(f.path);
      FAIL("unreachable");
    } catch (const Error& e) {
      CHECK(e.code() == want);
    }
  };
  write_and_fail("nope\n", Err::format);
  write_and_fail("ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n",
                 Err::format);
  write_and_fail(
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
      "property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n"
      "end_header\n0.5 0 0 1 2 3\n",
      Err::format);  // non-integer coordinate
  write_and_fail(
      "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
      "property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n"
      "end_header\n0 0 0 1 2 3\n",
      Err::format);  // truncated vertex data
  write_and_fail(
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty list uchar int idx\nend_header\n",
      Err::format);  // list property on vertices
  write_and_fail(
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
      "property float z\nproperty float red\nproperty float green\nproperty float blue\n"
      "end_header\n0 0 0 1 2 3\n",
      Err::format);  // colors must be uchar
  try {
    read_ply("missing_file.ply");
    FAIL("unreachable");
  } catch (const Error& e) {
    CHECK(e.code() == Err::io);
  }
}

TEST_CASE("yuv conversion fixes the usual anchors") {
  const auto gray = rgb_to_yuv_8bit(128, 128, 128);
  CHECK(gray[0] == Catch::Approx(128.0).margin(1e-9));
  CHECK(gray[1] == Catch::Approx(128.0).margin(1e-9));
  CHECK(gray[2] == Catch::Approx(128.0).margin(1e-9));
  const auto white = rgb_to_yuv_8bit(255, 255, 255);
  CHECK(white[0] == Catch::Approx(255.0).margin(1e-9));
  CHECK(white[1] == Catch::Approx(128.0).margin(1e-9));
  const auto black = rgb_to_yuv_8bit(0, 0, 0);
  CHECK(black[0] == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("a uniform one-step error lands on the known psnr values") {
  PointCloud ref, recon;
  ref.points = {{0, 0, 0}};
  ref.colors = {{100, 100, 100}};
  recon.points = ref.points;
  recon.colors = {{101, 101, 101}};
  const PsnrResult r = psnr_metrics(ref, recon);
  // equal channel steps move luma by exactly one code value and leave chroma
  CHECK(r.mse_y == Catch::Approx(1.0).margin(1e-9));
  CHECK(r.mse_u == Catch::Approx(0.0).margin(1e-9));
  CHECK(r.psnr_y == Catch::Approx(48.1308036087).margin(1e-6));
  CHECK(r.psnr_yuv == Catch::Approx(49.3801909747).margin(1e-6));
}

TEST_CASE("psnr joins points by coordinate, not by order") {
  PointCloud ref = sample_cloud(7, 300);
  PointCloud recon = ref;
  std::reverse(recon.points.begin(), recon.points.end());
  std::reverse(recon.colors.begin(), recon.colors.end());
  const PsnrResult r = psnr_metrics(ref, recon);
  CHECK(r.psnr_y == kPsnrCap);
  CHECK(r.psnr_u == kPsnrCap);
  CHECK(r.psnr_yuv == kPsnrCap);

  recon.colors[5][1] ^= 0xff;  // one damaged point
  const PsnrResult r2 = psnr_metrics(ref, recon);
  CHECK(r2.psnr_y < kPsnrCap);

  PointCloud moved = recon;
  moved.points[0].x += 1000;
  CHECK_THROWS_AS(psnr_metrics(ref, moved), Error);
  PointCloud shorter = recon;
  shorter.points.pop_back();
  shorter.colors.pop_back();
  CHECK_THROWS_AS(psnr_metrics(ref, shorter), Error);
}

TEST_CASE("mse to psnr conversion caps and inverts") {
  CHECK(mse_to_psnr(0.0) == kPsnrCap);
  CHECK(mse_to_psnr(1e-12) == kPsnrCap);
  CHECK(mse_to_psnr(65025.0) == Catch::Approx(0.0).margin(1e-12));
  CHECK(mse_to_psnr(650.25) == Catch::Approx(20.0).margin(1e-12));
}

TEST_CASE("rd csv round trips through files") {
  RDCurve curve = reference_curve();
  TempFile f("test_eval_curve.csv");
  write_rd_csv(f.path, curve);
  RDCurve back = read_rd_csv(f.path);
  REQUIRE(back.size() == curve.size());
  for (size_t i = 0; i < curve.size(); ++i) {
    CHECK(back[i].label == curve[i].label);
    CHECK(back[i].bpp == Catch::Approx(curve[i].bpp).epsilon(1e-9));
    CHECK(back[i].psnr_y == Catch::Approx(curve[i].psnr_y).epsilon(1e-9));
    CHECK(back[i].psnr_yuv == Catch::Approx(curve[i].psnr_yuv).epsilon(1e-9));
  }

  std::ofstream o(f.path, std::ios::trunc);
  o << "label,bpp,psnr_y,psnr_yuv\nx,1.0,30\n";
  o.close();
  CHECK_THROWS_AS(read_rd_csv(f.path), Error);
  std::ofstream o2(f.path, std::ios::trunc);
  o2 << "x,abc,30,31\n";
  o2.close();
  CHECK_THROWS_AS(read_rd_csv(f.path), Error);
}

TEST_CASE("identical curves have zero bd metrics") {
  const RDCurve ref = reference_curve();
  const BdResult r = bd_metrics(ref, ref);
  CHECK(r.bd_rate_percent == Catch::Approx(0.0).margin(1e-6));
  CHECK(r.bd_psnr_db == Catch::Approx(0.0).margin(1e-6));
  const BdResult ryuv = bd_metrics(ref, ref, true);
  CHECK(ryuv.bd_rate_percent == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("doubling every rate costs one hundred percent bd-rate") {
  const RDCurve ref = reference_curve();
  RDCurve test = ref;
  for (RDPoint& p : test) p.bpp *= 2.0;
  const BdResult r = bd_metrics(ref, test);
  CHECK(r.bd_rate_percent == Catch::Approx(100.0).margin(1e-6));
  // on this curve 2x rate is worth 2 dB, so the quality delta is -2
  CHECK(r.bd_psnr_db == Catch::Approx(-2.0).margin(1e-6));
}

TEST_CASE("a one decibel gain maps to the exact bd-rate saving") {
  const RDCurve ref = reference_curve();
  RDCurve test = ref;
  for (RDPoint& p : test) {
    p.psnr_y += 1.0;
    p.psnr_yuv += 1.0;
  }
  const BdResult r = bd_metrics(ref, test);
  CHECK(r.bd_psnr_db == Catch::Approx(1.0).margin(1e-6));
  // 1 dB at 2 dB per rate doubling: rate factor 2^(-1/2)
  CHECK(r.bd_rate_percent == Catch::Approx(-29.2893218813).margin(1e-6));
  const BdResult ryuv = bd_metrics(ref, test, true);
  CHECK(ryuv.bd_psnr_db == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("disjoint curves refuse to produce bd numbers") {
  const RDCurve ref = reference_curve();
  RDCurve far_rate = ref;
  for (RDPoint& p : far_rate) p.bpp *= 100.0;
  try {
    bd_metrics(ref, far_rate);
    FAIL("unreachable");
  } catch (const Error& e) {
    CHECK(e.code() == Err::no_overlap);
  }
  RDCurve far_psnr = ref;
  for (RDPoint& p : far_psnr) p.psnr_y += 20.0;
  try {
    bd_metrics(ref, far_psnr);
    FAIL("unreachable");
  } catch (const Error& e) {
    CHECK(e.code() == Err::no_overlap);
  }
}

TEST_CASE("curve validation rejects unusable input") {
  RDCurve ref = reference_curve();
  RDCurve three(ref.begin(), ref.begin() + 3);
  CHECK_THROWS_AS(bd_metrics(three, ref), Error);
  CHECK_THROWS_AS(bd_metrics(ref, three), Error);
  RDCurve unsorted = ref;
  std::swap(unsorted[0], unsorted[2]);
  CHECK_THROWS_AS(bd_metrics(ref, unsorted), Error);
  RDCurve zero = ref;
  zero[0].bpp = 0.0;
  CHECK_THROWS_AS(bd_metrics(ref, zero), Error);
}

TEST_CASE("the cubic fit interpolates four points and integrates exactly") {
  // y = 2 + 3x - x^2 + 0.5x^3 through four samples
  auto poly = [](double x) { return 2.0 + 3.0 * x - x * x + 0.5 * x * x * x; };
  std::vector<double> xs = {-1.0, 0.5, 1.5, 3.0};
  std::vector<double> ys;
  for (double x : xs) ys.push_back(poly(x));
  const auto fit = detail::fit_cubic(xs, ys);
  // definite integral over [0, 2]: 2x + 1.5x^2 - x^3/3 + x^4/8
  const double want = (2.0 * 2 + 1.5 * 4 - 8.0 / 3.0 + 16.0 / 8.0);
  CHECK(fit.integral(0.0, 2.0) == Catch::Approx(want).epsilon(1e-9));
  // duplicate abscissae make the normal equations singular
  std::vector<double> flat = {1.0, 1.0, 1.0, 1.0};
  CHECK_THROWS_AS(detail::fit_cubic(flat, ys), Error);
}
