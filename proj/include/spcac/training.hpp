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

// Desk-scale training harness.
//
// Data is synthetic: procedurally generated voxel scenes (sphere shells, box
// shells, heightfield patches) with smooth or piecewise-constant colorings,
// fully determined by a seed. Training minimizes
//
//   loss = rate_y + rate_z + lambda * sum_points ||yuv(x) - yuv(x_hat)||^2
//
// with the YUV distortion in the [0,1] color domain, additive-uniform-noise
// quantization relaxation, and Adam on a geometric learning-rate decay. One
// cloud per optimizer step by default; `accum` averages gradients over groups
// of clouds. Every random draw derives from the config seed, so a rerun with
// the same config reproduces weights, logs and bitstreams byte for byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spcac/autodiff.hpp"
#include "spcac/codec.hpp"
#include "spcac/color.hpp"
#include "spcac/common.hpp"
#include "spcac/entropy_model.hpp"
#include "spcac/eval.hpp"
#include "spcac/sparse_tensor.hpp"

namespace spcac {

// ---------------------------------------------------------------------------
// Deterministic lattice value noise in [0, 1).
// ---------------------------------------------------------------------------

namespace detail {

inline double lattice_value(int64_t ix, int64_t iy, int64_t iz, uint64_t seed) {
  const uint64_t h = mix_seeds(seed, uint64_t(ix), uint64_t(iy), uint64_t(iz));
  return double(h >> 11) * 0x1.0p-53;
}

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

}  // namespace detail

inline double value_noise3(double x, double y, double z, uint64_t seed) {
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const auto ix = int64_t(fx), iy = int64_t(fy), iz = int64_t(fz);
  const double tx = detail::smoothstep(x - fx);
  const double ty = detail::smoothstep(y - fy);
  const double tz = detail::smoothstep(z - fz);
  double c[8];
  for (int k = 0; k < 8; ++k)
    c[k] = detail::lattice_value(ix + (k & 1), iy + ((k >> 1) & 1), iz + (k >> 2), seed);
  const double x00 = c[0] + tx * (c[1] - c[0]);
  const double x10 = c[2] + tx * (c[3] - c[2]);
  const double x01 = c[4] + tx * (c[5] - c[4]);
  const double x11 = c[6] + tx * (c[7] - c[6]);
  const double y0 = x00 + ty * (x10 - x00);
  const double y1 = x01 + ty * (x11 - x01);
  return y0 + tz * (y1 - y0);
}

inline double value_noise2(double x, double y, uint64_t seed) {
  return value_noise3(x, y, 0.5, seed);
}

// ---------------------------------------------------------------------------
// Synthetic scenes.
// ---------------------------------------------------------------------------

enum class TextureMode { gradient = 0, noise = 1, patches = 2 };

struct SyntheticSceneSpec {
  uint64_t seed = 0;
  int resolution_bits = 6;  // voxel grid side 2^bits, in [4, 8]
  TextureMode texture = TextureMode::gradient;
};

struct PrimitiveInfo {
  int kind = 0;  // 0 = sphere shell, 1 = box shell, 2 = heightfield patch
  double center[3] = {0, 0, 0};
  double radius = 0;           // sphere
  double half[3] = {0, 0, 0};  // box half extents
  int axis = 2;                // heightfield up axis (x/y/z = 0/1/2)
};

struct GeneratedCloud {
  PointCloud cloud;
  std::vector<PrimitiveInfo> primitives;
  int attempts = 1;  // > 1 if a degenerate draw had to be regenerated
};

namespace detail {

using CoordSet = std::unordered_set<Coordinate, CoordinateHash>;

inline void add_sphere_shell(CoordSet& out, Rng& rng, int grid, PrimitiveInfo& info) {
  double c[3];
  for (double& v : c) v = rng.uniform(0.3, 0.7) * grid;
  const double r = rng.uniform(0.10, 0.20) * grid;
  info.kind = 0;
  std::copy(c, c + 3, info.center);
  info.radius = r;
  const auto lo = [&](double v) { return std::max(0, int(std::floor(v - r - 1))); };
  const auto hi = [&](double v) { return std::min(grid - 1, int(std::ceil(v + r + 1))); };
  for (int x = lo(c[0]); x <= hi(c[0]); ++x)
    for (int y = lo(c[1]); y <= hi(c[1]); ++y)
      for (int z = lo(c[2]); z <= hi(c[2]); ++z) {
        const double dx = x + 0.5 - c[0], dy = y + 0.5 - c[1], dz = z + 0.5 - c[2];
        const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
        if (std::abs(d - r) <= 0.75) out.insert({x, y, z});
      }
}

inline void add_box_shell(CoordSet& out, Rng& rng, int grid, PrimitiveInfo& info) {
  double c[3], e[3];
  for (double& v : c) v = rng.uniform(0.3, 0.7) * grid;
  for (double& v : e) v = rng.uniform(0.08, 0.15) * grid;
  info.kind = 1;
  std::copy(c, c + 3, info.center);
  std::copy(e, e + 3, info.half);
  auto inside = [&](int x, int y, int z, double shrink) {
    return std::abs(x + 0.5 - c[0]) <= e[0] - shrink &&
           std::abs(y + 0.5 - c[1]) <= e[1] - shrink &&
           std::abs(z + 0.5 - c[2]) <= e[2] - shrink;
  };
  const auto lo = [&](int a) { return std::max(0, int(std::floor(c[a] - e[a] - 1))); };
  const auto hi = [&](int a) { return std::min(grid - 1, int(std::ceil(c[a] + e[a] + 1))); };
  for (int x = lo(0); x <= hi(0); ++x)
    for (int y = lo(1); y <= hi(1); ++y)
      for (int z = lo(2); z <= hi(2); ++z)
        if (inside(x, y, z, 0.0) && !inside(x, y, z, 1.0)) out.insert({x, y, z});
}

// Heightfield over a random axis-aligned rectangle. Columns are filled down
// to the lowest neighboring height so slopes stay watertight.
inline void add_heightfield_patch(CoordSet& out, Rng& rng, int grid, PrimitiveInfo& info) {
  const int axis = int(rng.uniform_int(3));
  const int u0 = int(rng.uniform(0.10, 0.35) * grid);
  const int v0 = int(rng.uniform(0.10, 0.35) * grid);
  const int ulen = std::min(grid - u0, int(rng.uniform(0.30, 0.50) * grid) + 2);
  const int vlen = std::min(grid - v0, int(rng.uniform(0.30, 0.50) * grid) + 2);
  const double base = rng.uniform(0.30, 0.70) * grid;
  const double amp = rng.uniform(2.0, 0.12 * grid);
  const double lam = rng.uniform(5.0, 12.0);
  const uint64_t nseed = rng.next();

  info.kind = 2;
  info.axis = axis;
  info.center[0] = u0 + 0.5 * ulen;
  info.center[1] = v0 + 0.5 * vlen;
  info.center[2] = base;
  info.half[0] = 0.5 * ulen;
  info.half[1] = 0.5 * vlen;
  info.half[2] = amp;

  std::vector<int> h(size_t(ulen) * size_t(vlen));
  for (int u = 0; u < ulen; ++u)
    for (int v = 0; v < vlen; ++v) {
      const double n = 2.0 * value_noise2((u0 + u) / lam, (v0 + v) / lam, nseed) - 1.0;
      h[size_t(u) * size_t(vlen) + size_t(v)] =
          std::clamp(int(std::lround(base + amp * n)), 0, grid - 1);
    }
  auto emit = [&](int u, int v, int w) {
    Coordinate p{};
    const int uu = u0 + u, vv = v0 + v;
    if (axis == 0)
      p = {w, uu, vv};
    else if (axis == 1)
      p = {uu, w, vv};
    else
      p = {uu, vv, w};
    out.insert(p);
  };
  for (int u = 0; u < ulen; ++u)
    for (int v = 0; v < vlen; ++v) {
      const int own = h[size_t(u) * size_t(vlen) + size_t(v)];
      int mn = own, mx = own;
      if (u > 0) {
        const int n = h[size_t(u - 1) * size_t(vlen) + size_t(v)];
        mn = std::min(mn, n);
        mx = std::max(mx, n);
      }
      if (v > 0) {
        const int n = h[size_t(u) * size_t(vlen) + size_t(v - 1)];
        mn = std::min(mn, n);
        mx = std::max(mx, n);
      }
      for (int w = mn; w <= mx; ++w) emit(u, v, w);
    }
}

inline std::array<double, 3> texture_color(const Coordinate& p, TextureMode mode, Rng& setup_rng,
                                           bool first_call, std::vector<double>& state,
                                           const std::vector<Coordinate>& all, int grid) {
  // state is computed once per cloud on the first call and reused after.
  switch (mode) {
    case TextureMode::gradient: {
      if (first_call) {
        double d[3], n = 0;
        do {
          for (double& v : d) v = setup_rng.uniform(-1.0, 1.0);
          n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        } while (n < 0.3);
        for (double& v : d) v /= n;
        double tmin = 1e300, tmax = -1e300;
        for (const Coordinate& q : all) {
          const double t = q.x * d[0] + q.y * d[1] + q.z * d[2];
          tmin = std::min(tmin, t);
          tmax = std::max(tmax, t);
        }
        state = {d[0], d[1], d[2], tmin, tmax};
        for (int i = 0; i < 6; ++i) state.push_back(setup_rng.uniform(0.05, 0.95));
      }
      const double t = p.x * state[0] + p.y * state[1] + p.z * state[2];
      const double s = (t - state[3]) / std::max(state[4] - state[3], 1e-9);
      return {state[5] + s * (state[8] - state[5]), state[6] + s * (state[9] - state[6]),
              state[7] + s * (state[10] - state[7])};
    }
    case TextureMode::noise: {
      if (first_call) {
        state = {setup_rng.uniform(6.0, 16.0)};
        for (int c = 0; c < 3; ++c) state.push_back(double(setup_rng.next() >> 1));
      }
      std::array<double, 3> rgb{};
      for (int c = 0; c < 3; ++c) {
        const auto seed = uint64_t(state[size_t(1 + c)]);
        const double lam = state[0];
        const double v = 0.7 * value_noise3(p.x / lam, p.y / lam, p.z / lam, seed) +
                         0.3 * value_noise3(2.0 * p.x / lam, 2.0 * p.y / lam, 2.0 * p.z / lam,
                                            mix64(seed));
        rgb[size_t(c)] = 0.08 + 0.84 * v;
      }
      return rgb;
    }
    case TextureMode::patches: {
      if (first_call) {
        const int k = 5 + int(setup_rng.uniform_int(8));
        state.clear();
        for (int i = 0; i < k; ++i) {
          for (int a = 0; a < 3; ++a) state.push_back(setup_rng.uniform(0.0, 1.0));
          for (int c = 0; c < 3; ++c) state.push_back(setup_rng.uniform(0.05, 0.95));
        }
      }
      const size_t k = state.size() / 6;
      size_t best = 0;
      double best_d = 1e300;
      for (size_t i = 0; i < k; ++i) {
        const double dx = p.x - state[i * 6 + 0] * grid;
        const double dy = p.y - state[i * 6 + 1] * grid;
        const double dz = p.z - state[i * 6 + 2] * grid;
        const double d = dx * dx + dy * dy + dz * dz;
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      return {state[best * 6 + 3], state[best * 6 + 4], state[best * 6 + 5]};
    }
  }
  fail(Err::config, "unknown texture mode");
}

}  // namespace detail

inline GeneratedCloud generate_cloud(const SyntheticSceneSpec& spec) {
  require(spec.resolution_bits >= 4 && spec.resolution_bits <= 8, Err::config,
          "resolution_bits must be in [4, 8]");
  const int grid = 1 << spec.resolution_bits;

  for (int attempt = 0; attempt < 20; ++attempt) {
    Rng rng(mix_seeds(spec.seed, 0x53434e45u, uint64_t(attempt)));
    GeneratedCloud gen;
    gen.attempts = attempt + 1;

    detail::CoordSet voxels;
    const int n_prims = 1 + int(rng.uniform_int(2));
    for (int i = 0; i < n_prims; ++i) {
      PrimitiveInfo info;
      switch (rng.uniform_int(3)) {
        case 0: detail::add_sphere_shell(voxels, rng, grid, info); break;
        case 1: detail::add_box_shell(voxels, rng, grid, info); break;
        default: detail::add_heightfield_patch(voxels, rng, grid, info); break;
      }
      gen.primitives.push_back(info);
    }
    if (voxels.size() < 8) continue;  // degenerate draw; retry deterministically

    gen.cloud.points.assign(voxels.begin(), voxels.end());
    std::sort(gen.cloud.points.begin(), gen.cloud.points.end(), lex_less);

    std::vector<double> tex_state;
    gen.cloud.colors.resize(gen.cloud.points.size());
    for (size_t i = 0; i < gen.cloud.points.size(); ++i) {
      const auto rgb = detail::texture_color(gen.cloud.points[i], spec.texture, rng, i == 0,
                                             tex_state, gen.cloud.points, grid);
      for (int c = 0; c < 3; ++c)
        gen.cloud.colors[i][size_t(c)] =
            uint8_t(std::llround(255.0 * std::clamp(rgb[size_t(c)], 0.0, 1.0)));
    }
    return gen;
  }
  fail(Err::invalid_input, "scene generation kept producing degenerate clouds");
}

// `count` clouds with texture modes cycled; item i depends only on (seed, i).
inline std::vector<PointCloud> make_dataset(uint64_t seed, int count, int resolution_bits) {
  require(count >= 0, Err::config, "negative dataset size");
  std::vector<PointCloud> out;
  out.reserve(size_t(count));
  for (int i = 0; i < count; ++i) {
    SyntheticSceneSpec spec;
    spec.seed = mix_seeds(seed, 0x434c4f55u, uint64_t(i));
    spec.resolution_bits = resolution_bits;
    spec.texture = TextureMode(i % 3);
    out.push_back(generate_cloud(spec).cloud);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rate-distortion loss.
// ---------------------------------------------------------------------------

// sum over points of ||yuv(ref) - yuv(recon)||^2, colors in [0,1]. Both
// tensors share the stride-1 coordinate map; gradients flow into recon only.
inline ScalarRef yuv_sse(const SparseTensor& ref, const SparseTensor& recon, Tape* tape) {
  require(ref.coords.get() == recon.coords.get(), Err::config,
          "distortion needs tensors on the same coordinates");
  require(ref.channels() == 3 && recon.channels() == 3, Err::config,
          "distortion expects 3-channel color tensors");
  double sse = 0.0;
  for (int j = 0; j < ref.rows(); ++j) {
    const double* a = ref.values().row(j);
    const double* b = recon.values().row(j);
    const auto e = rgb_to_yuv_linear(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    sse += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
  }
  ScalarRef out = make_scalar(sse);
  if (tape)
    tape->record([rf = ref.feat, xf = recon.feat, out]() {
      if (out->grad == 0.0) return;
      xf->ensure_grad();
      for (int j = 0; j < rf->value.rows(); ++j) {
        const double* a = rf->value.row(j);
        const double* b = xf->value.row(j);
        const auto e = rgb_to_yuv_linear(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
        double* g = xf->grad.row(j);
        // d(sse)/d(recon) = -2 M^T (M (ref - recon))
        for (int c = 0; c < 3; ++c) {
          const double mt =
              kRgbToYuv[size_t(c)] * e[0] + kRgbToYuv[size_t(3 + c)] * e[1] +
              kRgbToYuv[size_t(6 + c)] * e[2];
          g[c] += out->grad * -2.0 * mt;
        }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Training configuration.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lambda = 1000;
  int epochs = 50;
  double lr_start = 1e-4;
  double lr_end = 2e-5;
  uint64_t seed = 1;
  int dataset_size = 200;
  int heldout_size = 8;
  int resolution_bits = 6;
  int channels = 32;  // trunk width and latent channels
  int hyper_channels = 32;
  PriorVariant variant = PriorVariant::joint;
  int accum = 1;  // clouds averaged per optimizer step

  void validate() const {
    require(lambda_tag(lambda) != 0, Err::config,
            "lambda must be one of the supported rate points");
    require(epochs >= 1, Err::config, "epochs must be >= 1");
    require(lr_start >= lr_end && lr_end >= 0.0, Err::config,
            "need lr_start >= lr_end >= 0");
    require(!(lr_start > 0.0 && lr_end == 0.0), Err::config,
            "geometric decay needs lr_end > 0 when lr_start > 0");
    require(dataset_size >= 1 && heldout_size >= 0, Err::config, "bad dataset sizes");
    require(resolution_bits >= 4 && resolution_bits <= 8, Err::config,
            "resolution_bits must be in [4, 8]");
    require(channels >= 1 && hyper_channels >= 1, Err::config, "bad channel counts");
    require(accum >= 1, Err::config, "accum must be >= 1");
  }
};

inline double learning_rate(const TrainConfig& tc, int epoch) {
  if (tc.lr_start <= 0.0) return 0.0;
  if (tc.epochs <= 1 || tc.lr_start == tc.lr_end) return tc.lr_start;
  const double t = double(epoch) / double(tc.epochs - 1);
  return tc.lr_start * std::pow(tc.lr_end / tc.lr_start, t);
}

inline CodecConfig codec_config_from(const TrainConfig& tc) {
  CodecConfig c;
  c.width = tc.channels;
  c.latent_channels = tc.channels;
  c.hyper_channels = tc.hyper_channels;
  c.variant = tc.variant;
  c.lambda_tag = lambda_tag(tc.lambda);
  return c;
}

// ---------------------------------------------------------------------------
// One training step (forward only; the caller drives backward and Adam).
// ---------------------------------------------------------------------------

struct StepOutput {
  ScalarRef loss, rate_y, rate_z, distortion;
  int n_points = 0;
  // Backward closures reference these kernel maps; they must live until the
  // tape has been consumed, so the step output owns them.
  std::shared_ptr<CodecMaps> maps;
};

inline SparseTensor cloud_to_tensor(const PointCloud& pc, const CoordMapPtr& map) {
  require(pc.colors.size() == pc.points.size(), Err::invalid_input,
          "color count does not match point count");
  require(map->size() == int(pc.points.size()), Err::invalid_input,
          "duplicate coordinates in input");
  Matrix x(map->size(), 3);
  for (size_t p = 0; p < pc.points.size(); ++p) {
    const int row = map->lookup(pc.points[p]);
    for (int c = 0; c < 3; ++c) x.at(row, c) = double(pc.colors[p][size_t(c)]) / 255.0;
  }
  return SparseTensor::from_values(map, std::move(x));
}

inline StepOutput training_step_forward(const PointCloud& pc, ModelWeights& w, double lambda,
                                        uint64_t noise_seed, Tape* tape) {
  const CodecConfig& cfg = w.config();
  StepOutput out;
  out.maps = std::make_shared<CodecMaps>(build_codec_maps(build_hierarchy(pc.points), cfg));
  const CodecMaps& m = *out.maps;
  out.n_points = m.hier.levels[0]->size();

  const SparseTensor X = cloud_to_tensor(pc, m.hier.levels[0]);
  const SparseTensor Y = analysis_transform(X, w, m, tape);
  const SparseTensor y_tilde = quantize_train(Y, mix_seeds(noise_seed, 1), tape);

  out.rate_z = make_scalar(0.0);
  SparseTensor psi;
  bool has_psi = false;
  if (variant_has_hyper(cfg.variant)) {
    const SparseTensor Z = hyper_analysis(y_tilde, w, m, tape);
    const SparseTensor z_tilde = quantize_train(Z, mix_seeds(noise_seed, 2), tape);
    out.rate_z = factorized_rate_bits(z_tilde, w.prior_z(), tape);
    psi = hyper_synthesis(z_tilde, w, m, tape);
    has_psi = true;
  }

  if (cfg.variant == PriorVariant::factorized) {
    out.rate_y = factorized_rate_bits(y_tilde, w.prior_y(), tape);
  } else {
    const EntropyParams ep = context_params(y_tilde, has_psi ? &psi : nullptr, w, m, tape);
    out.rate_y = laplace_rate_bits(y_tilde, ep, tape);
  }

  const SparseTensor x_hat = synthesis_transform(y_tilde, w, m, tape);
  out.distortion = yuv_sse(X, x_hat, tape);
  out.loss = scalar_weighted_sum(
      {{1.0, out.rate_y}, {1.0, out.rate_z}, {lambda, out.distortion}}, tape);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double loss = 0;         // mean per cloud
  double rate_y_bits = 0;  // mean per cloud
  double rate_z_bits = 0;  // mean per cloud
  double mse_yuv = 0;      // mean per color component, [0,1] domain
  double lr = 0;
};

struct TrainResult {
  ModelWeights weights;
  std::vector<EpochRecord> log;
};

inline std::string train_log_csv(const std::vector<EpochRecord>& log) {
  std::string out = "epoch,loss,rate_y_bits,rate_z_bits,mse_yuv,lr\n";
  for (const EpochRecord& r : log) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.loss,
                  r.rate_y_bits, r.rate_z_bits, r.mse_yuv, r.lr);
    out += buf;
  }
  return out;
}

namespace detail {

inline std::vector<size_t> shuffled_indices(size_t n, uint64_t seed) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
  return idx;
}

}  // namespace detail

// Progress callback: called after each epoch with the record just logged.
using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(const TrainConfig& tc, const std::vector<PointCloud>& dataset,
                         const EpochCallback& on_epoch = nullptr) {
  tc.validate();
  require(!dataset.empty(), Err::invalid_input, "empty training dataset");

  TrainResult res;
  res.weights = ModelWeights::create(codec_config_from(tc), mix_seeds(tc.seed, 0x57454947u));
  AdamOptimizer adam;
  const std::vector<ParamTensor*> params = res.weights.params();
  const size_t n = dataset.size();

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = learning_rate(tc, epoch);
    const auto order = detail::shuffled_indices(n, mix_seeds(tc.seed, 0x53485546u, uint64_t(epoch)));

    double sum_loss = 0, sum_ry = 0, sum_rz = 0, sum_sse = 0;
    int64_t total_points = 0;
    size_t i = 0;
    while (i < n) {
      const size_t group = std::min(size_t(tc.accum), n - i);
      for (size_t k = 0; k < group; ++k, ++i) {
        const size_t idx = order[i];
        Tape tape;
        const StepOutput step =
            training_step_forward(dataset[idx], res.weights, tc.lambda,
                                  mix_seeds(tc.seed, uint64_t(epoch), uint64_t(idx)), &tape);
        require(std::isfinite(step.loss->value), Err::divergence,
                "non-finite loss at epoch " + std::to_string(epoch));
        tape.backward(step.loss, 1.0 / double(group));
        sum_loss += step.loss->value;
        sum_ry += step.rate_y->value;
        sum_rz += step.rate_z->value;
        sum_sse += step.distortion->value;
        total_points += step.n_points;
      }
      adam.step(params, lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = sum_loss / double(n);
    rec.rate_y_bits = sum_ry / double(n);
    rec.rate_z_bits = sum_rz / double(n);
    rec.mse_yuv = sum_sse / (3.0 * double(total_points));
    rec.lr = lr;
    res.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Held-out evaluation and lambda sweeps.
// ---------------------------------------------------------------------------

struct HeldoutEval {
  RDPoint point;                     // mean bpp / psnr over the clouds
  std::vector<Bitstream> streams;    // one per held-out cloud
};

inline HeldoutEval evaluate_on(ModelWeights& w, const std::vector<PointCloud>& clouds,
                               const std::string& label) {
  require(!clouds.empty(), Err::invalid_input, "empty evaluation set");
  HeldoutEval out;
  double bpp = 0, py = 0, pyuv = 0;
  for (const PointCloud& pc : clouds) {
    EncodeResult enc = encode(pc, w);
    bpp += double(enc.stream.bit_size()) / double(pc.points.size());
    const PsnrResult ps = psnr_metrics(pc, enc.reconstruction);
    py += ps.psnr_y;
    pyuv += ps.psnr_yuv;
    out.streams.push_back(std::move(enc.stream));
  }
  const double n = double(clouds.size());
  out.point.label = label;
  out.point.bpp = bpp / n;
  out.point.psnr_y = py / n;
  out.point.psnr_yuv = pyuv / n;
  return out;
}

struct SweepEntry {
  double lambda = 0;
  TrainResult result;
  HeldoutEval eval;
};

// Trains one model per lambda (shared data and seed) and evaluates each on
// the same held-out clouds. Entries come back in the given lambda order.
inline std::vector<SweepEntry> lambda_sweep(const TrainConfig& base,
                                            const std::vector<double>& lambdas,
                                            const EpochCallback& on_epoch = nullptr) {
  require(!lambdas.empty(), Err::config, "empty lambda list");
  const std::vector<PointCloud> train_set =
      make_dataset(mix_seeds(base.seed, 0x44415441u), base.dataset_size, base.resolution_bits);
  const std::vector<PointCloud> heldout =
      make_dataset(mix_seeds(base.seed, 0x48454c44u), base.heldout_size, base.resolution_bits);
  require(!heldout.empty(), Err::config, "lambda sweep needs heldout_size >= 1");

  std::vector<SweepEntry> out;
  for (double lambda : lambdas) {
    TrainConfig tc = base;
    tc.lambda = lambda;
    tc.validate();
    SweepEntry entry;
    entry.lambda = lambda;
    entry.result = train(tc, train_set, on_epoch);
    char label[64];
    std::snprintf(label, sizeof(label), "lambda=%g", lambda);
    entry.eval = evaluate_on(entry.result.weights, heldout, label);
    out.push_back(std::move(entry));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config files: `key = value` lines, `#` comments. Unknown keys are errors.
// ---------------------------------------------------------------------------

struct TrainRunConfig {
  TrainConfig train;
  std::vector<double> lambdas;  // sweep list; defaults to {train.lambda}
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(uint8_t(s[a]))) ++a;
  while (b > a && std::isspace(uint8_t(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    require(used == v.size(), Err::config, "trailing characters in value for " + key);
    return d;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail(Err::config, "bad numeric value for " + key + ": " + v);
  }
}

inline int parse_int(const std::string& key, const std::string& v) {
  const double d = parse_double(key, v);
  require(d == std::floor(d) && std::abs(d) < 2e9, Err::config,
          "value for " + key + " must be an integer");
  return int(d);
}

}  // namespace detail

inline std::vector<double> parse_lambda_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    out.push_back(detail::parse_double("lambdas", item));
  }
  require(!out.empty(), Err::config, "empty lambda list");
  return out;
}

inline TrainRunConfig parse_train_config(const std::string& text) {
  TrainRunConfig rc;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    require(eq != std::string::npos, Err::config,
            "expected key = value on line " + std::to_string(lineno));
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    require(!key.empty() && !val.empty(), Err::config,
            "empty key or value on line " + std::to_string(lineno));

    TrainConfig& t = rc.train;
    if (key == "lambda")
      t.lambda = detail::parse_double(key, val);
    else if (key == "epochs")
      t.epochs = detail::parse_int(key, val);
    else if (key == "lr_start")
      t.lr_start = detail::parse_double(key, val);
    else if (key == "lr_end")
      t.lr_end = detail::parse_double(key, val);
    else if (key == "seed")
      t.seed = uint64_t(detail::parse_double(key, val));
    else if (key == "dataset_size")
      t.dataset_size = detail::parse_int(key, val);
    else if (key == "heldout_size")
      t.heldout_size = detail::parse_int(key, val);
    else if (key == "resolution_bits")
      t.resolution_bits = detail::parse_int(key, val);
    else if (key == "channels")
      t.channels = detail::parse_int(key, val);
    else if (key == "hyper_channels")
      t.hyper_channels = detail::parse_int(key, val);
    else if (key == "variant")
      t.variant = variant_from_name(val);
    else if (key == "accum")
      t.accum = detail::parse_int(key, val);
    else if (key == "lambdas")
      rc.lambdas = parse_lambda_list(val);
    else
      fail(Err::config, "unknown config key: " + key);
  }
  if (rc.lambdas.empty()) rc.lambdas = {rc.train.lambda};
  return rc;
}

inline TrainRunConfig load_train_config(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  return parse_train_config(std::string(bytes.begin(), bytes.end()));
}

}  // namespace spcac
