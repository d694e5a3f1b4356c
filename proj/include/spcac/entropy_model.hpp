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

// Probability model for quantized latents.
//
// A latent element with location mu and scale sigma is modeled as a Laplacian
// convolved with a unit uniform, i.e. the probability of integer symbol s is
//     p(s) = F(s + 1/2) - F(s - 1/2)
// with F the Laplace CDF. Training relaxes quantization to additive uniform
// noise; inference rounds. For coding, the continuous model is frozen into a
// 16-bit quantized CDF with escape symbols on both flanks; escaped symbols
// spell out their value with 16 raw bits, so coding is lossless for any
// in-range symbol no matter how badly the model fits.

#include <cmath>
#include <cstdint>
#include <vector>

#include "spcac/autodiff.hpp"
#include "spcac/common.hpp"
#include "spcac/sparse_tensor.hpp"

namespace spcac {

constexpr double kSigmaMin = 1e-2;           // lower clamp for scale parameters
constexpr double kPMin = 1.0 / 65536.0;      // likelihood floor, 2^-16
constexpr int32_t kSymbolMax = 32767;        // |symbol| bound; fits 16-bit bypass

// Laplace CDF with location mu and scale b.
inline double laplace_cdf(double x, double mu, double b) {
  const double d = x - mu;
  if (d < 0.0) return 0.5 * std::exp(d / b);
  return 1.0 - 0.5 * std::exp(-d / b);
}

// Unclamped p(y) = F(y + 1/2) - F(y - 1/2).
inline double discretized_laplace(double y, double mu, double b) {
  return laplace_cdf(y + 0.5, mu, b) - laplace_cdf(y - 0.5, mu, b);
}

inline double clamped_likelihood(double y, double mu, double b) {
  const double p = discretized_laplace(y, mu, b);
  return p > kPMin ? p : kPMin;
}

// ---------------------------------------------------------------------------
// Quantizers.
// ---------------------------------------------------------------------------

// Training relaxation: y + u with u ~ U(-1/2, 1/2) i.i.d. per element,
// deterministic in the seed. Gradients pass through unchanged.
inline SparseTensor quantize_train(const SparseTensor& y, uint64_t noise_seed, Tape* tape) {
  SparseTensor out = SparseTensor::zeros(y.coords, y.channels());
  Rng rng(noise_seed);
  const double* in = y.values().data();
  double* ov = out.values().data();
  for (size_t i = 0; i < y.values().size(); ++i) ov[i] = in[i] + (rng.uniform() - 0.5);
  if (tape)
    tape->record([xf = y.feat, yf = out.feat]() {
      if (!yf->has_grad()) return;
      xf->ensure_grad();
      const double* dy = yf->grad.data();
      double* dx = xf->grad.data();
      for (size_t i = 0; i < yf->grad.size(); ++i) dx[i] += dy[i];
    });
  return out;
}

// Rounds half away from zero. A magnitude beyond kSymbolMax signals training
// divergence and aborts rather than wrapping.
inline int32_t quantize_infer_value(double v) {
  const double r = std::round(v);  // ties away from zero
  if (std::abs(r) > double(kSymbolMax))
    fail(Err::overflow, "quantized symbol out of range (training diverged?)");
  return int32_t(r);
}

inline std::vector<int32_t> quantize_infer(const Matrix& y) {
  std::vector<int32_t> s(y.size());
  for (size_t i = 0; i < y.size(); ++i) s[i] = quantize_infer_value(y.data()[i]);
  return s;
}

inline Matrix symbols_to_matrix(const std::vector<int32_t>& s, int rows, int cols) {
  require(s.size() == size_t(rows) * size_t(cols), Err::config, "symbol count mismatch");
  Matrix m(rows, cols);
  for (size_t i = 0; i < s.size(); ++i) m.data()[i] = double(s[i]);
  return m;
}

// ---------------------------------------------------------------------------
// Rate nodes. rate = sum -log2 max(p, p_min), differentiable in mu, sigma and
// (under the noise relaxation) in y. Elements pinned at the likelihood floor
// contribute zero gradient.
// ---------------------------------------------------------------------------

struct EntropyParams {
  SparseTensor mu;
  SparseTensor sigma;  // post-softplus, >= kSigmaMin
};

namespace detail {

// d p / d y, mu, b for p = F(y+1/2, mu, b) - F(y-1/2, mu, b).
struct LaplaceGrad {
  double dy, dmu, db;
};

inline LaplaceGrad discretized_laplace_grad(double y, double mu, double b) {
  const double hi = y + 0.5 - mu;
  const double lo = y - 0.5 - mu;
  // f = Laplace pdf at the two interval ends.
  const double f_hi = 0.5 / b * std::exp(-std::abs(hi) / b);
  const double f_lo = 0.5 / b * std::exp(-std::abs(lo) / b);
  // dF/dx = pdf; dF/dmu = -pdf; dF/db = -sign(x-mu) * |x-mu| / b * pdf / 1
  const double dFhi_db = -(hi / b) * f_hi;
  const double dFlo_db = -(lo / b) * f_lo;
  LaplaceGrad g;
  g.dy = f_hi - f_lo;
  g.dmu = -(f_hi - f_lo);
  g.db = dFhi_db - dFlo_db;
  return g;
}

}  // namespace detail

// Total bits to code y under per-element (mu, sigma).
inline ScalarRef laplace_rate_bits(const SparseTensor& y, const EntropyParams& params,
                                   Tape* tape) {
  require(y.coords.get() == params.mu.coords.get() &&
              y.coords.get() == params.sigma.coords.get(),
          Err::config, "rate node needs y and params on the same coordinates");
  require(y.channels() == params.mu.channels() && y.channels() == params.sigma.channels(),
          Err::config, "rate node channel mismatch");
  const double inv_ln2 = 1.0 / std::log(2.0);
  const size_t n = y.values().size();
  const double* yv = y.values().data();
  const double* mv = params.mu.values().data();
  const double* sv = params.sigma.values().data();
  double bits = 0.0;
  for (size_t i = 0; i < n; ++i)
    bits -= std::log(clamped_likelihood(yv[i], mv[i], sv[i])) * inv_ln2;
  ScalarRef out = make_scalar(bits);
  if (tape)
    tape->record([yf = y.feat, mf = params.mu.feat, sf = params.sigma.feat, out, inv_ln2]() {
      if (out->grad == 0.0) return;
      yf->ensure_grad();
      mf->ensure_grad();
      sf->ensure_grad();
      const size_t n = yf->value.size();
      const double* yv = yf->value.data();
      const double* mv = mf->value.data();
      const double* sv = sf->value.data();
      double* gy = yf->grad.data();
      double* gm = mf->grad.data();
      double* gs = sf->grad.data();
      for (size_t i = 0; i < n; ++i) {
        const double p = discretized_laplace(yv[i], mv[i], sv[i]);
        if (p <= kPMin) continue;  // clamped: flat region
        const auto g = detail::discretized_laplace_grad(yv[i], mv[i], sv[i]);
        const double scale = -out->grad * inv_ln2 / p;
        gy[i] += scale * g.dy;
        gm[i] += scale * g.dmu;
        gs[i] += scale * g.db;
      }
    });
  return out;
}

// Plain (gradient-free) evaluation on already quantized symbols.
inline double laplace_rate_bits(const Matrix& y, const Matrix& mu, const Matrix& sigma) {
  require(y.size() == mu.size() && y.size() == sigma.size(), Err::config,
          "rate evaluation shape mismatch");
  const double inv_ln2 = 1.0 / std::log(2.0);
  double bits = 0.0;
  for (size_t i = 0; i < y.size(); ++i)
    bits -= std::log(clamped_likelihood(y.data()[i], mu.data()[i], sigma.data()[i])) * inv_ln2;
  return bits;
}

// ---------------------------------------------------------------------------
// Factorized prior: learned per-channel (mu, softplus(sigma_raw) + sigma_min).
// Used for the hyper latents, and for the main latents in the factorized
// ablation.
// ---------------------------------------------------------------------------

struct FactorizedParams {
  ParamTensor* mu = nullptr;         // shape {channels}
  ParamTensor* sigma_raw = nullptr;  // shape {channels}
  double sigma_min = kSigmaMin;

  int channels() const { return mu->dim(0); }
  double location(int c) const { return mu->value[size_t(c)]; }
  double scale(int c) const {
    return detail::softplus(sigma_raw->value[size_t(c)]) + sigma_min;
  }
};

inline ScalarRef factorized_rate_bits(const SparseTensor& z, const FactorizedParams& fp,
                                      Tape* tape) {
  require(fp.mu && fp.sigma_raw, Err::config, "factorized prior parameters missing");
  require(z.channels() == fp.channels(), Err::config, "factorized prior channel mismatch");
  const double inv_ln2 = 1.0 / std::log(2.0);
  const int cols = z.channels();
  double bits = 0.0;
  for (int j = 0; j < z.rows(); ++j) {
    const double* zr = z.values().row(j);
    for (int c = 0; c < cols; ++c)
      bits -= std::log(clamped_likelihood(zr[c], fp.location(c), fp.scale(c))) * inv_ln2;
  }
  ScalarRef out = make_scalar(bits);
  if (tape)
    tape->record([zf = z.feat, fp, out, inv_ln2, cols]() {
      if (out->grad == 0.0) return;
      zf->ensure_grad();
      for (int j = 0; j < zf->value.rows(); ++j) {
        const double* zr = zf->value.row(j);
        double* gz = zf->grad.row(j);
        for (int c = 0; c < cols; ++c) {
          const double mu = fp.location(c);
          const double b = fp.scale(c);
          const double p = discretized_laplace(zr[c], mu, b);
          if (p <= kPMin) continue;
          const auto g = detail::discretized_laplace_grad(zr[c], mu, b);
          const double scale = -out->grad * inv_ln2 / p;
          gz[c] += scale * g.dy;
          fp.mu->grad[size_t(c)] += scale * g.dmu;
          // chain through softplus for the raw scale parameter
          fp.sigma_raw->grad[size_t(c)] +=
              scale * g.db * detail::sigmoid(fp.sigma_raw->value[size_t(c)]);
        }
      }
    });
  return out;
}

inline double factorized_rate_bits(const Matrix& z, const FactorizedParams& fp) {
  const double inv_ln2 = 1.0 / std::log(2.0);
  double bits = 0.0;
  for (int j = 0; j < z.rows(); ++j) {
    const double* zr = z.row(j);
    for (int c = 0; c < z.cols(); ++c)
      bits -= std::log(clamped_likelihood(zr[c], fp.location(c), fp.scale(c))) * inv_ln2;
  }
  return bits;
}

// ---------------------------------------------------------------------------
// Quantized CDF for the range coder. Alphabet is [sym_lo, sym_hi] plus one
// escape on each flank; every frequency is >= 1 and the total is exactly
// 2^precision. Symbols outside the range are coded as escape + 16 raw bits of
// the biased value (s + 32768).
// ---------------------------------------------------------------------------

struct QuantizedCDF {
  int precision = 16;
  int32_t sym_lo = 0, sym_hi = -1;
  // cum has (sym_hi - sym_lo + 1) + 3 entries:
  //   index 0                escape below
  //   index 1 .. M           in-range symbols
  //   index M + 1            escape above
  // cum.front() == 0, cum.back() == 1 << precision, strictly increasing.
  std::vector<uint32_t> cum;

  uint32_t total() const { return 1u << precision; }
  int range_size() const { return int(sym_hi - sym_lo + 1); }
  int escape_hi_index() const { return range_size() + 1; }

  int index_of(int32_t s) const {
    if (s < sym_lo) return 0;
    if (s > sym_hi) return escape_hi_index();
    return int(s - sym_lo) + 1;
  }
  uint32_t freq(int index) const { return cum[size_t(index) + 1] - cum[size_t(index)]; }
};

inline QuantizedCDF build_quantized_cdf(double mu, double sigma, int precision = 16) {
  require(precision >= 8 && precision <= 16, Err::config, "cdf precision out of range");
  const double b = sigma < kSigmaMin ? kSigmaMin : sigma;
  const uint32_t total = 1u << precision;
  const double tail_target = 1.0 / double(total);

  const int32_t center = int32_t(std::llround(mu));
  // Smallest radius whose two-sided tail mass is below one quantization step,
  // capped to keep the alphabet bounded for absurd scales (escapes stay
  // lossless regardless).
  const int32_t cap = std::min<int32_t>(16384, int32_t(total / 4));
  int32_t radius = int32_t(std::ceil(b * double(precision + 1) * std::log(2.0) +
                                     std::abs(mu - double(center)))) + 1;
  if (radius < 1) radius = 1;
  if (radius > cap) radius = cap;
  auto tail_mass = [&](int32_t r) {
    return laplace_cdf(double(center) - double(r) - 0.5, mu, b) +
           (1.0 - laplace_cdf(double(center) + double(r) + 0.5, mu, b));
  };
  while (radius < cap && tail_mass(radius) > tail_target) ++radius;

  const int32_t lo = center - radius;
  const int32_t hi = center + radius;
  const int m = int(hi - lo + 1);

  std::vector<uint32_t> freq(size_t(m) + 2);
  const double scale = double(total);
  // flank escapes carry the true tail mass (at least one count)
  {
    const double mass_lo = laplace_cdf(double(lo) - 0.5, mu, b);
    const double mass_hi = 1.0 - laplace_cdf(double(hi) + 0.5, mu, b);
    int64_t f_lo = std::llround(mass_lo * scale);
    int64_t f_hi = std::llround(mass_hi * scale);
    freq.front() = uint32_t(f_lo < 1 ? 1 : f_lo);
    freq.back() = uint32_t(f_hi < 1 ? 1 : f_hi);
  }
  for (int s = 0; s < m; ++s) {
    const double p = discretized_laplace(double(lo + s), mu, b);
    int64_t f = std::llround(p * scale);
    freq[size_t(s) + 1] = uint32_t(f < 1 ? 1 : f);
  }

  // Force the exact total by adjusting the largest bin; repeat in the rare
  // case the largest bin cannot absorb the whole correction.
  int64_t sum = 0;
  for (uint32_t f : freq) sum += f;
  while (sum != int64_t(total)) {
    size_t largest = 0;
    for (size_t i = 1; i < freq.size(); ++i)
      if (freq[i] > freq[largest]) largest = i;
    int64_t delta = int64_t(total) - sum;
    if (delta < 0 && freq[largest] + delta < 1) delta = 1 - int64_t(freq[largest]);
    require(delta != 0, Err::config, "cdf quantization cannot reach target total");
    freq[largest] = uint32_t(int64_t(freq[largest]) + delta);
    sum += delta;
  }

  QuantizedCDF cdf;
  cdf.precision = precision;
  cdf.sym_lo = lo;
  cdf.sym_hi = hi;
  cdf.cum.resize(freq.size() + 1);
  cdf.cum[0] = 0;
  for (size_t i = 0; i < freq.size(); ++i) cdf.cum[i + 1] = cdf.cum[i] + freq[i];
  return cdf;
}

}  // namespace spcac
