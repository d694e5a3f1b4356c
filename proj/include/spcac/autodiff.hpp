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

// Reverse-mode autodiff over sparse tensor layers.
//
// Every layer takes an optional Tape*; when present, a backward closure is
// recorded. Tape::backward replays closures in reverse, accumulating into
// FeatureNode::grad and ParamTensor::grad. All compute is double precision
// and single threaded with a fixed summation order:
//   - forward: per output row, bias first, then kernel-map entries in
//     ascending offset order, inner loop SAXPY over output channels;
//   - backward: offsets in ascending order, pairs in list order.
// Identical inputs therefore produce bit-identical outputs and gradients.
// Closures hold non-owning pointers to parameters, kernel maps and masks;
// those must outlive the tape.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "spcac/common.hpp"
#include "spcac/sparse_tensor.hpp"

namespace spcac {

// ---------------------------------------------------------------------------
// Parameters.
// ---------------------------------------------------------------------------

struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> adam_m, adam_v;  // optimizer state, sized on first step

  ParamTensor() = default;
  ParamTensor(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    size_t count = 1;
    for (int d : shape) {
      require(d > 0, Err::config, "non-positive parameter dimension in " + name);
      count *= size_t(d);
    }
    value.assign(count, 0.0);
    grad.assign(count, 0.0);
  }

  size_t count() const { return value.size(); }
  int dim(int i) const { return shape[size_t(i)]; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// Kernel weights are stored [offset][cin][cout]; fan counts include the
// kernel volume so stacked 3^3 convolutions keep activations at scale.
inline void init_conv_kernel(ParamTensor& w, Rng& rng) {
  require(w.shape.size() == 3, Err::config, "kernel init expects rank-3 parameter");
  const double volume = double(w.dim(0));
  const double bound = std::sqrt(6.0 / (volume * double(w.dim(1) + w.dim(2))));
  for (double& v : w.value) v = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------------------
// Tape and scalars.
// ---------------------------------------------------------------------------

struct ScalarNode {
  double value = 0.0;
  double grad = 0.0;
};
using ScalarRef = std::shared_ptr<ScalarNode>;

inline ScalarRef make_scalar(double v) {
  auto s = std::make_shared<ScalarNode>();
  s->value = v;
  return s;
}

class Tape {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  // Seeds d(loss)/d(loss) = seed and replays recorded closures in reverse.
  // A tape is single use.
  void backward(const ScalarRef& loss, double seed = 1.0) {
    require(!consumed_, Err::state, "tape already consumed");
    consumed_ = true;
    loss->grad += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// out = sum_i weight_i * term_i
inline ScalarRef scalar_weighted_sum(std::vector<std::pair<double, ScalarRef>> terms,
                                     Tape* tape) {
  double v = 0.0;
  for (const auto& [w, s] : terms) v += w * s->value;
  ScalarRef out = make_scalar(v);
  if (tape)
    tape->record([terms = std::move(terms), out]() {
      for (const auto& [w, s] : terms) s->grad += w * out->grad;
    });
  return out;
}

// ---------------------------------------------------------------------------
// Causal mask: offset k participates iff k <lex (0,0,0). For any map the
// contributing input row then strictly precedes the output row in canonical
// order, which is what makes sequential decoding possible.
// ---------------------------------------------------------------------------

struct CausalMask {
  int kernel_size = 0;
  std::vector<uint8_t> allowed;

  static CausalMask lexicographic(int kernel_size) {
    CausalMask m;
    m.kernel_size = kernel_size;
    const int volume = kernel_volume(kernel_size);
    m.allowed.resize(size_t(volume));
    const Coordinate zero{0, 0, 0};
    for (int k = 0; k < volume; ++k)
      m.allowed[size_t(k)] = lex_less(kernel_offset(kernel_size, k), zero) ? 1 : 0;
    return m;
  }

  int allowed_count() const {
    int n = 0;
    for (uint8_t a : allowed) n += a;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Shared compute kernels. conv_row_forward is the single implementation of a
// convolution output row; the sequential decoder calls it directly on its
// partially decoded feature matrix, so encoder and decoder agree bit for bit.
// ---------------------------------------------------------------------------

namespace detail {

// out += x * W, with W a cin x cout row-major block.
inline void saxpy_block(const double* x, int cin, const double* w, int cout, double* out) {
  for (int ci = 0; ci < cin; ++ci) {
    const double xv = x[ci];
    const double* wr = w + size_t(ci) * size_t(cout);
    for (int co = 0; co < cout; ++co) out[co] += xv * wr[co];
  }
}

inline void conv_row_forward(const Matrix& in, const KernelMap& km, const CausalMask* mask,
                             const double* kernel, const double* bias, int cin, int cout,
                             int row, double* out) {
  for (int co = 0; co < cout; ++co) out[co] = bias[co];
  const int32_t begin = km.row_ptr[size_t(row)];
  const int32_t end = km.row_ptr[size_t(row) + 1];
  for (int32_t e = begin; e < end; ++e) {
    const auto [k, i] = km.row_entries[size_t(e)];
    if (mask && !mask->allowed[size_t(k)]) continue;
    saxpy_block(in.row(i), cin, kernel + size_t(k) * size_t(cin) * size_t(cout), cout, out);
  }
}

// y = x * W + b for one row of a 1x1x1 convolution.
inline void linear_row_forward(const double* x, const double* kernel, const double* bias,
                               int cin, int cout, double* out) {
  for (int co = 0; co < cout; ++co) out[co] = bias[co];
  saxpy_block(x, cin, kernel, cout, out);
}

// Common backward for (masked/transposed/plain) convolutions.
inline void conv_backward(const std::shared_ptr<FeatureNode>& xf,
                          const std::shared_ptr<FeatureNode>& yf, ParamTensor* kernel,
                          ParamTensor* bias, const KernelMap* km, const CausalMask* mask) {
  if (!yf->has_grad()) return;
  const Matrix& dy = yf->grad;
  const Matrix& x = xf->value;
  const int cin = x.cols();
  const int cout = dy.cols();

  // d(bias): plain column sums, output rows in order.
  for (int j = 0; j < dy.rows(); ++j) {
    const double* dyr = dy.row(j);
    for (int co = 0; co < cout; ++co) bias->grad[size_t(co)] += dyr[co];
  }

  // d(kernel): per offset, pairs in list order. Masked offsets are skipped in
  // the forward pass, so their gradients stay exactly zero.
  const int volume = int(km->pairs.size());
  for (int k = 0; k < volume; ++k) {
    if (mask && !mask->allowed[size_t(k)]) continue;
    double* gk = kernel->grad.data() + size_t(k) * size_t(cin) * size_t(cout);
    for (const auto& [i, j] : km->pairs[size_t(k)]) {
      const double* xr = x.row(i);
      const double* dyr = dy.row(j);
      for (int ci = 0; ci < cin; ++ci) {
        const double xv = xr[ci];
        double* g = gk + size_t(ci) * size_t(cout);
        for (int co = 0; co < cout; ++co) g[co] += xv * dyr[co];
      }
    }
  }

  // d(input): uses the channel-transposed kernel so the inner loop stays a
  // SAXPY over cin (no float reductions, order fixed by (offset, pair, co)).
  xf->ensure_grad();
  std::vector<double> wt(kernel->value.size());
  for (int k = 0; k < volume; ++k) {
    const double* wk = kernel->value.data() + size_t(k) * size_t(cin) * size_t(cout);
    double* wtk = wt.data() + size_t(k) * size_t(cin) * size_t(cout);
    for (int ci = 0; ci < cin; ++ci)
      for (int co = 0; co < cout; ++co)
        wtk[size_t(co) * size_t(cin) + size_t(ci)] = wk[size_t(ci) * size_t(cout) + size_t(co)];
  }
  for (int k = 0; k < volume; ++k) {
    if (mask && !mask->allowed[size_t(k)]) continue;
    const double* wtk = wt.data() + size_t(k) * size_t(cin) * size_t(cout);
    for (const auto& [i, j] : km->pairs[size_t(k)]) {
      const double* dyr = dy.row(j);
      double* dxr = xf->grad.row(i);
      for (int co = 0; co < cout; ++co) {
        const double dv = dyr[co];
        const double* wr = wtk + size_t(co) * size_t(cin);
        for (int ci = 0; ci < cin; ++ci) dxr[ci] += dv * wr[ci];
      }
    }
  }
}

inline void check_conv_args(const SparseTensor& x, const ParamTensor& kernel,
                            const ParamTensor& bias, const KernelMap& km) {
  require(x.coords.get() == km.in.get(), Err::config,
          "input tensor does not match kernel map input coordinates");
  require(kernel.shape.size() == 3, Err::config, "kernel must be rank 3");
  require(kernel.dim(0) == kernel_volume(km.kernel_size), Err::config,
          "kernel offset count does not match kernel map");
  require(kernel.dim(1) == x.channels(), Err::config, "kernel cin mismatch: " + kernel.name);
  require(bias.shape.size() == 1 && bias.dim(0) == kernel.dim(2), Err::config,
          "bias shape mismatch: " + bias.name);
}

inline SparseTensor conv_apply(const SparseTensor& x, ParamTensor& kernel, ParamTensor& bias,
                               const KernelMap& km, const CausalMask* mask, Tape* tape) {
  check_conv_args(x, kernel, bias, km);
  const int cin = kernel.dim(1);
  const int cout = kernel.dim(2);
  SparseTensor y = SparseTensor::zeros(km.out, cout);
  const Matrix& in = x.values();
  Matrix& out = y.values();
  for (int j = 0; j < out.rows(); ++j)
    conv_row_forward(in, km, mask, kernel.value.data(), bias.value.data(), cin, cout, j,
                     out.row(j));
  if (tape)
    tape->record([xf = x.feat, yf = y.feat, k = &kernel, b = &bias, pkm = &km, mask]() {
      conv_backward(xf, yf, k, b, pkm, mask);
    });
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layers.
// ---------------------------------------------------------------------------

inline SparseTensor sparse_conv(const SparseTensor& x, ParamTensor& kernel, ParamTensor& bias,
                                const KernelMap& km, Tape* tape) {
  require(!km.transposed, Err::config, "sparse_conv needs a forward kernel map");
  return detail::conv_apply(x, kernel, bias, km, nullptr, tape);
}

// Pruned transposed convolution: outputs exist only at `target` coordinates
// (a finer hierarchy level), never at free upsampled positions.
inline SparseTensor transposed_sparse_conv(const SparseTensor& x, ParamTensor& kernel,
                                           ParamTensor& bias, const KernelMap& km,
                                           const CoordMapPtr& target, Tape* tape) {
  require(km.transposed, Err::config, "transposed_sparse_conv needs a transposed kernel map");
  require(km.out.get() == target.get(), Err::config,
          "transposed convolution target does not match kernel map output");
  return detail::conv_apply(x, kernel, bias, km, nullptr, tape);
}

inline SparseTensor masked_sparse_conv(const SparseTensor& x, ParamTensor& kernel,
                                       ParamTensor& bias, const KernelMap& km,
                                       const CausalMask& mask, Tape* tape) {
  require(!km.transposed, Err::config, "masked_sparse_conv needs a forward kernel map");
  require(km.in.get() == km.out.get(), Err::config,
          "masked convolution must map a coordinate set onto itself");
  require(mask.kernel_size == km.kernel_size, Err::config, "mask size mismatch");
  return detail::conv_apply(x, kernel, bias, km, &mask, tape);
}

inline SparseTensor conv1x1(const SparseTensor& x, ParamTensor& kernel, ParamTensor& bias,
                            Tape* tape) {
  require(kernel.shape.size() == 3 && kernel.dim(0) == 1, Err::config,
          "conv1x1 kernel must have shape {1, cin, cout}");
  require(kernel.dim(1) == x.channels(), Err::config, "conv1x1 cin mismatch: " + kernel.name);
  require(bias.shape.size() == 1 && bias.dim(0) == kernel.dim(2), Err::config,
          "conv1x1 bias mismatch: " + bias.name);
  const int cin = kernel.dim(1);
  const int cout = kernel.dim(2);
  SparseTensor y = SparseTensor::zeros(x.coords, cout);
  for (int j = 0; j < x.rows(); ++j)
    detail::linear_row_forward(x.values().row(j), kernel.value.data(), bias.value.data(), cin,
                               cout, y.values().row(j));
  if (tape)
    tape->record([xf = x.feat, yf = y.feat, k = &kernel, b = &bias, cin, cout]() {
      if (!yf->has_grad()) return;
      const Matrix& dy = yf->grad;
      const Matrix& xv = xf->value;
      for (int j = 0; j < dy.rows(); ++j) {
        const double* dyr = dy.row(j);
        for (int co = 0; co < cout; ++co) b->grad[size_t(co)] += dyr[co];
      }
      for (int j = 0; j < dy.rows(); ++j) {
        const double* xr = xv.row(j);
        const double* dyr = dy.row(j);
        for (int ci = 0; ci < cin; ++ci) {
          const double xvv = xr[ci];
          double* g = k->grad.data() + size_t(ci) * size_t(cout);
          for (int co = 0; co < cout; ++co) g[co] += xvv * dyr[co];
        }
      }
      xf->ensure_grad();
      std::vector<double> wt(size_t(cin) * size_t(cout));
      for (int ci = 0; ci < cin; ++ci)
        for (int co = 0; co < cout; ++co)
          wt[size_t(co) * size_t(cin) + size_t(ci)] = k->value[size_t(ci) * size_t(cout) + size_t(co)];
      for (int j = 0; j < dy.rows(); ++j) {
        const double* dyr = dy.row(j);
        double* dxr = xf->grad.row(j);
        for (int co = 0; co < cout; ++co) {
          const double dv = dyr[co];
          const double* wr = wt.data() + size_t(co) * size_t(cin);
          for (int ci = 0; ci < cin; ++ci) dxr[ci] += dv * wr[ci];
        }
      }
    });
  return y;
}

inline SparseTensor relu(const SparseTensor& x, Tape* tape) {
  SparseTensor y = SparseTensor::zeros(x.coords, x.channels());
  const Matrix& in = x.values();
  Matrix& out = y.values();
  for (size_t i = 0; i < in.size(); ++i) out.data()[i] = in.data()[i] > 0.0 ? in.data()[i] : 0.0;
  if (tape)
    tape->record([xf = x.feat, yf = y.feat]() {
      if (!yf->has_grad()) return;
      xf->ensure_grad();
      const double* xv = xf->value.data();
      const double* dy = yf->grad.data();
      double* dx = xf->grad.data();
      for (size_t i = 0; i < yf->grad.size(); ++i) dx[i] += xv[i] > 0.0 ? dy[i] : 0.0;
    });
  return y;
}

inline SparseTensor concat_channels(const SparseTensor& a, const SparseTensor& b, Tape* tape) {
  require(a.coords.get() == b.coords.get(), Err::config,
          "concat_channels needs tensors on the same coordinates");
  const int ca = a.channels(), cb = b.channels();
  SparseTensor y = SparseTensor::zeros(a.coords, ca + cb);
  for (int j = 0; j < a.rows(); ++j) {
    double* out = y.values().row(j);
    const double* ra = a.values().row(j);
    const double* rb = b.values().row(j);
    for (int c = 0; c < ca; ++c) out[c] = ra[c];
    for (int c = 0; c < cb; ++c) out[ca + c] = rb[c];
  }
  if (tape)
    tape->record([af = a.feat, bf = b.feat, yf = y.feat, ca, cb]() {
      if (!yf->has_grad()) return;
      af->ensure_grad();
      bf->ensure_grad();
      for (int j = 0; j < yf->grad.rows(); ++j) {
        const double* dy = yf->grad.row(j);
        double* da = af->grad.row(j);
        double* db = bf->grad.row(j);
        for (int c = 0; c < ca; ++c) da[c] += dy[c];
        for (int c = 0; c < cb; ++c) db[c] += dy[ca + c];
      }
    });
  return y;
}

// Channel slice [c0, c1).
inline SparseTensor slice_channels(const SparseTensor& x, int c0, int c1, Tape* tape) {
  require(0 <= c0 && c0 < c1 && c1 <= x.channels(), Err::config, "bad channel slice");
  const int cw = c1 - c0;
  SparseTensor y = SparseTensor::zeros(x.coords, cw);
  for (int j = 0; j < x.rows(); ++j) {
    const double* in = x.values().row(j);
    double* out = y.values().row(j);
    for (int c = 0; c < cw; ++c) out[c] = in[c0 + c];
  }
  if (tape)
    tape->record([xf = x.feat, yf = y.feat, c0, cw]() {
      if (!yf->has_grad()) return;
      xf->ensure_grad();
      for (int j = 0; j < yf->grad.rows(); ++j) {
        const double* dy = yf->grad.row(j);
        double* dx = xf->grad.row(j);
        for (int c = 0; c < cw; ++c) dx[c0 + c] += dy[c];
      }
    });
  return y;
}

namespace detail {
inline double softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

// y = softplus(x) + shift; used to keep scale parameters positive.
inline SparseTensor softplus_shift(const SparseTensor& x, double shift, Tape* tape) {
  SparseTensor y = SparseTensor::zeros(x.coords, x.channels());
  const double* in = x.values().data();
  double* out = y.values().data();
  for (size_t i = 0; i < x.values().size(); ++i) out[i] = detail::softplus(in[i]) + shift;
  if (tape)
    tape->record([xf = x.feat, yf = y.feat]() {
      if (!yf->has_grad()) return;
      xf->ensure_grad();
      const double* xv = xf->value.data();
      const double* dy = yf->grad.data();
      double* dx = xf->grad.data();
      for (size_t i = 0; i < yf->grad.size(); ++i) dx[i] += dy[i] * detail::sigmoid(xv[i]);
    });
  return y;
}

// L = sum_ij x[i][j] * w[i][j]; a linear probe used by gradient tests.
inline ScalarRef scalar_project(const SparseTensor& x, const Matrix& w, Tape* tape) {
  require(w.rows() == x.rows() && w.cols() == x.channels(), Err::config,
          "projection shape mismatch");
  double v = 0.0;
  for (size_t i = 0; i < w.size(); ++i) v += x.values().data()[i] * w.data()[i];
  ScalarRef out = make_scalar(v);
  if (tape)
    tape->record([xf = x.feat, w, out]() {
      if (out->grad == 0.0) return;
      xf->ensure_grad();
      double* dx = xf->grad.data();
      for (size_t i = 0; i < w.size(); ++i) dx[i] += out->grad * w.data()[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Adam. Bias-corrected, applied over a fixed parameter order; gradients are
// zeroed after a successful step. A non-finite gradient aborts before any
// parameter is touched.
// ---------------------------------------------------------------------------

struct AdamOptimizer {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t step_count = 0;

  void step(const std::vector<ParamTensor*>& params, double lr) {
    for (ParamTensor* p : params)
      for (double g : p->grad)
        if (!std::isfinite(g))
          fail(Err::divergence, "non-finite gradient in parameter " + p->name);

    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, double(step_count));
    const double bc2 = 1.0 - std::pow(beta2, double(step_count));
    for (ParamTensor* p : params) {
      if (p->adam_m.size() != p->count()) {
        p->adam_m.assign(p->count(), 0.0);
        p->adam_v.assign(p->count(), 0.0);
      }
      for (size_t i = 0; i < p->count(); ++i) {
        const double g = p->grad[i];
        p->adam_m[i] = beta1 * p->adam_m[i] + (1.0 - beta1) * g;
        p->adam_v[i] = beta2 * p->adam_v[i] + (1.0 - beta2) * g * g;
        const double mhat = p->adam_m[i] / bc1;
        const double vhat = p->adam_v[i] / bc2;
        p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
      p->zero_grad();
    }
  }
};

}  // namespace spcac
