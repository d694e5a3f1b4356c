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

// The codec: sparse autoencoder + conditional entropy model + range coder.
//
// Geometry is assumed losslessly known at both endpoints; only color
// attributes are coded. The encoder runs
//     analysis -> round -> [hyper analysis -> round -> code Z ->
//     hyper synthesis] -> context params -> code Y -> synthesis
// and the decoder mirrors it, reconstructing the latent entropy parameters
// row by row in canonical coordinate order: the masked convolution only ever
// reads rows that decode earlier, so one sequential pass suffices. Encoder
// and decoder share the exact per-row kernels, which makes the decoded
// symbols -- and hence the reconstruction -- bit-identical to the encoder's.
//
// Prior variants: `factorized` codes Y under a learned per-channel prior
// (payload A stays empty), `hyper_only` conditions on the hyper synthesis
// output, `autoregressive_only` on the masked convolution, `joint` on both.
// The fusion stack always sees both branch slots; an absent branch
// contributes zeros.
//
// Bitstream layout (little endian):
//   "SPCA" | u8 version | 16-byte model id | u32 point count | u8 lambda tag
//   | u32 payload A size | payload A | u32 payload B size | payload B
// Payload A codes the hyper latents, payload B the main latents, both in
// canonical order (rows outer, channels inner).
//
// Weights file layout (little endian):
//   "SPCW" | u8 version | config block | u32 param count
//   | per param: name, shape, running offset (in doubles)
//   | u64 total doubles | raw IEEE-754 doubles
// The 128-bit model id is a hash over this serialization; streams carry it
// so a decoder can reject mismatched weights.

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "spcac/autodiff.hpp"
#include "spcac/common.hpp"
#include "spcac/entropy_model.hpp"
#include "spcac/range_coder.hpp"
#include "spcac/sparse_tensor.hpp"

namespace spcac {

// ---------------------------------------------------------------------------
// Variants and lambda tags.
// ---------------------------------------------------------------------------

enum class PriorVariant : uint8_t {
  factorized = 0,
  hyper_only = 1,
  autoregressive_only = 2,
  joint = 3,
};

inline bool variant_has_hyper(PriorVariant v) {
  return v == PriorVariant::hyper_only || v == PriorVariant::joint;
}
inline bool variant_has_ar(PriorVariant v) {
  return v == PriorVariant::autoregressive_only || v == PriorVariant::joint;
}

inline const char* variant_name(PriorVariant v) {
  switch (v) {
    case PriorVariant::factorized: return "factorized";
    case PriorVariant::hyper_only: return "hyper_only";
    case PriorVariant::autoregressive_only: return "autoregressive_only";
    case PriorVariant::joint: return "joint";
  }
  return "?";
}

inline PriorVariant variant_from_name(const std::string& s) {
  for (PriorVariant v : {PriorVariant::factorized, PriorVariant::hyper_only,
                         PriorVariant::autoregressive_only, PriorVariant::joint})
    if (s == variant_name(v)) return v;
  fail(Err::config, "unknown prior variant: " + s);
}

// The supported rate points. Tag 0 means untagged (e.g. untrained weights).
constexpr std::array<double, 7> kLambdaSet = {100, 400, 1000, 2000, 4000, 8000, 16000};

inline uint8_t lambda_tag(double lambda) {
  for (size_t i = 0; i < kLambdaSet.size(); ++i)
    if (kLambdaSet[i] == lambda) return uint8_t(i + 1);
  return 0;
}
inline double lambda_from_tag(uint8_t tag) {
  return (tag >= 1 && tag <= kLambdaSet.size()) ? kLambdaSet[tag - 1] : 0.0;
}

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct CodecConfig {
  int width = 128;            // main trunk channels
  int latent_channels = 128;  // coded latent channels
  int hyper_channels = 128;   // hyper trunk channels
  int fusion_hidden = 0;      // context fusion hidden width; 0 = 2 * width
  int kernel_size = 3;
  int masked_kernel_size = 5;
  double sigma_min = kSigmaMin;
  PriorVariant variant = PriorVariant::joint;
  uint8_t lambda_tag = 0;

  int fusion_hidden_resolved() const { return fusion_hidden > 0 ? fusion_hidden : 2 * width; }

  void validate() const {
    require(width >= 1 && latent_channels >= 1 && hyper_channels >= 1 && fusion_hidden >= 0,
            Err::config, "channel counts must be positive");
    require(kernel_size >= 1 && kernel_size % 2 == 1, Err::config,
            "kernel size must be odd and positive");
    require(masked_kernel_size >= 3 && masked_kernel_size % 2 == 1, Err::config,
            "masked kernel size must be odd and >= 3");
    require(sigma_min > 0.0, Err::config, "sigma_min must be positive");
    require(lambda_tag <= kLambdaSet.size(), Err::config, "bad lambda tag");
  }
};

// ---------------------------------------------------------------------------
// Weights container. Parameters live in creation order (fixed per variant),
// which defines initialization, optimizer traversal and serialization.
// ---------------------------------------------------------------------------

class ModelWeights {
 public:
  static constexpr uint8_t kFormatVersion = 1;

  ModelWeights() = default;
  ModelWeights(const ModelWeights& other) { copy_from(other); }
  ModelWeights& operator=(const ModelWeights& other) {
    if (this != &other) copy_from(other);
    return *this;
  }
  ModelWeights(ModelWeights&&) = default;
  ModelWeights& operator=(ModelWeights&&) = default;

  static ModelWeights create(const CodecConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelWeights w;
    w.cfg_ = cfg;
    Rng rng(seed);
    const int W = cfg.width, L = cfg.latent_channels, H = cfg.hyper_channels;
    const int K = kernel_volume(cfg.kernel_size);
    const int KM = kernel_volume(cfg.masked_kernel_size);
    const int F = cfg.fusion_hidden_resolved();

    auto conv = [&](const std::string& name, int cin, int cout, int volume) {
      init_conv_kernel(w.add(name + ".w", {volume, cin, cout}), rng);
      w.add(name + ".b", {cout});
    };

    conv("enc.conv1", 3, W, K);
    conv("enc.conv2", W, W, K);
    conv("enc.conv3", W, W, K);
    conv("enc.conv4", W, W, K);
    conv("enc.conv5", W, W, K);
    conv("enc.conv6", W, L, K);

    conv("dec.conv1", L, W, K);  // transposed, stride 8 -> 4
    conv("dec.conv2", W, W, K);
    conv("dec.conv3", W, W, K);  // transposed, stride 4 -> 2
    conv("dec.conv4", W, W, K);
    conv("dec.conv5", W, W, K);  // transposed, stride 2 -> 1
    conv("dec.conv6", W, 3, K);

    if (variant_has_hyper(cfg.variant)) {
      conv("hyp_enc.conv1", L, H, K);
      conv("hyp_enc.conv2", H, H, K);
      conv("hyp_enc.conv3", H, H, K);
      conv("hyp_dec.conv1", H, H, K);  // transposed, stride 32 -> 16
      conv("hyp_dec.conv2", H, H, K);  // transposed, stride 16 -> 8
      conv("hyp_dec.conv3", H, W, K);
      w.add("prior_z.mu", {H});
      init_raw_scale(w.add("prior_z.sigma_raw", {H}));
    }
    if (cfg.variant == PriorVariant::factorized) {
      w.add("prior_y.mu", {L});
      init_raw_scale(w.add("prior_y.sigma_raw", {L}));
    } else {
      if (variant_has_ar(cfg.variant)) conv("ctx.masked", L, W, KM);
      conv("ctx.fuse1", 2 * W, F, 1);
      conv("ctx.fuse2", F, 2 * L, 1);
    }
    return w;
  }

  const CodecConfig& config() const { return cfg_; }
  void set_lambda_tag(uint8_t tag) { cfg_.lambda_tag = tag; }

  ParamTensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(Err::config, "unknown parameter " + name);
    return *it->second;
  }
  const ParamTensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(Err::config, "unknown parameter " + name);
    return *it->second;
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<ParamTensor*> params() {
    std::vector<ParamTensor*> v;
    v.reserve(list_.size());
    for (auto& p : list_) v.push_back(p.get());
    return v;
  }
  std::vector<const ParamTensor*> params() const {
    std::vector<const ParamTensor*> v;
    v.reserve(list_.size());
    for (auto& p : list_) v.push_back(p.get());
    return v;
  }

  FactorizedParams prior_z() {
    return {&at("prior_z.mu"), &at("prior_z.sigma_raw"), cfg_.sigma_min};
  }
  FactorizedParams prior_y() {
    return {&at("prior_y.mu"), &at("prior_y.sigma_raw"), cfg_.sigma_min};
  }

  std::vector<uint8_t> serialize() const {
    std::vector<uint8_t> out;
    out.insert(out.end(), {'S', 'P', 'C', 'W'});
    put_u8(out, kFormatVersion);
    put_u32(out, uint32_t(cfg_.width));
    put_u32(out, uint32_t(cfg_.latent_channels));
    put_u32(out, uint32_t(cfg_.hyper_channels));
    put_u32(out, uint32_t(cfg_.fusion_hidden));
    put_u32(out, uint32_t(cfg_.kernel_size));
    put_u32(out, uint32_t(cfg_.masked_kernel_size));
    put_f64(out, cfg_.sigma_min);
    put_u8(out, uint8_t(cfg_.variant));
    put_u8(out, cfg_.lambda_tag);
    put_u32(out, uint32_t(list_.size()));
    uint64_t offset = 0;
    for (const auto& p : list_) {
      put_u16(out, uint16_t(p->name.size()));
      out.insert(out.end(), p->name.begin(), p->name.end());
      put_u8(out, uint8_t(p->shape.size()));
      for (int d : p->shape) put_u32(out, uint32_t(d));
      put_u64(out, offset);
      offset += p->count();
    }
    put_u64(out, offset);
    for (const auto& p : list_)
      for (double v : p->value) put_f64(out, v);
    return out;
  }

  static ModelWeights deserialize(const uint8_t* data, size_t size) {
    ByteReader r(data, size);
    const uint8_t* magic = r.bytes(4);
    require(std::memcmp(magic, "SPCW", 4) == 0, Err::format, "not a weights file (bad magic)");
    const uint8_t version = r.u8();
    require(version == kFormatVersion, Err::format,
            "unsupported weights version " + std::to_string(version));
    CodecConfig cfg;
    cfg.width = int(r.u32());
    cfg.latent_channels = int(r.u32());
    cfg.hyper_channels = int(r.u32());
    cfg.fusion_hidden = int(r.u32());
    cfg.kernel_size = int(r.u32());
    cfg.masked_kernel_size = int(r.u32());
    cfg.sigma_min = r.f64();
    const uint8_t variant_raw = r.u8();
    require(variant_raw <= uint8_t(PriorVariant::joint), Err::format, "bad variant byte");
    cfg.variant = PriorVariant(variant_raw);
    cfg.lambda_tag = r.u8();
    cfg.validate();

    // Structure is a pure function of the config; the manifest must agree.
    ModelWeights w = create(cfg, 0);
    const uint32_t n_params = r.u32();
    require(n_params == w.list_.size(), Err::format, "parameter count mismatch");
    uint64_t expected_offset = 0;
    for (auto& p : w.list_) {
      const uint16_t name_len = r.u16();
      const uint8_t* name_bytes = r.bytes(name_len);
      require(std::string(reinterpret_cast<const char*>(name_bytes), name_len) == p->name,
              Err::format, "parameter name mismatch (expected " + p->name + ")");
      const uint8_t ndim = r.u8();
      require(ndim == p->shape.size(), Err::format, "parameter rank mismatch in " + p->name);
      for (int d : p->shape)
        require(r.u32() == uint32_t(d), Err::format, "parameter shape mismatch in " + p->name);
      require(r.u64() == expected_offset, Err::format, "parameter offset mismatch in " + p->name);
      expected_offset += p->count();
    }
    require(r.u64() == expected_offset, Err::format, "weights data length mismatch");
    for (auto& p : w.list_)
      for (double& v : p->value) v = r.f64();
    require(r.remaining() == 0, Err::format, "trailing bytes in weights file");
    return w;
  }

  void save(const std::string& path) const { write_file_bytes(path, serialize()); }

  static ModelWeights load(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    return deserialize(bytes.data(), bytes.size());
  }

  // 128-bit id of the exact serialized weights; streams embed it.
  std::array<uint8_t, 16> model_id() const {
    const std::vector<uint8_t> bytes = serialize();
    Hash128 h;
    h.update(bytes.data(), bytes.size());
    h.finalize(bytes.size());
    std::array<uint8_t, 16> id{};
    for (int i = 0; i < 8; ++i) id[size_t(i)] = uint8_t(h.lo >> (8 * i));
    for (int i = 0; i < 8; ++i) id[size_t(8 + i)] = uint8_t(h.hi >> (8 * i));
    return id;
  }

 private:
  ParamTensor& add(const std::string& name, std::vector<int> shape) {
    require(index_.find(name) == index_.end(), Err::config, "duplicate parameter " + name);
    list_.push_back(std::make_unique<ParamTensor>(name, std::move(shape)));
    index_[name] = list_.back().get();
    return *list_.back();
  }

  // softplus(0.54132...) + sigma_min ~= 1.01: unit scale at start.
  static void init_raw_scale(ParamTensor& p) {
    for (double& v : p.value) v = 0.5413248546129181;
  }

  void copy_from(const ModelWeights& other) {
    cfg_ = other.cfg_;
    list_.clear();
    index_.clear();
    for (const auto& p : other.list_) {
      list_.push_back(std::make_unique<ParamTensor>(*p));
      index_[list_.back()->name] = list_.back().get();
    }
  }

  CodecConfig cfg_;
  std::vector<std::unique_ptr<ParamTensor>> list_;
  std::unordered_map<std::string, ParamTensor*> index_;
};

// ---------------------------------------------------------------------------
// Bitstream.
// ---------------------------------------------------------------------------

struct Bitstream {
  static constexpr uint8_t kFormatVersion = 1;

  uint8_t version = kFormatVersion;
  std::array<uint8_t, 16> model_id{};
  uint32_t point_count = 0;
  uint8_t lambda_tag = 0;
  std::vector<uint8_t> payload_hyper;   // payload A
  std::vector<uint8_t> payload_latent;  // payload B

  size_t byte_size() const {
    return 4 + 1 + 16 + 4 + 1 + 4 + payload_hyper.size() + 4 + payload_latent.size();
  }
  size_t bit_size() const { return byte_size() * 8; }

  std::vector<uint8_t> serialize() const {
    std::vector<uint8_t> out;
    out.reserve(byte_size());
    out.insert(out.end(), {'S', 'P', 'C', 'A'});
    put_u8(out, version);
    out.insert(out.end(), model_id.begin(), model_id.end());
    put_u32(out, point_count);
    put_u8(out, lambda_tag);
    put_u32(out, uint32_t(payload_hyper.size()));
    out.insert(out.end(), payload_hyper.begin(), payload_hyper.end());
    put_u32(out, uint32_t(payload_latent.size()));
    out.insert(out.end(), payload_latent.begin(), payload_latent.end());
    return out;
  }

  static Bitstream parse(const uint8_t* data, size_t size) {
    ByteReader r(data, size);
    const uint8_t* magic = r.bytes(4);
    require(std::memcmp(magic, "SPCA", 4) == 0, Err::format, "not a bitstream (bad magic)");
    Bitstream bs;
    bs.version = r.u8();
    require(bs.version == kFormatVersion, Err::format,
            "unsupported bitstream version " + std::to_string(bs.version));
    const uint8_t* id = r.bytes(16);
    std::copy(id, id + 16, bs.model_id.begin());
    bs.point_count = r.u32();
    bs.lambda_tag = r.u8();
    const uint32_t len_a = r.u32();
    const uint8_t* a = r.bytes(len_a);
    bs.payload_hyper.assign(a, a + len_a);
    const uint32_t len_b = r.u32();
    const uint8_t* b = r.bytes(len_b);
    bs.payload_latent.assign(b, b + len_b);
    require(r.remaining() == 0, Err::format, "trailing bytes in bitstream");
    return bs;
  }

  void save(const std::string& path) const { write_file_bytes(path, serialize()); }

  static Bitstream load(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    return parse(bytes.data(), bytes.size());
  }
};

// ---------------------------------------------------------------------------
// Per-cloud kernel maps. Rebuilt from geometry on both endpoints; cheap next
// to the convolutions themselves.
// ---------------------------------------------------------------------------

struct CodecMaps {
  CoordinateHierarchy hier;
  KernelMap s1_l1, down_l1_l2, s1_l2, down_l2_l4, s1_l4, down_l4_l8;
  KernelMap up_l8_l4, up_l4_l2, up_l2_l1;
  KernelMap s1_l8, down_l8_l16, down_l16_l32, up_l32_l16, up_l16_l8;
  KernelMap masked;
  CausalMask mask;
};

inline CodecMaps build_codec_maps(CoordinateHierarchy hier, const CodecConfig& cfg) {
  CodecMaps m;
  m.hier = std::move(hier);
  const auto& L = m.hier.levels;
  const int ks = cfg.kernel_size;
  m.s1_l1 = build_kernel_map(L[0], L[0], ks, false);
  m.down_l1_l2 = build_kernel_map(L[0], L[1], ks, false);
  m.s1_l2 = build_kernel_map(L[1], L[1], ks, false);
  m.down_l2_l4 = build_kernel_map(L[1], L[2], ks, false);
  m.s1_l4 = build_kernel_map(L[2], L[2], ks, false);
  m.down_l4_l8 = build_kernel_map(L[2], L[3], ks, false);
  m.up_l8_l4 = build_kernel_map(L[3], L[2], ks, true);
  m.up_l4_l2 = build_kernel_map(L[2], L[1], ks, true);
  m.up_l2_l1 = build_kernel_map(L[1], L[0], ks, true);
  if (variant_has_hyper(cfg.variant)) {
    m.s1_l8 = build_kernel_map(L[3], L[3], ks, false);
    m.down_l8_l16 = build_kernel_map(L[3], L[4], ks, false);
    m.down_l16_l32 = build_kernel_map(L[4], L[5], ks, false);
    m.up_l32_l16 = build_kernel_map(L[5], L[4], ks, true);
    m.up_l16_l8 = build_kernel_map(L[4], L[3], ks, true);
  }
  if (variant_has_ar(cfg.variant)) {
    m.masked = build_kernel_map(L[3], L[3], cfg.masked_kernel_size, false);
    m.mask = CausalMask::lexicographic(cfg.masked_kernel_size);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Transforms.
// ---------------------------------------------------------------------------

namespace detail {
inline SparseTensor conv_named(const SparseTensor& x, ModelWeights& w, const std::string& name,
                               const KernelMap& km, Tape* tape) {
  return sparse_conv(x, w.at(name + ".w"), w.at(name + ".b"), km, tape);
}
inline SparseTensor tconv_named(const SparseTensor& x, ModelWeights& w, const std::string& name,
                                const KernelMap& km, const CoordMapPtr& target, Tape* tape) {
  return transposed_sparse_conv(x, w.at(name + ".w"), w.at(name + ".b"), km, target, tape);
}
}  // namespace detail

// RGB/255 features at stride 1 -> latents at stride 8.
inline SparseTensor analysis_transform(const SparseTensor& x, ModelWeights& w,
                                       const CodecMaps& m, Tape* tape) {
  SparseTensor t = detail::conv_named(x, w, "enc.conv1", m.s1_l1, tape);
  t = relu(t, tape);
  t = detail::conv_named(t, w, "enc.conv2", m.down_l1_l2, tape);
  t = detail::conv_named(t, w, "enc.conv3", m.s1_l2, tape);
  t = relu(t, tape);
  t = detail::conv_named(t, w, "enc.conv4", m.down_l2_l4, tape);
  t = detail::conv_named(t, w, "enc.conv5", m.s1_l4, tape);
  t = detail::conv_named(t, w, "enc.conv6", m.down_l4_l8, tape);
  return t;
}

// Latents at stride 8 -> RGB-domain reconstruction at stride 1 (unclamped;
// clamping to [0,1] happens only at output conversion).
inline SparseTensor synthesis_transform(const SparseTensor& y, ModelWeights& w,
                                        const CodecMaps& m, Tape* tape) {
  SparseTensor t = detail::tconv_named(y, w, "dec.conv1", m.up_l8_l4, m.hier.levels[2], tape);
  t = detail::conv_named(t, w, "dec.conv2", m.s1_l4, tape);
  t = detail::tconv_named(t, w, "dec.conv3", m.up_l4_l2, m.hier.levels[1], tape);
  t = relu(t, tape);
  t = detail::conv_named(t, w, "dec.conv4", m.s1_l2, tape);
  t = detail::tconv_named(t, w, "dec.conv5", m.up_l2_l1, m.hier.levels[0], tape);
  t = relu(t, tape);
  t = detail::conv_named(t, w, "dec.conv6", m.s1_l1, tape);
  return t;
}

// Quantized (or noise-relaxed) latents -> hyper latents at stride 32.
inline SparseTensor hyper_analysis(const SparseTensor& y, ModelWeights& w, const CodecMaps& m,
                                   Tape* tape) {
  SparseTensor t = detail::conv_named(y, w, "hyp_enc.conv1", m.s1_l8, tape);
  t = relu(t, tape);
  t = detail::conv_named(t, w, "hyp_enc.conv2", m.down_l8_l16, tape);
  t = relu(t, tape);
  t = detail::conv_named(t, w, "hyp_enc.conv3", m.down_l16_l32, tape);
  return t;
}

// Quantized hyper latents -> psi at stride 8 (width channels).
inline SparseTensor hyper_synthesis(const SparseTensor& z, ModelWeights& w, const CodecMaps& m,
                                    Tape* tape) {
  SparseTensor t = detail::tconv_named(z, w, "hyp_dec.conv1", m.up_l32_l16, m.hier.levels[4], tape);
  t = relu(t, tape);
  t = detail::tconv_named(t, w, "hyp_dec.conv2", m.up_l16_l8, m.hier.levels[3], tape);
  t = relu(t, tape);
  t = detail::conv_named(t, w, "hyp_dec.conv3", m.s1_l8, tape);
  return t;
}

// Entropy parameters for the main latents. `psi` may be null for variants
// without the hyper branch; an absent branch feeds zeros into the fusion.
inline EntropyParams context_params(const SparseTensor& y_causal, const SparseTensor* psi,
                                    ModelWeights& w, const CodecMaps& m, Tape* tape) {
  const CodecConfig& cfg = w.config();
  require(cfg.variant != PriorVariant::factorized, Err::config,
          "factorized variant has no context model");
  SparseTensor ar = variant_has_ar(cfg.variant)
                        ? masked_sparse_conv(y_causal, w.at("ctx.masked.w"),
                                             w.at("ctx.masked.b"), m.masked, m.mask, tape)
                        : SparseTensor::zeros(y_causal.coords, cfg.width);
  SparseTensor hy;
  if (variant_has_hyper(cfg.variant)) {
    require(psi != nullptr, Err::config, "variant requires hyper synthesis output");
    hy = *psi;
  } else {
    hy = SparseTensor::zeros(y_causal.coords, cfg.width);
  }
  SparseTensor f = concat_channels(ar, hy, tape);
  f = conv1x1(f, w.at("ctx.fuse1.w"), w.at("ctx.fuse1.b"), tape);
  f = relu(f, tape);
  f = conv1x1(f, w.at("ctx.fuse2.w"), w.at("ctx.fuse2.b"), tape);
  EntropyParams p;
  p.mu = slice_channels(f, 0, cfg.latent_channels, tape);
  p.sigma = softplus_shift(slice_channels(f, cfg.latent_channels, 2 * cfg.latent_channels, tape),
                           cfg.sigma_min, tape);
  return p;
}

// ---------------------------------------------------------------------------
// Sequential context for decoding: the row-by-row mirror of context_params,
// built on the same row kernels so results match bit for bit.
// ---------------------------------------------------------------------------

namespace detail {

class SequentialContext {
 public:
  SequentialContext(ModelWeights& w, const CodecMaps& m, const Matrix* psi, int n_rows)
      : w_(w), m_(m), psi_(psi), cfg_(w.config()) {
    const int W = cfg_.width, L = cfg_.latent_channels;
    const int F = cfg_.fusion_hidden_resolved();
    y_ = Matrix(n_rows, L);
    fused_.assign(size_t(2 * W), 0.0);
    hidden_.assign(size_t(F), 0.0);
    out2c_.assign(size_t(2 * L), 0.0);
    mu_.assign(size_t(L), 0.0);
    sigma_.assign(size_t(L), 0.0);
    if (variant_has_hyper(cfg_.variant))
      require(psi_ != nullptr && psi_->cols() == W, Err::config, "psi missing or mis-sized");
  }

  // Entropy parameters for row j; rows < j of y() must be final.
  void row_params(int j) {
    const int W = cfg_.width, L = cfg_.latent_channels;
    const int F = cfg_.fusion_hidden_resolved();
    if (variant_has_ar(cfg_.variant)) {
      // Strict causality: every unmasked contribution must come from an
      // earlier row. This is structural; verify anyway.
      const int32_t begin = m_.masked.row_ptr[size_t(j)];
      const int32_t end = m_.masked.row_ptr[size_t(j) + 1];
      for (int32_t e = begin; e < end; ++e) {
        const auto [k, i] = m_.masked.row_entries[size_t(e)];
        if (m_.mask.allowed[size_t(k)] && i >= j)
          fail(Err::state, "causality violation in sequential decode");
      }
      conv_row_forward(y_, m_.masked, &m_.mask, w_.at("ctx.masked.w").value.data(),
                       w_.at("ctx.masked.b").value.data(), L, W, j, fused_.data());
    } else {
      for (int c = 0; c < W; ++c) fused_[size_t(c)] = 0.0;
    }
    if (psi_) {
      const double* pr = psi_->row(j);
      for (int c = 0; c < W; ++c) fused_[size_t(W + c)] = pr[c];
    } else {
      for (int c = 0; c < W; ++c) fused_[size_t(W + c)] = 0.0;
    }
    linear_row_forward(fused_.data(), w_.at("ctx.fuse1.w").value.data(),
                       w_.at("ctx.fuse1.b").value.data(), 2 * W, F, hidden_.data());
    for (int c = 0; c < F; ++c) hidden_[size_t(c)] = hidden_[size_t(c)] > 0.0 ? hidden_[size_t(c)] : 0.0;
    linear_row_forward(hidden_.data(), w_.at("ctx.fuse2.w").value.data(),
                       w_.at("ctx.fuse2.b").value.data(), F, 2 * L, out2c_.data());
    for (int c = 0; c < L; ++c) {
      mu_[size_t(c)] = out2c_[size_t(c)];
      sigma_[size_t(c)] = softplus(out2c_[size_t(L + c)]) + cfg_.sigma_min;
    }
  }

  Matrix& y() { return y_; }
  double mu(int c) const { return mu_[size_t(c)]; }
  double sigma(int c) const { return sigma_[size_t(c)]; }

 private:
  ModelWeights& w_;
  const CodecMaps& m_;
  const Matrix* psi_;
  CodecConfig cfg_;
  Matrix y_;
  std::vector<double> fused_, hidden_, out2c_, mu_, sigma_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Encode / decode.
// ---------------------------------------------------------------------------

struct EncodeResult {
  Bitstream stream;
  PointCloud reconstruction;  // the decoder reproduces this bit for bit
  double est_y_bits = 0.0;    // model estimate for payload B
  double est_z_bits = 0.0;    // model estimate for payload A
  std::vector<int32_t> y_symbols, z_symbols;
};

struct DecodeResult {
  PointCloud cloud;
  std::vector<int32_t> y_symbols;
};

namespace detail {

inline PointCloud tensor_to_cloud(const SparseTensor& x) {
  PointCloud pc;
  const int n = x.rows();
  pc.points = x.coords->list();
  pc.colors.resize(size_t(n));
  for (int j = 0; j < n; ++j) {
    const double* r = x.values().row(j);
    for (int c = 0; c < 3; ++c) {
      double v = r[c];
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      pc.colors[size_t(j)][size_t(c)] = uint8_t(std::llround(v * 255.0));
    }
  }
  return pc;
}

inline std::vector<QuantizedCDF> per_channel_cdfs(const FactorizedParams& fp) {
  std::vector<QuantizedCDF> cdfs(size_t(fp.channels()));
  for (int c = 0; c < fp.channels(); ++c)
    cdfs[size_t(c)] = build_quantized_cdf(fp.location(c), fp.scale(c));
  return cdfs;
}

}  // namespace detail

inline EncodeResult encode(const PointCloud& pc, ModelWeights& w) {
  const CodecConfig& cfg = w.config();
  require(!pc.points.empty(), Err::invalid_input, "empty point cloud");
  require(pc.colors.size() == pc.points.size(), Err::invalid_input,
          "color count does not match point count");

  const CodecMaps m = build_codec_maps(build_hierarchy(pc.points), cfg);
  const CoordMapPtr& l0 = m.hier.levels[0];
  require(l0->size() == int(pc.points.size()), Err::invalid_input,
          "duplicate coordinates in input");

  Matrix x(l0->size(), 3);
  for (size_t p = 0; p < pc.points.size(); ++p) {
    const int row = l0->lookup(pc.points[p]);
    for (int c = 0; c < 3; ++c) x.at(row, c) = double(pc.colors[p][size_t(c)]) / 255.0;
  }
  const SparseTensor X = SparseTensor::from_values(l0, std::move(x));

  const SparseTensor Y = analysis_transform(X, w, m, nullptr);
  EncodeResult res;
  res.y_symbols = quantize_infer(Y.values());
  const SparseTensor y_hat = SparseTensor::from_values(
      Y.coords, symbols_to_matrix(res.y_symbols, Y.rows(), Y.channels()));

  SparseTensor psi;
  bool has_psi = false;
  if (variant_has_hyper(cfg.variant)) {
    const SparseTensor Z = hyper_analysis(y_hat, w, m, nullptr);
    res.z_symbols = quantize_infer(Z.values());
    const SparseTensor z_hat = SparseTensor::from_values(
        Z.coords, symbols_to_matrix(res.z_symbols, Z.rows(), Z.channels()));
    const FactorizedParams fz = w.prior_z();
    const auto cdfs = detail::per_channel_cdfs(fz);
    RangeEncoder enc_z;
    const int hc = z_hat.channels();
    for (int j = 0; j < z_hat.rows(); ++j)
      for (int c = 0; c < hc; ++c)
        enc_z.encode_symbol(res.z_symbols[size_t(j) * size_t(hc) + size_t(c)], cdfs[size_t(c)]);
    res.stream.payload_hyper = enc_z.flush();
    res.est_z_bits = factorized_rate_bits(z_hat.values(), fz);
    psi = hyper_synthesis(z_hat, w, m, nullptr);
    has_psi = true;
  }

  RangeEncoder enc_y;
  const int lc = y_hat.channels();
  if (cfg.variant == PriorVariant::factorized) {
    const FactorizedParams fy = w.prior_y();
    const auto cdfs = detail::per_channel_cdfs(fy);
    for (int j = 0; j < y_hat.rows(); ++j)
      for (int c = 0; c < lc; ++c)
        enc_y.encode_symbol(res.y_symbols[size_t(j) * size_t(lc) + size_t(c)], cdfs[size_t(c)]);
    res.est_y_bits = factorized_rate_bits(y_hat.values(), fy);
  } else {
    const EntropyParams ep = context_params(y_hat, has_psi ? &psi : nullptr, w, m, nullptr);
    for (int j = 0; j < y_hat.rows(); ++j)
      for (int c = 0; c < lc; ++c) {
        const QuantizedCDF cdf =
            build_quantized_cdf(ep.mu.values().at(j, c), ep.sigma.values().at(j, c));
        enc_y.encode_symbol(res.y_symbols[size_t(j) * size_t(lc) + size_t(c)], cdf);
      }
    res.est_y_bits =
        laplace_rate_bits(y_hat.values(), ep.mu.values(), ep.sigma.values());
  }
  res.stream.payload_latent = enc_y.flush();

  const SparseTensor x_hat = synthesis_transform(y_hat, w, m, nullptr);
  res.reconstruction = detail::tensor_to_cloud(x_hat);

  res.stream.version = Bitstream::kFormatVersion;
  res.stream.model_id = w.model_id();
  res.stream.point_count = uint32_t(pc.points.size());
  res.stream.lambda_tag = cfg.lambda_tag;
  return res;
}

inline DecodeResult decode(const std::vector<Coordinate>& geometry, const Bitstream& bs,
                           ModelWeights& w) {
  const CodecConfig& cfg = w.config();
  require(bs.version == Bitstream::kFormatVersion, Err::format, "unsupported bitstream version");
  require(bs.model_id == w.model_id(), Err::mismatch, "bitstream was coded with other weights");

  const CodecMaps m = build_codec_maps(build_hierarchy(geometry), cfg);
  require(bs.point_count == uint32_t(m.hier.levels[0]->size()), Err::mismatch,
          "bitstream point count does not match geometry");

  const CoordMapPtr& latent_map = m.hier.levels[3];
  const int n_latent = latent_map->size();
  const int lc = cfg.latent_channels;

  SparseTensor psi;
  bool has_psi = false;
  if (variant_has_hyper(cfg.variant)) {
    const CoordMapPtr& hyper_map = m.hier.levels[5];
    const FactorizedParams fz = w.prior_z();
    const auto cdfs = detail::per_channel_cdfs(fz);
    RangeDecoder dec_z(bs.payload_hyper);
    Matrix z(hyper_map->size(), cfg.hyper_channels);
    for (int j = 0; j < z.rows(); ++j)
      for (int c = 0; c < cfg.hyper_channels; ++c)
        z.at(j, c) = double(dec_z.decode_symbol(cdfs[size_t(c)]));
    const SparseTensor z_hat = SparseTensor::from_values(hyper_map, std::move(z));
    psi = hyper_synthesis(z_hat, w, m, nullptr);
    has_psi = true;
  }

  DecodeResult res;
  res.y_symbols.resize(size_t(n_latent) * size_t(lc));
  Matrix y_values;
  RangeDecoder dec_y(bs.payload_latent);
  if (cfg.variant == PriorVariant::factorized) {
    const FactorizedParams fy = w.prior_y();
    const auto cdfs = detail::per_channel_cdfs(fy);
    y_values = Matrix(n_latent, lc);
    for (int j = 0; j < n_latent; ++j)
      for (int c = 0; c < lc; ++c) {
        const int32_t s = dec_y.decode_symbol(cdfs[size_t(c)]);
        res.y_symbols[size_t(j) * size_t(lc) + size_t(c)] = s;
        y_values.at(j, c) = double(s);
      }
  } else {
    detail::SequentialContext ctx(w, m, has_psi ? &psi.values() : nullptr, n_latent);
    for (int j = 0; j < n_latent; ++j) {
      ctx.row_params(j);
      for (int c = 0; c < lc; ++c) {
        const QuantizedCDF cdf = build_quantized_cdf(ctx.mu(c), ctx.sigma(c));
        const int32_t s = dec_y.decode_symbol(cdf);
        res.y_symbols[size_t(j) * size_t(lc) + size_t(c)] = s;
        ctx.y().at(j, c) = double(s);
      }
    }
    y_values = std::move(ctx.y());
  }

  const SparseTensor y_hat = SparseTensor::from_values(latent_map, std::move(y_values));
  const SparseTensor x_hat = synthesis_transform(y_hat, w, m, nullptr);
  res.cloud = detail::tensor_to_cloud(x_hat);
  return res;
}

}  // namespace spcac
