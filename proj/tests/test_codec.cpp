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

#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <cstring>

#include "spcac/codec.hpp"

using namespace spcac;

namespace {

CodecConfig tiny_config(PriorVariant v) {
  CodecConfig cfg;
  cfg.width = 8;
  cfg.latent_channels = 8;
  cfg.hyper_channels = 8;
  cfg.variant = v;
  return cfg;
}

PointCloud random_cloud(uint64_t seed, int target, int32_t extent) {
  Rng rng(seed);
  PointCloud pc;
  std::vector<Coordinate> coords;
  for (int i = 0; i < target; ++i)
    coords.push_back({int32_t(rng.uniform_int(extent)), int32_t(rng.uniform_int(extent)),
                      int32_t(rng.uniform_int(extent))});
  CoordMapPtr map = build_coordinate_map(std::move(coords), 1);
  pc.points = map->list();
  pc.colors.resize(pc.points.size());
  for (auto& c : pc.colors)
    c = {uint8_t(rng.uniform_int(256)), uint8_t(rng.uniform_int(256)),
         uint8_t(rng.uniform_int(256))};
  return pc;
}

// Untrained weights produce near-zero latents; push a few layers around so
// round trips exercise nonzero symbols and both escape-free and escape paths.
ModelWeights lively_weights(const CodecConfig& cfg, uint64_t seed) {
  ModelWeights w = ModelWeights::create(cfg, seed);
  Rng rng(mix_seeds(seed, 0xabcd));
  for (double& v : w.at("enc.conv6.w").value) v *= 40.0;
  for (double& v : w.at("enc.conv6.b").value) v = rng.uniform(-2.0, 2.0);
  if (w.has("hyp_enc.conv3.w")) {
    for (double& v : w.at("hyp_enc.conv3.w").value) v *= 30.0;
    for (double& v : w.at("hyp_enc.conv3.b").value) v = rng.uniform(-1.5, 1.5);
  }
  return w;
}

}  // namespace

TEST_CASE("config validation catches bad settings") {
  CodecConfig cfg = tiny_config(PriorVariant::joint);
  CHECK_NOTHROW(cfg.validate());
  CodecConfig bad = cfg;
  bad.width = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.kernel_size = 4;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.masked_kernel_size = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.sigma_min = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.lambda_tag = 8;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(cfg.fusion_hidden_resolved() == 16);
  cfg.fusion_hidden = 5;
  CHECK(cfg.fusion_hidden_resolved() == 5);
}

TEST_CASE("lambda tags map the supported rate points") {
  CHECK(lambda_tag(100) == 1);
  CHECK(lambda_tag(1000) == 3);
  CHECK(lambda_tag(16000) == 7);
  CHECK(lambda_tag(123) == 0);
  for (size_t i = 0; i < kLambdaSet.size(); ++i)
    CHECK(lambda_from_tag(uint8_t(i + 1)) == kLambdaSet[i]);
  CHECK(lambda_from_tag(0) == 0.0);
  CHECK(lambda_from_tag(8) == 0.0);
}

TEST_CASE("variant names round trip") {
  for (PriorVariant v : {PriorVariant::factorized, PriorVariant::hyper_only,
                         PriorVariant::autoregressive_only, PriorVariant::joint}) {
    CHECK(variant_from_name(variant_name(v)) == v);
    CHECK(variant_has_hyper(v) == (v == PriorVariant::hyper_only || v == PriorVariant::joint));
    CHECK(variant_has_ar(v) ==
          (v == PriorVariant::autoregressive_only || v == PriorVariant::joint));
  }
  CHECK_THROWS_AS(variant_from_name("nope"), Error);
}

TEST_CASE("weights hold the per-variant parameter sets in creation order") {
  ModelWeights joint = ModelWeights::create(tiny_config(PriorVariant::joint), 3);
  CHECK(joint.has("enc.conv1.w"));
  CHECK(joint.has("dec.conv6.b"));
  CHECK(joint.has("hyp_enc.conv1.w"));
  CHECK(joint.has("hyp_dec.conv3.w"));
  CHECK(joint.has("prior_z.mu"));
  CHECK(joint.has("ctx.masked.w"));
  CHECK(joint.has("ctx.fuse1.w"));
  CHECK(joint.has("ctx.fuse2.b"));
  CHECK_FALSE(joint.has("prior_y.mu"));
  CHECK(joint.at("enc.conv1.w").shape == std::vector<int>{27, 3, 8});
  CHECK(joint.at("ctx.masked.w").shape == std::vector<int>{125, 8, 8});
  CHECK(joint.at("ctx.fuse1.w").shape == std::vector<int>{1, 16, 16});
  CHECK(joint.at("ctx.fuse2.w").shape == std::vector<int>{1, 16, 16});
  CHECK(joint.params().front()->name == "enc.conv1.w");
  CHECK(joint.params().back()->name == "ctx.fuse2.b");

  ModelWeights fact = ModelWeights::create(tiny_config(PriorVariant::factorized), 3);
  CHECK(fact.has("prior_y.mu"));
  CHECK(fact.has("prior_y.sigma_raw"));
  CHECK_FALSE(fact.has("hyp_enc.conv1.w"));
  CHECK_FALSE(fact.has("ctx.fuse1.w"));
  CHECK_FALSE(fact.has("ctx.masked.w"));
  // raw scale initialization lands the post-softplus scale at about one
  FactorizedParams fy = fact.prior_y();
  for (int c = 0; c < fy.channels(); ++c) {
    CHECK(fy.location(c) == 0.0);
    CHECK(fy.scale(c) == Catch::Approx(1.01).margin(1e-3));
  }

  ModelWeights hyper = ModelWeights::create(tiny_config(PriorVariant::hyper_only), 3);
  CHECK(hyper.has("hyp_enc.conv1.w"));
  CHECK(hyper.has("ctx.fuse1.w"));
  CHECK_FALSE(hyper.has("ctx.masked.w"));
  CHECK_FALSE(hyper.has("prior_y.mu"));

  ModelWeights ar = ModelWeights::create(tiny_config(PriorVariant::autoregressive_only), 3);
  CHECK(ar.has("ctx.masked.w"));
  CHECK_FALSE(ar.has("hyp_enc.conv1.w"));
  CHECK_FALSE(ar.has("prior_z.mu"));

  CHECK_THROWS_AS(joint.at("enc.conv9.w"), Error);
}

TEST_CASE("weight creation is deterministic in the seed") {
  ModelWeights a = ModelWeights::create(tiny_config(PriorVariant::joint), 42);
  ModelWeights b = ModelWeights::create(tiny_config(PriorVariant::joint), 42);
  ModelWeights c = ModelWeights::create(tiny_config(PriorVariant::joint), 43);
  CHECK(a.serialize() == b.serialize());
  CHECK(a.serialize() != c.serialize());
  CHECK(a.model_id() == b.model_id());
  CHECK(a.model_id() != c.model_id());
}

TEST_CASE("weights serialize bitwise and reject corruption") {
  ModelWeights w = lively_weights(tiny_config(PriorVariant::joint), 7);
  w.set_lambda_tag(3);
  const std::vector<uint8_t> bytes = w.serialize();
  ModelWeights back = ModelWeights::deserialize(bytes.data(), bytes.size());
  CHECK(back.serialize() == bytes);
  CHECK(back.config().lambda_tag == 3);
  CHECK(back.config().variant == PriorVariant::joint);
  CHECK(back.model_id() == w.model_id());

  // model id reacts to a single weight nudge
  ModelWeights nudged = w;
  nudged.at("dec.conv3.w").value[5] += 1e-9;
  CHECK(nudged.model_id() != w.model_id());

  std::vector<uint8_t> truncated(bytes.begin(), bytes.end() - 9);
  CHECK_THROWS_AS(ModelWeights::deserialize(truncated.data(), truncated.size()), Error);
  std::vector<uint8_t> trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(ModelWeights::deserialize(trailing.data(), trailing.size()), Error);
  std::vector<uint8_t> bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    ModelWeights::deserialize(bad_magic.data(), bad_magic.size());
    FAIL("unreachable");
  } catch (const Error& e) {
    CHECK(e.code() == Err::format);
  }

  const std::string path = "test_codec_weights.spcw";
  w.save(path);
  ModelWeights loaded = ModelWeights::load(path);
  CHECK(loaded.serialize() == bytes);
  std::remove(path.c_str());
}

TEST_CASE("bitstream container round trips and rejects corruption") {
  Bitstream bs;
  bs.model_id.fill(0x5a);
  bs.point_count = 12345;
  bs.lambda_tag = 4;
  bs.payload_hyper = {1, 2, 3};
  bs.payload_latent = {9, 8, 7, 6, 5};
  const std::vector<uint8_t> bytes = bs.serialize();
  CHECK(bytes.size() == bs.byte_size());
  CHECK(bs.bit_size() == bytes.size() * 8);

  Bitstream back = Bitstream::parse(bytes.data(), bytes.size());
  CHECK(back.model_id == bs.model_id);
  CHECK(back.point_count == 12345);
  CHECK(back.lambda_tag == 4);
  CHECK(back.payload_hyper == bs.payload_hyper);
  CHECK(back.payload_latent == bs.payload_latent);

  std::vector<uint8_t> trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(Bitstream::parse(trailing.data(), trailing.size()), Error);
  std::vector<uint8_t> truncated(bytes.begin(), bytes.end() - 2);
  CHECK_THROWS_AS(Bitstream::parse(truncated.data(), truncated.size()), Error);
  std::vector<uint8_t> bad = bytes;
  bad[4] = 99;  // version
  CHECK_THROWS_AS(Bitstream::parse(bad.data(), bad.size()), Error);

  const std::string path = "test_codec_stream.bin";
  bs.save(path);
  Bitstream loaded = Bitstream::load(path);
  CHECK(loaded.serialize() == bytes);
  std::remove(path.c_str());
}

TEST_CASE("all-zero weights reconstruct the final decoder bias") {
  CodecConfig cfg = tiny_config(PriorVariant::factorized);
  ModelWeights w = ModelWeights::create(cfg, 0);
  for (ParamTensor* p : w.params())
    if (p->name != "prior_y.sigma_raw")
      std::fill(p->value.begin(), p->value.end(), 0.0);
  w.at("dec.conv6.b").value = {0.25, 0.5, 0.75};

  PointCloud pc = random_cloud(5, 200, 16);
  EncodeResult res = encode(pc, w);
  for (const auto& color : res.reconstruction.colors) {
    CHECK(color[0] == 64);   // round(0.25 * 255)
    CHECK(color[1] == 128);  // round(127.5) half away from zero
    CHECK(color[2] == 191);  // round(191.25)
  }
  // all latents hit zero symbols under zero weights
  for (int32_t s : res.y_symbols) CHECK(s == 0);
}

TEST_CASE("context parameters are causal in the latent rows") {
  CodecConfig cfg = tiny_config(PriorVariant::joint);
  ModelWeights w = lively_weights(cfg, 11);
  PointCloud pc = random_cloud(13, 400, 32);
  CodecMaps m = build_codec_maps(build_hierarchy(pc.points), cfg);
  const CoordMapPtr& lmap = m.hier.levels[3];
  const int n = lmap->size();
  REQUIRE(n >= 4);

  Rng rng(17);
  Matrix yv(n, cfg.latent_channels);
  for (size_t i = 0; i < yv.size(); ++i) yv.data()[i] = double(int(rng.uniform_int(9)) - 4);
  Matrix psiv(n, cfg.width);
  for (size_t i = 0; i < psiv.size(); ++i) psiv.data()[i] = rng.uniform(-1.0, 1.0);

  auto eval = [&](const Matrix& y) {
    SparseTensor yt = SparseTensor::from_values(lmap, Matrix(y));
    SparseTensor psi = SparseTensor::from_values(lmap, Matrix(psiv));
    return context_params(yt, &psi, w, m, nullptr);
  };
  EntropyParams base = eval(yv);

  for (int trial = 0; trial < 20; ++trial) {
    const int row = 1 + int(rng.uniform_int(n - 1));
    Matrix perturbed = yv;
    for (int j = row; j < n; ++j)
      for (int c = 0; c < cfg.latent_channels; ++c)
        perturbed.at(j, c) += double(int(rng.uniform_int(7)) - 3);
    EntropyParams got = eval(perturbed);
    for (int c = 0; c < cfg.latent_channels; ++c) {
      // row `row` and everything before it only see rows < row
      CHECK(got.mu.values().at(row, c) == base.mu.values().at(row, c));
      CHECK(got.sigma.values().at(row, c) == base.sigma.values().at(row, c));
      CHECK(got.mu.values().at(row - 1, c) == base.mu.values().at(row - 1, c));
    }
  }
}

TEST_CASE("sequential context reproduces the batch context bit for bit") {
  for (PriorVariant v : {PriorVariant::hyper_only, PriorVariant::autoregressive_only,
                         PriorVariant::joint}) {
    CodecConfig cfg = tiny_config(v);
    ModelWeights w = lively_weights(cfg, 19);
    PointCloud pc = random_cloud(23, 350, 32);
    CodecMaps m = build_codec_maps(build_hierarchy(pc.points), cfg);
    const CoordMapPtr& lmap = m.hier.levels[3];
    const int n = lmap->size();

    Rng rng(29);
    Matrix yv(n, cfg.latent_channels);
    for (size_t i = 0; i < yv.size(); ++i) yv.data()[i] = double(int(rng.uniform_int(9)) - 4);
    Matrix psiv(n, cfg.width);
    for (size_t i = 0; i < psiv.size(); ++i) psiv.data()[i] = rng.uniform(-1.0, 1.0);

    SparseTensor yt = SparseTensor::from_values(lmap, Matrix(yv));
    SparseTensor psi = SparseTensor::from_values(lmap, Matrix(psiv));
    const bool has_psi = variant_has_hyper(v);
    EntropyParams batch = context_params(yt, has_psi ? &psi : nullptr, w, m, nullptr);

    detail::SequentialContext ctx(w, m, has_psi ? &psiv : nullptr, n);
    for (int j = 0; j < n; ++j) {
      ctx.row_params(j);
      for (int c = 0; c < cfg.latent_channels; ++c) {
        REQUIRE(ctx.mu(c) == batch.mu.values().at(j, c));
        REQUIRE(ctx.sigma(c) == batch.sigma.values().at(j, c));
        ctx.y().at(j, c) = yv.at(j, c);  // reveal the row, as the decoder would
      }
    }
  }
}

TEST_CASE("encode and decode agree symbol for symbol and byte for byte") {
  int checked = 0;
  for (PriorVariant v : {PriorVariant::factorized, PriorVariant::hyper_only,
                         PriorVariant::autoregressive_only, PriorVariant::joint}) {
    CodecConfig cfg = tiny_config(v);
    cfg.lambda_tag = 3;
    ModelWeights w = lively_weights(cfg, 31 + uint64_t(v));
    for (int i = 0; i < 2; ++i) {
      PointCloud pc = random_cloud(mix_seeds(37, uint64_t(v), uint64_t(i)), 300 + 100 * i, 32);
      EncodeResult enc = encode(pc, w);
      CHECK(enc.stream.point_count == pc.size());
      CHECK(enc.stream.lambda_tag == 3);
      if (variant_has_hyper(v))
        CHECK_FALSE(enc.stream.payload_hyper.empty());
      else
        CHECK(enc.stream.payload_hyper.empty());

      // ship through bytes, as a file would
      const std::vector<uint8_t> wire = enc.stream.serialize();
      Bitstream bs = Bitstream::parse(wire.data(), wire.size());
      DecodeResult dec = decode(pc.points, bs, w);

      REQUIRE(dec.y_symbols == enc.y_symbols);
      REQUIRE(dec.cloud.points == enc.reconstruction.points);
      REQUIRE(dec.cloud.colors == enc.reconstruction.colors);
      ++checked;
    }
  }
  CHECK(checked == 8);
}

TEST_CASE("payload sizes track the model estimate") {
  CodecConfig cfg = tiny_config(PriorVariant::joint);
  ModelWeights w = lively_weights(cfg, 41);
  PointCloud pc = random_cloud(43, 800, 32);
  EncodeResult enc = encode(pc, w);
  const double actual_y = double(enc.stream.payload_latent.size()) * 8.0;
  const double actual_z = double(enc.stream.payload_hyper.size()) * 8.0;
  // generous unit-level budget; the tight bound is checked at scale elsewhere
  CHECK(actual_y <= enc.est_y_bits * 1.10 + 256.0);
  CHECK(actual_y + 256.0 >= enc.est_y_bits * 0.90);
  CHECK(actual_z <= enc.est_z_bits * 1.10 + 256.0);
}

TEST_CASE("decode rejects mismatched weights, geometry and streams") {
  CodecConfig cfg = tiny_config(PriorVariant::joint);
  ModelWeights w = lively_weights(cfg, 47);
  PointCloud pc = random_cloud(53, 300, 32);
  EncodeResult enc = encode(pc, w);

  ModelWeights other = lively_weights(cfg, 48);
  try {
    decode(pc.points, enc.stream, other);
    FAIL("unreachable");
  } catch (const Error& e) {
    CHECK(e.code() == Err::mismatch);
  }

  std::vector<Coordinate> short_geom(pc.points.begin(), pc.points.end() - 1);
  try {
    decode(short_geom, enc.stream, w);
    FAIL("unreachable");
  } catch (const Error& e) {
    CHECK(e.code() == Err::mismatch);
  }

  // corrupting the latent payload must never silently pass
  Bitstream tampered = enc.stream;
  REQUIRE(tampered.payload_latent.size() > 12);
  tampered.payload_latent[10] ^= 0x40;
  bool caught = false;
  try {
    DecodeResult dec = decode(pc.points, tampered, w);
    caught = dec.y_symbols != enc.y_symbols;
  } catch (const Error&) {
    caught = true;
  }
  CHECK(caught);
}

TEST_CASE("encode validates its input") {
  CodecConfig cfg = tiny_config(PriorVariant::factorized);
  ModelWeights w = ModelWeights::create(cfg, 1);
  PointCloud empty;
  CHECK_THROWS_AS(encode(empty, w), Error);

  PointCloud pc = random_cloud(59, 100, 16);
  pc.colors.pop_back();
  CHECK_THROWS_AS(encode(pc, w), Error);

  PointCloud dup = random_cloud(61, 100, 16);
  dup.points.push_back(dup.points.front());
  dup.colors.push_back({1, 2, 3});
  try {
    encode(dup, w);
    FAIL("unreachable");
  } catch (const Error& e) {
    CHECK(e.code() == Err::invalid_input);
  }
}

TEST_CASE("the factorized variant has no context model") {
  CodecConfig cfg = tiny_config(PriorVariant::factorized);
  ModelWeights w = ModelWeights::create(cfg, 1);
  PointCloud pc = random_cloud(67, 150, 16);
  CodecMaps m = build_codec_maps(build_hierarchy(pc.points), cfg);
  SparseTensor y = SparseTensor::zeros(m.hier.levels[3], cfg.latent_channels);
  CHECK_THROWS_AS(context_params(y, nullptr, w, m, nullptr), Error);
}
