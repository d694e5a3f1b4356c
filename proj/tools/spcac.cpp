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

// Command line frontend: train / encode / decode / eval / sweep / bdrate /
// ablate / gen. Exit codes: 0 success, 1 runtime error ("error: E_...: msg"
// on stderr), 2 usage errors.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spcac/spcac.hpp"

namespace fs = std::filesystem;

namespace {

void print_epoch(const spcac::EpochRecord& r) {
  std::fprintf(stderr, "  epoch %3d  loss=%-12.6g rate_y=%-10.6g rate_z=%-10.6g mse=%-10.4g lr=%.3g\n",
               r.epoch, r.loss, r.rate_y_bits, r.rate_z_bits, r.mse_yuv, r.lr);
}

std::string lambda_str(double lambda) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", lambda);
  return buf;
}

std::vector<spcac::PointCloud> training_set_for(const spcac::TrainConfig& tc) {
  return spcac::make_dataset(spcac::mix_seeds(tc.seed, 0x44415441u), tc.dataset_size,
                             tc.resolution_bits);
}

std::vector<spcac::PointCloud> heldout_set_for(const spcac::TrainConfig& tc) {
  return spcac::make_dataset(spcac::mix_seeds(tc.seed, 0x48454c44u), tc.heldout_size,
                             tc.resolution_bits);
}

int run_train(const std::string& config_path, const std::string& weights_out,
              const std::string& log_out, bool quiet) {
  const spcac::TrainRunConfig rc = spcac::load_train_config(config_path);
  rc.train.validate();
  std::fprintf(stderr, "training variant=%s lambda=%g on %d clouds for %d epochs\n",
               spcac::variant_name(rc.train.variant), rc.train.lambda, rc.train.dataset_size,
               rc.train.epochs);
  const auto dataset = training_set_for(rc.train);
  const spcac::TrainResult result =
      spcac::train(rc.train, dataset, quiet ? spcac::EpochCallback() : print_epoch);
  result.weights.save(weights_out);
  if (!log_out.empty()) {
    const std::string csv = spcac::train_log_csv(result.log);
    spcac::write_file_bytes(log_out, std::vector<uint8_t>(csv.begin(), csv.end()));
  }
  std::printf("trained %s lambda=%g: final loss %.6g (epoch 0: %.6g)\n",
              spcac::variant_name(rc.train.variant), rc.train.lambda, result.log.back().loss,
              result.log.front().loss);
  std::printf("weights written to %s\n", weights_out.c_str());
  return 0;
}

int run_encode(const std::string& weights, const std::string& input, const std::string& output,
               const std::string& recon) {
  spcac::ModelWeights w = spcac::ModelWeights::load(weights);
  const spcac::PointCloud pc = spcac::read_ply(input);
  const spcac::EncodeResult res = spcac::encode(pc, w);
  res.stream.save(output);
  if (!recon.empty()) spcac::write_ply(recon, res.reconstruction);
  const spcac::PsnrResult ps = spcac::psnr_metrics(pc, res.reconstruction);
  const double bpp = double(res.stream.bit_size()) / double(pc.points.size());
  std::printf("encoded %zu points: %zu bytes (%.4f bpp)\n", pc.points.size(),
              res.stream.byte_size(), bpp);
  std::printf("psnr_y=%.4f psnr_yuv=%.4f\n", ps.psnr_y, ps.psnr_yuv);
  std::printf("estimated bits: latent=%.1f hyper=%.1f; actual payload bits: latent=%zu hyper=%zu\n",
              res.est_y_bits, res.est_z_bits, res.stream.payload_latent.size() * 8,
              res.stream.payload_hyper.size() * 8);
  return 0;
}

int run_decode(const std::string& weights, const std::string& geometry, const std::string& input,
               const std::string& output) {
  spcac::ModelWeights w = spcac::ModelWeights::load(weights);
  const spcac::PointCloud geo = spcac::read_ply(geometry, /*require_colors=*/false);
  const spcac::Bitstream bs = spcac::Bitstream::load(input);
  const spcac::DecodeResult res = spcac::decode(geo.points, bs, w);
  spcac::write_ply(output, res.cloud);
  std::printf("decoded %zu points to %s\n", res.cloud.points.size(), output.c_str());
  return 0;
}

int run_eval(const std::string& ref_path, const std::string& recon_path,
             const std::string& bitstream, double bits, const std::string& label,
             const std::string& csv_out) {
  const spcac::PointCloud ref = spcac::read_ply(ref_path);
  const spcac::PointCloud recon = spcac::read_ply(recon_path);
  const spcac::PsnrResult ps = spcac::psnr_metrics(ref, recon);
  double bpp = 0.0;
  if (!bitstream.empty())
    bpp = double(spcac::Bitstream::load(bitstream).bit_size()) / double(ref.points.size());
  else if (bits > 0)
    bpp = bits / double(ref.points.size());
  std::printf("psnr_y=%.4f psnr_u=%.4f psnr_v=%.4f psnr_yuv=%.4f\n", ps.psnr_y, ps.psnr_u,
              ps.psnr_v, ps.psnr_yuv);
  if (bpp > 0) std::printf("bpp=%.6f\n", bpp);
  if (!csv_out.empty()) {
    spcac::RDPoint p;
    p.label = label;
    p.bpp = bpp;
    p.psnr_y = ps.psnr_y;
    p.psnr_yuv = ps.psnr_yuv;
    spcac::write_rd_csv(csv_out, {p});
  }
  return 0;
}

int run_sweep(const std::string& config_path, const std::string& out_dir,
              const std::string& lambdas_arg, bool quiet) {
  spcac::TrainRunConfig rc = spcac::load_train_config(config_path);
  if (!lambdas_arg.empty()) rc.lambdas = spcac::parse_lambda_list(lambdas_arg);
  fs::create_directories(out_dir);

  const auto entries =
      spcac::lambda_sweep(rc.train, rc.lambdas, quiet ? spcac::EpochCallback() : print_epoch);

  spcac::RDCurve curve;
  for (const auto& e : entries) {
    const std::string tag = lambda_str(e.lambda);
    e.result.weights.save(out_dir + "/model_lambda" + tag + ".spcw");
    const std::string csv = spcac::train_log_csv(e.result.log);
    spcac::write_file_bytes(out_dir + "/train_lambda" + tag + ".csv",
                            std::vector<uint8_t>(csv.begin(), csv.end()));
    for (size_t k = 0; k < e.eval.streams.size(); ++k) {
      char name[64];
      std::snprintf(name, sizeof(name), "/heldout%02zu_lambda%s.bin", k, tag.c_str());
      e.eval.streams[k].save(out_dir + name);
    }
    curve.push_back(e.eval.point);
    std::printf("%-14s bpp=%-10.6f psnr_y=%-8.4f psnr_yuv=%.4f\n", e.eval.point.label.c_str(),
                e.eval.point.bpp, e.eval.point.psnr_y, e.eval.point.psnr_yuv);
  }
  spcac::write_rd_csv(out_dir + "/curve.csv", curve);
  std::printf("sweep artifacts written to %s\n", out_dir.c_str());
  return 0;
}

int run_bdrate(const std::string& ref_csv, const std::string& test_csv, bool use_yuv) {
  const spcac::RDCurve a = spcac::read_rd_csv(ref_csv);
  const spcac::RDCurve b = spcac::read_rd_csv(test_csv);
  const spcac::BdResult r = spcac::bd_metrics(a, b, use_yuv);
  std::printf("bd_rate=%.4f%% bd_psnr=%.4f dB (%s)\n", r.bd_rate_percent, r.bd_psnr_db,
              use_yuv ? "yuv" : "luma");
  return 0;
}

int run_ablate(const std::string& config_path, const std::string& out_dir,
               const std::string& variants_arg, bool quiet) {
  const spcac::TrainRunConfig rc = spcac::load_train_config(config_path);
  std::vector<spcac::PriorVariant> variants;
  if (variants_arg.empty()) {
    variants = {spcac::PriorVariant::factorized, spcac::PriorVariant::hyper_only,
                spcac::PriorVariant::autoregressive_only, spcac::PriorVariant::joint};
  } else {
    std::stringstream ss(variants_arg);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) variants.push_back(spcac::variant_from_name(item));
  }
  fs::create_directories(out_dir);

  const auto train_set = training_set_for(rc.train);
  const auto heldout = heldout_set_for(rc.train);
  spcac::require(!heldout.empty(), spcac::Err::config, "ablate needs heldout_size >= 1");

  spcac::RDCurve rows;
  for (spcac::PriorVariant v : variants) {
    spcac::TrainConfig tc = rc.train;
    tc.variant = v;
    std::fprintf(stderr, "training variant=%s lambda=%g\n", spcac::variant_name(v), tc.lambda);
    spcac::TrainResult result =
        spcac::train(tc, train_set, quiet ? spcac::EpochCallback() : print_epoch);
    result.weights.save(out_dir + "/model_" + spcac::variant_name(v) + ".spcw");
    const spcac::HeldoutEval ev =
        spcac::evaluate_on(result.weights, heldout, spcac::variant_name(v));
    rows.push_back(ev.point);
    std::printf("%-20s bpp=%-10.6f psnr_y=%-8.4f psnr_yuv=%.4f\n", spcac::variant_name(v),
                ev.point.bpp, ev.point.psnr_y, ev.point.psnr_yuv);
  }
  spcac::write_rd_csv(out_dir + "/ablation.csv", rows);
  std::printf("ablation artifacts written to %s\n", out_dir.c_str());
  return 0;
}

int run_gen(uint64_t seed, int count, int bits, const std::string& out_dir,
            const std::string& prefix, bool ascii) {
  fs::create_directories(out_dir);
  const auto clouds = spcac::make_dataset(seed, count, bits);
  for (size_t i = 0; i < clouds.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "/%s%03zu.ply", prefix.c_str(), i);
    spcac::write_ply(out_dir + name, clouds[i], !ascii);
  }
  std::printf("wrote %zu clouds to %s\n", clouds.size(), out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse tensor codec for point cloud color attributes"};
  app.require_subcommand(1);

  std::string config_path, weights_path, weights_out, log_out;
  std::string input, output, recon, geometry;
  std::string ref_path, test_path, label = "point", csv_out, out_dir;
  std::string lambdas_arg, variants_arg, prefix = "cloud";
  double bits = 0;
  bool use_yuv = false, quiet = false, ascii = false;
  uint64_t seed = 1;
  int count = 8, res_bits = 6;

  auto* c_train = app.add_subcommand("train", "train one model from a config file");
  c_train->add_option("--config", config_path, "key = value config file")->required();
  c_train->add_option("--weights-out", weights_out, "output weights path")->required();
  c_train->add_option("--log-out", log_out, "per-epoch csv log path");
  c_train->add_flag("--quiet", quiet, "suppress per-epoch progress");

  auto* c_encode = app.add_subcommand("encode", "compress colors of a voxelized ply");
  c_encode->add_option("--weights", weights_path, "trained weights (.spcw)")->required();
  c_encode->add_option("--input", input, "input ply with colors")->required();
  c_encode->add_option("--output", output, "output bitstream path")->required();
  c_encode->add_option("--recon", recon, "also write the reconstruction ply");

  auto* c_decode = app.add_subcommand("decode", "reconstruct colors from a bitstream");
  c_decode->add_option("--weights", weights_path, "trained weights (.spcw)")->required();
  c_decode->add_option("--geometry", geometry, "ply carrying the (lossless) geometry")->required();
  c_decode->add_option("--input", input, "input bitstream path")->required();
  c_decode->add_option("--output", output, "output ply path")->required();

  auto* c_eval = app.add_subcommand("eval", "psnr between two plys on shared geometry");
  c_eval->add_option("--ref", ref_path, "reference ply")->required();
  c_eval->add_option("--recon", test_path, "reconstruction ply")->required();
  c_eval->add_option("--bitstream", input, "bitstream to take the rate from");
  c_eval->add_option("--bits", bits, "explicit bit count for the rate");
  c_eval->add_option("--label", label, "label for the csv row");
  c_eval->add_option("--csv-out", csv_out, "write a one-row rd csv");

  auto* c_sweep = app.add_subcommand("sweep", "train and evaluate a lambda sweep");
  c_sweep->add_option("--config", config_path, "key = value config file")->required();
  c_sweep->add_option("--out-dir", out_dir, "artifact directory")->required();
  c_sweep->add_option("--lambdas", lambdas_arg, "comma list overriding the config");
  c_sweep->add_flag("--quiet", quiet, "suppress per-epoch progress");

  auto* c_bdrate = app.add_subcommand("bdrate", "bd metrics between two rd csv curves");
  c_bdrate->add_option("--ref", ref_path, "reference curve csv")->required();
  c_bdrate->add_option("--test", test_path, "test curve csv")->required();
  c_bdrate->add_flag("--yuv", use_yuv, "use combined yuv psnr instead of luma");

  auto* c_ablate = app.add_subcommand("ablate", "train all prior variants at one lambda");
  c_ablate->add_option("--config", config_path, "key = value config file")->required();
  c_ablate->add_option("--out-dir", out_dir, "artifact directory")->required();
  c_ablate->add_option("--variants", variants_arg, "comma list of variants to include");
  c_ablate->add_flag("--quiet", quiet, "suppress per-epoch progress");

  auto* c_gen = app.add_subcommand("gen", "write synthetic sample clouds as ply");
  c_gen->add_option("--seed", seed, "generator seed");
  c_gen->add_option("--count", count, "number of clouds");
  c_gen->add_option("--resolution-bits", res_bits, "grid side = 2^bits");
  c_gen->add_option("--out-dir", out_dir, "output directory")->required();
  c_gen->add_option("--prefix", prefix, "file name prefix");
  c_gen->add_flag("--ascii", ascii, "write ascii ply instead of binary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_train->parsed()) return run_train(config_path, weights_out, log_out, quiet);
    if (c_encode->parsed()) return run_encode(weights_path, input, output, recon);
    if (c_decode->parsed()) return run_decode(weights_path, geometry, input, output);
    if (c_eval->parsed()) return run_eval(ref_path, test_path, input, bits, label, csv_out);
    if (c_sweep->parsed()) return run_sweep(config_path, out_dir, lambdas_arg, quiet);
    if (c_bdrate->parsed()) return run_bdrate(ref_path, test_path, use_yuv);
    if (c_ablate->parsed()) return run_ablate(config_path, out_dir, variants_arg, quiet);
    if (c_gen->parsed()) return run_gen(seed, count, res_bits, out_dir, prefix, ascii);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
