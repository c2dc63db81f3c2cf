// respin: desk-scale laboratory for rotation-based post-training
// quantization of a toy transformer. Subcommands cover the full pipeline:
// pretrain -> calibrate -> eval / compare, plus cost tables and rotation
// analysis. Exit codes: 0 success, 2 config/usage error, 3 numerical
// failure.

#include "CLI11.hpp"
#include "json.hpp"

#include "respin/harness.hpp"

#include <cstdio>
#include <fstream>

using namespace respin;

namespace {

std::vector<int> parse_ranks(const std::string& text, int dim) {
  std::vector<int> ranks;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    if (tok == "full") {
      ranks.push_back(dim);
    } else if (tok == "dense") {
      ranks.push_back(-1);
    } else {
      size_t pos = 0;
      int r = std::stoi(tok, &pos);
      if (pos != tok.size() || r < 0) throw ConfigError("bad rank token: " + tok);
      ranks.push_back(r);
    }
  }
  if (ranks.empty()) throw ConfigError("empty rank list");
  return ranks;
}

int model_dim_of(const std::filesystem::path& calib_dir) {
  return load_model(calib_dir / "model_fp").cfg.dim;
}

GeometrySpec geometry_from_arg(const std::string& arg, int rank) {
  GeometrySpec g;
  if (std::filesystem::exists(arg)) {
    std::ifstream in(arg);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw ConfigError("geometry file is not valid JSON: " + arg);
    g.name = j.value("name", std::string("custom"));
    g.layers = j.at("layers");
    g.dim = j.at("dim");
    g.d_ffn = j.at("d_ffn");
    g.n_heads = j.at("n_heads");
    g.d_head = g.dim / g.n_heads;
    g.vocab = j.value("vocab", 0);
    g.rank = j.value("rank", 32);
  } else {
    g = geometry_preset(arg);
  }
  if (rank >= 0) g.rank = rank;
  g.validate();
  return g;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"respin: rotation-based post-training quantization laboratory"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_dir, out_path, work_dir, rank_list, geometry;
  int rank_flag = -1;

  auto* pre = app.add_subcommand(
      "pretrain", "Build the seeded toy model and corpus, train with SGD+momentum, and "
                  "write the checkpoint.\nOutputs: <out>/model/ (manifest + f64 blobs), "
                  "pretrain_log.csv (step,loss,lr), corpus.json, hashes.json.");
  pre->add_option("--config", config_path, "experiment JSON config")->required();
  pre->add_option("--out", out_path, "output directory")->required();

  auto* cal = app.add_subcommand(
      "calibrate", "Train the scheme's rotations on the quantized forward, fuse them and "
                   "quantize weights (GPTQ, or RTN for the rtn scheme).\nOutputs: "
                   "rotations/, model_fp/, model_quant/, training_log.csv "
                   "(step,loss,lr,frob_*,cos_*), gptq_report.csv "
                   "(site,clip_ratio,gptq_proxy_loss,rtn_proxy_loss), quant.json, "
                   "hashes.json.");
  cal->add_option("--config", config_path, "experiment JSON config")->required();
  cal->add_option("--checkpoint", checkpoint_dir, "pretrain output directory")->required();
  cal->add_option("--out", out_path, "output directory")->required();

  auto* ev = app.add_subcommand(
      "eval", "Rank sweep over a calibrated checkpoint. --rank takes a comma list of "
              "integers, 'full' (= model dim) or 'dense' (stored dense transitions); "
              "omitted means dense.\nCSV schema: " + result_csv_header() + ".");
  ev->add_option("--checkpoint", checkpoint_dir, "calibrate output directory")->required();
  ev->add_option("--rank", rank_list, "comma-separated rank list");
  ev->add_option("--out", out_path, "output CSV")->required();

  auto* cmp = app.add_subcommand(
      "compare", "Full pipeline per scheme {rtn, gptq, global-hadamard, global-learned, "
                 "layerwise} at each compare_bits setting and per seed; one fp row per "
                 "seed.\nCSV schema: " + result_csv_header() + ".");
  cmp->add_option("--config", config_path, "experiment JSON config")->required();
  cmp->add_option("--out", out_path, "output CSV")->required();
  cmp->add_option("--work", work_dir, "scratch directory (default <out>.work)");

  auto* cost_cmd = app.add_subcommand(
      "cost", "Analytical per-token MAC / parameter table for one geometry (preset name "
              "or JSON file).\nCSV schema: " + cost_csv_header() + ".");
  cost_cmd->add_option("--geometry", geometry, "preset (llama2-7b, llama2-13b, llama3-8b, "
                       "llama3.2-1b, llama3.2-3b, toy) or JSON file")->required();
  cost_cmd->add_option("--rank", rank_flag, "subspace rank override");
  cost_cmd->add_option("--out", out_path, "output CSV")->required();

  auto* ana = app.add_subcommand(
      "analyze-rotations", "Deviation-from-init stats per rotation, diagonal dominance and "
                           "singular spectra per transition.\nOutputs: dev.csv "
                           "(kind,name,layer,frob_deviation,cosine,diag_dominance), "
                           "spectrum.csv (index + one column per transition), hashes.json.");
  ana->add_option("--checkpoint", checkpoint_dir, "calibrate output directory")->required();
  ana->add_option("--out", out_path, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*pre) {
      ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
      PretrainOutcome out = run_pretrain(cfg, out_path);
      std::printf("pretrained: eval ppl %.4f (target < %.1f)\n", out.eval_ppl,
                  0.8 * cfg.model.vocab);
    } else if (*cal) {
      ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
      run_calibrate(cfg, checkpoint_dir, out_path);
      std::printf("calibrated: %s -> %s\n", pipeline_scheme_name(cfg.scheme),
                  out_path.c_str());
    } else if (*ev) {
      std::vector<int> ranks;
      if (!rank_list.empty()) ranks = parse_ranks(rank_list, model_dim_of(checkpoint_dir));
      auto rows = run_eval(checkpoint_dir, ranks, out_path);
      for (const auto& r : rows)
        std::printf("rank %d: ppl_fp %.4f ppl_quant %.4f\n", r.rank, r.ppl_fp, r.ppl_quant);
    } else if (*cmp) {
      ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
      std::filesystem::path work = work_dir.empty() ? out_path + ".work" : work_dir;
      auto rows = run_compare(cfg, work, out_path);
      std::printf("compare: %zu rows -> %s\n", rows.size(), out_path.c_str());
    } else if (*cost_cmd) {
      run_cost(geometry_from_arg(geometry, rank_flag), out_path);
      std::printf("cost table -> %s\n", out_path.c_str());
    } else if (*ana) {
      run_analyze(checkpoint_dir, out_path);
      std::printf("analysis -> %s\n", out_path.c_str());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
