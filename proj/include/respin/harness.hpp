#pragma once

// Experiment orchestration behind the CLI: pretrain, calibrate (+GPTQ),
// rank-sweep eval, scheme comparison, cost tables and rotation analysis.
// Every command is deterministic given config + seeds; output files are
// written atomically and a hashes.json sidecar records their sha256.

#include "respin/checkpoint.hpp"
#include "respin/costmodel.hpp"

namespace respin {

// Pipeline scheme = rotation scheme + weight quantizer. rtn / gptq run the
// unrotated model; every rotated scheme uses GPTQ for weights.
enum class PipelineScheme { Rtn, Gptq, GlobalHadamard, GlobalLearned, LayerWise };

const char* pipeline_scheme_name(PipelineScheme s);
PipelineScheme pipeline_scheme_from_name(const std::string& name);
Scheme rotation_scheme(PipelineScheme s);
bool uses_gptq_weights(PipelineScheme s);

struct ExperimentConfig {
  ModelConfig model;
  CorpusConfig corpus;
  PretrainConfig pretrain;
  CalibConfig calib;  // quant specs ride along (w / a / kv)
  PipelineScheme scheme = PipelineScheme::LayerWise;
  int rank = 32;                     // subspace rank for layerwise eval
  std::vector<int> ranks;            // optional sweep for `eval`
  std::vector<uint64_t> seeds{1};    // experiment seeds for `compare`
  std::vector<std::array<int, 3>> compare_bits{{4, 4, 4}, {3, 3, 3}};

  // Parses the versioned JSON config; unknown/missing fields throw
  // ConfigError. RESPIN_SEED (env) overrides every seed when set.
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::filesystem::path& p);

  // Derives the per-seed sub-seeds used by `compare`.
  ExperimentConfig with_experiment_seed(uint64_t seed) const;
};

struct PretrainOutcome {
  double eval_ppl;
  std::filesystem::path model_dir;
};

// Writes <out>/model/ plus pretrain_log.csv and the hashes sidecar.
PretrainOutcome run_pretrain(const ExperimentConfig& cfg,
                             const std::filesystem::path& out_dir);

// Reads the pretrained checkpoint, trains rotations when the scheme has
// learnable ones, fuses, quantizes weights. Writes <out>/rotations/,
// <out>/model_fp/, <out>/model_quant/, training_log.csv, gptq_report.csv,
// quant.json and the hashes sidecar.
void run_calibrate(const ExperimentConfig& cfg, const std::filesystem::path& pretrained_dir,
                   const std::filesystem::path& out_dir);

struct ResultRow {
  std::string scheme;
  int w_bits, a_bits, kv_bits;
  int rank;  // -1 = dense stored transitions
  uint64_t seed;
  double ppl_fp;
  double ppl_quant;
  double t_dev_mean;  // ||T - I||_F over transitions
  double t_dev_max;
  int64_t online_extra_macs;
  int64_t trainable_params;
  int64_t online_params;
};

std::string result_csv_header();
std::string result_csv_row(const ResultRow& r);

// Rank sweep over a calibrated checkpoint; rank -1 means dense. Writes the
// ResultRow CSV to out_csv.
std::vector<ResultRow> run_eval(const std::filesystem::path& calib_dir,
                                const std::vector<int>& ranks,
                                const std::filesystem::path& out_csv);

// Full comparison: per experiment seed, pretrain once, then run every
// pipeline scheme at each compare_bits setting; emits one fp row per seed
// plus one row per (scheme, bits). work_dir holds the intermediate
// checkpoints.
std::vector<ResultRow> run_compare(const ExperimentConfig& cfg,
                                   const std::filesystem::path& work_dir,
                                   const std::filesystem::path& out_csv);

void run_cost(const GeometrySpec& geom, const std::filesystem::path& out_csv);

// Per-rotation deviations from init, transition diagonal dominance and the
// singular-value spectrum of every Delta T. Writes dev.csv and
// spectrum.csv under out_dir.
void run_analyze(const std::filesystem::path& calib_dir,
                 const std::filesystem::path& out_dir);

}  // namespace respin
