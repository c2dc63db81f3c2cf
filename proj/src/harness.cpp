#include "respin/harness.hpp"

#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace respin {

namespace fs = std::filesystem;
using nlohmann::json;

const char* pipeline_scheme_name(PipelineScheme s) {
  switch (s) {
    case PipelineScheme::Rtn: return "rtn";
    case PipelineScheme::Gptq: return "gptq";
    case PipelineScheme::GlobalHadamard: return "global-hadamard";
    case PipelineScheme::GlobalLearned: return "global-learned";
    case PipelineScheme::LayerWise: return "layerwise";
  }
  throw std::logic_error("pipeline_scheme_name");
}

PipelineScheme pipeline_scheme_from_name(const std::string& name) {
  for (PipelineScheme s : {PipelineScheme::Rtn, PipelineScheme::Gptq,
                           PipelineScheme::GlobalHadamard, PipelineScheme::GlobalLearned,
                           PipelineScheme::LayerWise})
    if (name == pipeline_scheme_name(s)) return s;
  throw ConfigError("unknown scheme: " + name +
                    " (expected rtn|gptq|global-hadamard|global-learned|layerwise)");
}

Scheme rotation_scheme(PipelineScheme s) {
  switch (s) {
    case PipelineScheme::Rtn:
    case PipelineScheme::Gptq: return Scheme::Identity;
    case PipelineScheme::GlobalHadamard: return Scheme::GlobalHadamard;
    case PipelineScheme::GlobalLearned: return Scheme::GlobalLearned;
    case PipelineScheme::LayerWise: return Scheme::LayerWise;
  }
  throw std::logic_error("rotation_scheme");
}

bool uses_gptq_weights(PipelineScheme s) { return s != PipelineScheme::Rtn; }

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

Granularity granularity_from_name(const std::string& g) {
  if (g == "per-tensor") return Granularity::PerTensor;
  if (g == "per-channel") return Granularity::PerChannel;
  if (g == "per-token") return Granularity::PerToken;
  throw ConfigError("unknown granularity: " + g);
}

const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per-tensor";
    case Granularity::PerChannel: return "per-channel";
    case Granularity::PerToken: return "per-token";
  }
  throw std::logic_error("granularity_name");
}

QuantSpec quant_spec_from_json(const json& j, const QuantSpec& defaults) {
  QuantSpec s = defaults;
  if (j.contains("bits")) s.bits = j.at("bits");
  if (j.contains("symmetric")) s.symmetric = j.at("symmetric");
  if (j.contains("granularity"))
    s.granularity = granularity_from_name(j.at("granularity"));
  if (j.contains("clip_ratio")) s.clip_ratio = j.at("clip_ratio");
  s.validate();
  return s;
}

json quant_spec_to_json(const QuantSpec& s) {
  return {{"bits", s.bits},
          {"symmetric", s.symmetric},
          {"granularity", granularity_name(s.granularity)},
          {"clip_ratio", s.clip_ratio}};
}

template <typename T>
void read_field(const json& j, const char* name, T& dst) {
  if (j.contains(name)) dst = j.at(name).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    if (!j.contains("version") || j.at("version").get<int>() != 1)
      throw ConfigError("config must declare \"version\": 1");

    ExperimentConfig cfg;
    if (j.contains("model")) {
      const json& m = j.at("model");
      read_field(m, "layers", cfg.model.layers);
      read_field(m, "dim", cfg.model.dim);
      read_field(m, "n_heads", cfg.model.n_heads);
      read_field(m, "d_ffn", cfg.model.d_ffn);
      read_field(m, "vocab", cfg.model.vocab);
      read_field(m, "ctx", cfg.model.ctx);
      read_field(m, "seed", cfg.model.seed);
    }
    cfg.model.validate();
    cfg.corpus.vocab = cfg.model.vocab;
    if (j.contains("corpus")) {
      const json& c = j.at("corpus");
      read_field(c, "seed", cfg.corpus.seed);
      read_field(c, "train_tokens", cfg.corpus.train_tokens);
      read_field(c, "eval_tokens", cfg.corpus.eval_tokens);
      read_field(c, "dirichlet_alpha", cfg.corpus.dirichlet_alpha);
      if (c.contains("vocab") && c.at("vocab").get<int>() != cfg.model.vocab)
        throw ConfigError("corpus.vocab must match model.vocab");
    }
    if (j.contains("pretrain")) {
      const json& p = j.at("pretrain");
      read_field(p, "steps", cfg.pretrain.steps);
      read_field(p, "lr", cfg.pretrain.lr);
      read_field(p, "momentum", cfg.pretrain.momentum);
      read_field(p, "batch", cfg.pretrain.batch);
      read_field(p, "seqlen", cfg.pretrain.seqlen);
      read_field(p, "seed", cfg.pretrain.seed);
    }
    if (j.contains("calib")) {
      const json& c = j.at("calib");
      read_field(c, "steps", cfg.calib.steps);
      read_field(c, "lr", cfg.calib.lr);
      read_field(c, "momentum", cfg.calib.momentum);
      read_field(c, "batch", cfg.calib.batch);
      read_field(c, "seqlen", cfg.calib.seqlen);
      read_field(c, "seed", cfg.calib.seed);
      read_field(c, "gptq_sequences", cfg.calib.gptq_sequences);
    }
    if (j.contains("quant")) {
      const json& q = j.at("quant");
      if (q.contains("w")) cfg.calib.w = quant_spec_from_json(q.at("w"), cfg.calib.w);
      if (q.contains("a")) cfg.calib.a = quant_spec_from_json(q.at("a"), cfg.calib.a);
      if (q.contains("kv")) cfg.calib.kv = quant_spec_from_json(q.at("kv"), cfg.calib.kv);
    }
    if (j.contains("scheme"))
      cfg.scheme = pipeline_scheme_from_name(j.at("scheme").get<std::string>());
    read_field(j, "rank", cfg.rank);
    if (j.contains("ranks")) cfg.ranks = j.at("ranks").get<std::vector<int>>();
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("compare_bits")) {
      cfg.compare_bits.clear();
      for (const auto& row : j.at("compare_bits")) {
        if (!row.is_array() || row.size() != 3)
          throw ConfigError("compare_bits entries must be [w, a, kv] triples");
        cfg.compare_bits.push_back({row[0].get<int>(), row[1].get<int>(), row[2].get<int>()});
      }
    }
    if (cfg.seeds.empty()) throw ConfigError("seeds must be nonempty");
    if (cfg.rank < 0 || cfg.rank > cfg.model.dim)
      throw ConfigError("rank must be in [0, dim]");

    if (const char* env = std::getenv("RESPIN_SEED")) {
      uint64_t s = std::strtoull(env, nullptr, 10);
      ExperimentConfig forced = cfg.with_experiment_seed(s);
      forced.seeds = {s};
      return forced;
    }
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::from_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open config file: " + p.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

ExperimentConfig ExperimentConfig::with_experiment_seed(uint64_t seed) const {
  ExperimentConfig out = *this;
  out.model.seed = seed;
  out.corpus.seed = seed + 1;
  out.pretrain.seed = seed + 2;
  out.calib.seed = seed + 3;
  return out;
}

PretrainOutcome run_pretrain(const ExperimentConfig& cfg, const fs::path& out_dir) {
  SyntheticCorpus corpus = make_corpus(cfg.corpus);
  ToyTransformer model = build_model(cfg.model);
  std::vector<PretrainLogRow> log;
  pretrain(model, corpus, cfg.pretrain, &log);

  fs::create_directories(out_dir);
  save_model(out_dir / "model", model, "pretrained");
  std::ostringstream csv;
  csv << "step,loss,lr\n";
  for (const auto& row : log)
    csv << row.step << ',' << fmt(row.loss) << ',' << fmt(row.lr) << '\n';
  write_file_atomic(out_dir / "pretrain_log.csv", csv.str());

  json meta = {{"config_version", 1},
               {"corpus", {{"vocab", cfg.corpus.vocab},
                           {"seed", cfg.corpus.seed},
                           {"train_tokens", cfg.corpus.train_tokens},
                           {"eval_tokens", cfg.corpus.eval_tokens},
                           {"dirichlet_alpha", cfg.corpus.dirichlet_alpha}}}};
  write_file_atomic(out_dir / "corpus.json", meta.dump(2) + "\n");

  double ppl = perplexity(model, corpus.eval, QuantMode::fp());
  write_hashes_sidecar(out_dir);
  return {ppl, out_dir / "model"};
}

namespace {

CorpusConfig corpus_from_meta(const fs::path& dir) {
  std::ifstream in(dir / "corpus.json");
  if (!in) throw ConfigError("missing corpus.json in " + dir.string());
  json j = json::parse(in);
  const json& c = j.at("corpus");
  CorpusConfig cc;
  cc.vocab = c.at("vocab");
  cc.seed = c.at("seed");
  cc.train_tokens = c.at("train_tokens");
  cc.eval_tokens = c.at("eval_tokens");
  cc.dirichlet_alpha = c.at("dirichlet_alpha");
  return cc;
}

std::string training_log_csv(const CalibResult& res) {
  std::ostringstream csv;
  csv << "step,loss,lr";
  for (const auto& name : res.rotation_names) csv << ",frob_" << name << ",cos_" << name;
  csv << '\n';
  for (const auto& row : res.log) {
    csv << row.step << ',' << fmt(row.loss) << ',' << fmt(row.lr);
    for (const auto& d : row.deviations) csv << ',' << fmt(d.frob) << ',' << fmt(d.cos);
    csv << '\n';
  }
  return csv.str();
}

}  // namespace

void run_calibrate(const ExperimentConfig& cfg, const fs::path& pretrained_dir,
                   const fs::path& out_dir) {
  ToyTransformer model = load_model(pretrained_dir / "model");
  CorpusConfig cc = corpus_from_meta(pretrained_dir);
  if (cc.vocab != model.cfg.vocab)
    throw ConfigError("corpus/model vocab mismatch in " + pretrained_dir.string());
  SyntheticCorpus corpus = make_corpus(cc);

  Scheme rscheme = rotation_scheme(cfg.scheme);
  RotationSet rots = init_rotations(model.cfg, rscheme, cfg.calib.seed);

  CalibResult calib;
  if (rscheme == Scheme::GlobalLearned || rscheme == Scheme::LayerWise) {
    calib = calibrate(model, std::move(rots), corpus, cfg.calib);
  } else {
    calib.rots = std::move(rots);  // Identity / GlobalHadamard short-circuit
  }

  fs::create_directories(out_dir);
  save_rotations(out_dir / "rotations", calib.rots, cfg.calib.seed);

  FusedModel fused = fuse(model, calib.rots);
  save_model(out_dir / "model_fp", fused.model, "fused, full-precision weights");

  ToyTransformer quantized = fused.model;
  std::ostringstream report;
  report << "site,clip_ratio,gptq_proxy_loss,rtn_proxy_loss\n";
  if (uses_gptq_weights(cfg.scheme)) {
    auto rows = quantize_weights_gptq(quantized, corpus, cfg.calib.w, cfg.calib.seed,
                                      cfg.calib.gptq_sequences);
    for (const auto& r : rows)
      report << r.site << ',' << fmt(r.clip_ratio) << ',' << fmt(r.gptq_loss) << ','
             << fmt(r.rtn_loss) << '\n';
  } else {
    rtn_quantize_weights(quantized, cfg.calib.w);
  }
  save_model(out_dir / "model_quant", quantized, "fused, quantized weights");

  write_file_atomic(out_dir / "training_log.csv", training_log_csv(calib));
  write_file_atomic(out_dir / "gptq_report.csv", report.str());
  if (!calib.warnings.empty()) {
    std::ostringstream w;
    for (const auto& s : calib.warnings) w << s << '\n';
    write_file_atomic(out_dir / "warnings.log", w.str());
  }

  json meta = {{"config_version", 1},
               {"scheme", pipeline_scheme_name(cfg.scheme)},
               {"rank", cfg.rank},
               {"experiment_seed", cfg.model.seed},
               {"w", quant_spec_to_json(cfg.calib.w)},
               {"a", quant_spec_to_json(cfg.calib.a)},
               {"kv", quant_spec_to_json(cfg.calib.kv)},
               {"corpus", {{"vocab", cc.vocab},
                           {"seed", cc.seed},
                           {"train_tokens", cc.train_tokens},
                           {"eval_tokens", cc.eval_tokens},
                           {"dirichlet_alpha", cc.dirichlet_alpha}}}};
  write_file_atomic(out_dir / "quant.json", meta.dump(2) + "\n");
  write_hashes_sidecar(out_dir);
}

std::string result_csv_header() {
  return "scheme,w_bits,a_bits,kv_bits,rank,seed,ppl_fp,ppl_quant,t_dev_mean,t_dev_max,"
         "online_extra_macs,trainable_params,online_params";
}

std::string result_csv_row(const ResultRow& r) {
  std::ostringstream os;
  os << r.scheme << ',' << r.w_bits << ',' << r.a_bits << ',' << r.kv_bits << ','
     << r.rank << ',' << r.seed << ',' << fmt(r.ppl_fp) << ',' << fmt(r.ppl_quant) << ','
     << fmt(r.t_dev_mean) << ',' << fmt(r.t_dev_max) << ',' << r.online_extra_macs << ','
     << r.trainable_params << ',' << r.online_params;
  return os.str();
}

namespace {

struct LoadedExperiment {
  ToyTransformer model_fp;
  ToyTransformer model_quant;
  RotationSet rots;
  PipelineScheme scheme;
  int default_rank;
  uint64_t seed;
  QuantSpec a, kv, w;
  SyntheticCorpus corpus;
};

LoadedExperiment load_experiment(const fs::path& calib_dir) {
  std::ifstream in(calib_dir / "quant.json");
  if (!in) throw ConfigError("missing quant.json in " + calib_dir.string());
  json j = json::parse(in);

  LoadedExperiment e;
  e.model_fp = load_model(calib_dir / "model_fp");
  e.model_quant = load_model(calib_dir / "model_quant");
  e.rots = load_rotations(calib_dir / "rotations").rots;
  e.scheme = pipeline_scheme_from_name(j.at("scheme"));
  e.default_rank = j.at("rank");
  e.seed = j.at("experiment_seed");
  QuantSpec wd{4, true, Granularity::PerChannel, 1.0};
  QuantSpec ad{4, false, Granularity::PerToken, 1.0};
  e.w = quant_spec_from_json(j.at("w"), wd);
  e.a = quant_spec_from_json(j.at("a"), ad);
  e.kv = quant_spec_from_json(j.at("kv"), ad);

  CorpusConfig cc;
  const json& c = j.at("corpus");
  cc.vocab = c.at("vocab");
  cc.seed = c.at("seed");
  cc.train_tokens = c.at("train_tokens");
  cc.eval_tokens = c.at("eval_tokens");
  cc.dirichlet_alpha = c.at("dirichlet_alpha");
  e.corpus = make_corpus(cc);
  return e;
}

// Swaps the residual handles of a loaded layer-wise model for the given
// rank: -1 keeps the stored dense transitions, 0 is the exact skip path,
// otherwise a rank-r subspace approximation built from each dense T.
void set_rank_handles(ToyTransformer& model, const std::vector<Matrix>& t_attn,
                      const std::vector<Matrix>& t_ffn, int rank) {
  for (size_t i = 0; i < model.layers.size(); ++i) {
    auto make = [&](const Matrix& t) -> ResidualHandle {
      if (rank < 0) return {ResidualKind::Dense, t, {}};
      if (rank == 0) return {ResidualKind::Skip, {}, {}};
      TransitionApprox a = subspace_build(OrthogonalMatrix(t), rank);
      return {ResidualKind::Subspace, {}, std::move(a)};
    };
    model.layers[i].t_attn = make(t_attn[i]);
    model.layers[i].t_ffn = make(t_ffn[i]);
  }
}

ResultRow eval_one(LoadedExperiment& e, int rank) {
  const ModelConfig& cfg = e.model_fp.cfg;
  ResultRow row;
  row.scheme = pipeline_scheme_name(e.scheme);
  row.w_bits = e.w.bits;
  row.a_bits = e.a.bits;
  row.kv_bits = e.kv.bits;
  row.rank = rank;
  row.seed = e.seed;

  std::vector<Matrix> t_attn, t_ffn;
  double dev_sum = 0.0, dev_max = 0.0;
  if (e.rots.scheme == Scheme::LayerWise) {
    for (int i = 0; i < cfg.layers; ++i) {
      t_attn.push_back(transition(e.rots.R1(i), e.rots.R2(i)).matrix());
      t_ffn.push_back(i + 1 < cfg.layers
                          ? transition(e.rots.R2(i), e.rots.R1(i + 1)).matrix()
                          : Matrix::Identity(cfg.dim, cfg.dim));
      for (const Matrix* t : {&t_attn.back(), &t_ffn.back()}) {
        double d = (*t - Matrix::Identity(cfg.dim, cfg.dim)).norm();
        dev_sum += d;
        dev_max = std::max(dev_max, d);
      }
    }
    set_rank_handles(e.model_fp, t_attn, t_ffn, -1);  // fp reference stays dense
    set_rank_handles(e.model_quant, t_attn, t_ffn, rank);
    row.t_dev_mean = dev_sum / (2.0 * cfg.layers);
    row.t_dev_max = dev_max;
  } else {
    row.t_dev_mean = 0.0;
    row.t_dev_max = 0.0;
  }

  row.ppl_fp = perplexity(e.model_fp, e.corpus.eval, QuantMode::fp());
  QuantMode qm;
  qm.a = e.a;
  qm.kv = e.kv;
  qm.weights_prequantized = true;
  row.ppl_quant = perplexity(e.model_quant, e.corpus.eval, qm);

  GeometrySpec geom;
  geom.name = "model";
  geom.layers = cfg.layers;
  geom.dim = cfg.dim;
  geom.d_ffn = cfg.d_ffn;
  geom.n_heads = cfg.n_heads;
  geom.d_head = cfg.d_head();
  geom.vocab = cfg.vocab;
  geom.rank = std::max(rank, 0);
  ResidualCost rc = e.rots.scheme != Scheme::LayerWise ? ResidualCost::None
                    : rank < 0                         ? ResidualCost::Dense
                                                       : ResidualCost::Subspace;
  CostReport cr = cost(geom, e.rots.scheme, rc);
  row.online_extra_macs = cr.online_extra_macs;
  row.trainable_params = cr.trainable_params;
  row.online_params = cr.online_params;
  return row;
}

void write_result_csv(const fs::path& out_csv, const std::vector<ResultRow>& rows) {
  std::ostringstream csv;
  csv << result_csv_header() << '\n';
  for (const auto& r : rows) csv << result_csv_row(r) << '\n';
  write_file_atomic(out_csv, csv.str());
  write_file_atomic(fs::path(out_csv.string() + ".sha256"),
                    sha256_file(out_csv) + "\n");
}

}  // namespace

std::vector<ResultRow> run_eval(const fs::path& calib_dir, const std::vector<int>& ranks,
                                const fs::path& out_csv) {
  LoadedExperiment e = load_experiment(calib_dir);
  std::vector<int> effective = ranks;
  if (effective.empty()) effective = {-1};
  for (int r : effective)
    if (r > e.model_fp.cfg.dim)
      throw ConfigError("rank " + std::to_string(r) + " exceeds model dim");

  std::vector<ResultRow> rows;
  for (int r : effective) rows.push_back(eval_one(e, r));
  if (!out_csv.empty()) write_result_csv(out_csv, rows);
  return rows;
}

std::vector<ResultRow> run_compare(const ExperimentConfig& cfg, const fs::path& work_dir,
                                   const fs::path& out_csv) {
  std::vector<ResultRow> rows;
  for (uint64_t seed : cfg.seeds) {
    ExperimentConfig sub = cfg.with_experiment_seed(seed);
    fs::path seed_dir = work_dir / ("seed_" + std::to_string(seed));
    auto t0 = std::chrono::steady_clock::now();
    PretrainOutcome pre = run_pretrain(sub, seed_dir / "pretrained");
    std::chrono::duration<double> pre_dt = std::chrono::steady_clock::now() - t0;
    std::fprintf(stderr, "[compare] seed %llu: pretrain eval ppl %.3f (%.1fs)\n",
                 static_cast<unsigned long long>(seed), pre.eval_ppl, pre_dt.count());

    ResultRow fp_row{};
    fp_row.scheme = "fp";
    fp_row.w_bits = fp_row.a_bits = fp_row.kv_bits = 64;
    fp_row.rank = 0;
    fp_row.seed = seed;
    fp_row.ppl_fp = pre.eval_ppl;
    fp_row.ppl_quant = pre.eval_ppl;
    rows.push_back(fp_row);

    for (const auto& bits : cfg.compare_bits) {
      for (PipelineScheme s : {PipelineScheme::Rtn, PipelineScheme::Gptq,
                               PipelineScheme::GlobalHadamard, PipelineScheme::GlobalLearned,
                               PipelineScheme::LayerWise}) {
        ExperimentConfig run = sub;
        run.scheme = s;
        run.calib.w.bits = bits[0];
        run.calib.a.bits = bits[1];
        run.calib.kv.bits = bits[2];
        fs::path out = seed_dir / ("w" + std::to_string(bits[0]) + "a" +
                                   std::to_string(bits[1]) + "kv" + std::to_string(bits[2])) /
                       pipeline_scheme_name(s);
        auto t1 = std::chrono::steady_clock::now();
        run_calibrate(run, seed_dir / "pretrained", out);
        std::vector<int> ranks = {s == PipelineScheme::LayerWise ? cfg.rank : 0};
        auto sub_rows = run_eval(out, ranks, out / "results.csv");
        std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t1;
        std::fprintf(stderr, "[compare] seed %llu %s W%dA%dKV%d: quant ppl %.3f (%.1fs)\n",
                     static_cast<unsigned long long>(seed), pipeline_scheme_name(s),
                     bits[0], bits[1], bits[2], sub_rows.front().ppl_quant, dt.count());
        rows.insert(rows.end(), sub_rows.begin(), sub_rows.end());
      }
    }
  }
  if (!out_csv.empty()) write_result_csv(out_csv, rows);
  return rows;
}

void run_cost(const GeometrySpec& geom, const fs::path& out_csv) {
  std::ostringstream csv;
  csv << cost_csv_header() << '\n';
  for (const auto& row : cost_table({geom})) csv << cost_csv_row(row) << '\n';
  write_file_atomic(out_csv, csv.str());
  write_file_atomic(fs::path(out_csv.string() + ".sha256"), sha256_file(out_csv) + "\n");
}

void run_analyze(const fs::path& calib_dir, const fs::path& out_dir) {
  LoadedRotations loaded = load_rotations(calib_dir / "rotations");
  ToyTransformer model_fp = load_model(calib_dir / "model_fp");
  RotationSet init = init_rotations(model_fp.cfg, loaded.rots.scheme, loaded.init_seed);
  const RotationSet& rots = loaded.rots;
  const int d = rots.dim;

  std::ostringstream dev;
  dev << "kind,name,layer,frob_deviation,cosine,diag_dominance\n";
  auto rot_row = [&](const std::string& name, int layer, const OrthogonalMatrix& r,
                     const OrthogonalMatrix& r0) {
    DeviationStats s = deviation_stats(r, r0);
    dev << "rotation," << name << ',' << layer << ',' << fmt(s.frob) << ',' << fmt(s.cos)
        << ",\n";
  };
  if (rots.global()) {
    rot_row("R", -1, rots.r1[0], init.r1[0]);
    rot_row("R3", -1, rots.r3[0], init.r3[0]);
  } else {
    for (int i = 0; i < rots.layers; ++i) {
      rot_row("R1." + std::to_string(i), i, rots.r1[i], init.r1[i]);
      rot_row("R2." + std::to_string(i), i, rots.r2[i], init.r2[i]);
      rot_row("R3." + std::to_string(i), i, rots.r3[i], init.r3[i]);
    }
  }

  std::vector<std::pair<std::string, Matrix>> transitions;
  for (int i = 0; i < rots.layers; ++i) {
    transitions.emplace_back("t_attn." + std::to_string(i),
                             transition(rots.R1(i), rots.R2(i)).matrix());
    transitions.emplace_back("t_ffn." + std::to_string(i),
                             i + 1 < rots.layers
                                 ? transition(rots.R2(i), rots.R1(i + 1)).matrix()
                                 : Matrix::Identity(d, d));
  }
  std::vector<Vector> spectra;
  for (size_t k = 0; k < transitions.size(); ++k) {
    const auto& [name, t] = transitions[k];
    int layer = static_cast<int>(k / 2);
    DeviationStats s = deviation_stats(OrthogonalMatrix(t), OrthogonalMatrix::identity(d));
    double diag_mean = t.diagonal().cwiseAbs().mean();
    double off_sum = t.cwiseAbs().sum() - t.diagonal().cwiseAbs().sum();
    double off_mean = off_sum / (static_cast<double>(d) * d - d);
    dev << "transition," << name << ',' << layer << ',' << fmt(s.frob) << ',' << fmt(s.cos)
        << ',' << (off_mean == 0.0 ? "inf" : fmt(diag_mean / off_mean)) << '\n';

    TransitionApprox a = subspace_build(OrthogonalMatrix(t), 0);
    spectra.push_back(a.singular_values);
  }

  std::ostringstream spec;
  spec << "index";
  for (const auto& [name, t] : transitions) spec << ',' << name;
  spec << '\n';
  for (int i = 0; i < d; ++i) {
    spec << i;
    for (const auto& sv : spectra) spec << ',' << fmt(sv(i));
    spec << '\n';
  }

  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "dev.csv", dev.str());
  write_file_atomic(out_dir / "spectrum.csv", spec.str());
  write_hashes_sidecar(out_dir);
}

}  // namespace respin
