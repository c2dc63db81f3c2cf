#include "respin/calibrate.hpp"

#include <cmath>
#include <map>

namespace respin {

namespace {

struct LearnableRef {
  std::string name;
  OrthogonalMatrix* rot;
  int kind;   // 0 = r1, 1 = r2, 2 = r3
  int index;  // storage index
};

std::vector<LearnableRef> learnable_rotations(RotationSet& rots) {
  std::vector<LearnableRef> out;
  switch (rots.scheme) {
    case Scheme::Identity:
    case Scheme::GlobalHadamard:
      break;  // nothing to train
    case Scheme::GlobalLearned:
      out.push_back({"R", &rots.r1[0], 0, 0});
      out.push_back({"R3", &rots.r3[0], 2, 0});
      break;
    case Scheme::LayerWise:
      for (int i = 0; i < rots.layers; ++i) {
        out.push_back({"R1." + std::to_string(i), &rots.r1[i], 0, i});
        out.push_back({"R2." + std::to_string(i), &rots.r2[i], 1, i});
        out.push_back({"R3." + std::to_string(i), &rots.r3[i], 2, i});
      }
      break;
  }
  return out;
}

// Sums the head-diagonal blocks of a full-width gradient into one
// d_head x d_head matrix (R3 is shared across heads).
Matrix reduce_head_blocks(const Matrix& full, int n_heads, int d_head) {
  Matrix out = Matrix::Zero(d_head, d_head);
  for (int h = 0; h < n_heads; ++h) out += full.block(h * d_head, h * d_head, d_head, d_head);
  return out;
}

}  // namespace

RotationGrads chain_rotation_grads(const ToyTransformer& model, const RotationSet& rots,
                                   const ModelGrads& grads) {
  const ModelConfig& cfg = model.cfg;
  const int dh = cfg.d_head();
  RotationGrads rg;
  auto zeros = [&](int n, int d) {
    std::vector<Matrix> v;
    for (int i = 0; i < n; ++i) v.push_back(Matrix::Zero(d, d));
    return v;
  };
  if (rots.global()) {
    rg.r1 = zeros(1, cfg.dim);
    rg.r3 = zeros(1, dh);
  } else {
    rg.r1 = zeros(cfg.layers, cfg.dim);
    rg.r2 = zeros(cfg.layers, cfg.dim);
    rg.r3 = zeros(cfg.layers, dh);
  }
  auto d_r1 = [&](int i) -> Matrix& { return rots.global() ? rg.r1[0] : rg.r1[i]; };
  auto d_r2 = [&](int i) -> Matrix& { return rots.global() ? rg.r1[0] : rg.r2[i]; };
  auto d_r3 = [&](int i) -> Matrix& { return rots.global() ? rg.r3[0] : rg.r3[i]; };

  const Matrix h_head_blk =
      rots.online_fht ? block_diag_heads(hadamard(dh).matrix(), cfg.n_heads) : Matrix();
  const Matrix h_ffn = rots.online_fht ? hadamard(cfg.d_ffn).matrix() : Matrix();

  for (int i = 0; i < cfg.layers; ++i) {
    const LayerWeights& l = model.layers[i];
    const LayerGrads& lg = grads.layers[i];
    const Matrix& a = rots.R1(i).matrix();
    const Matrix& b = rots.R2(i).matrix();
    const Matrix c_blk = block_diag_heads(rots.R3(i).matrix(), cfg.n_heads);
    const bool last = i + 1 == cfg.layers;
    const Matrix& next = last ? rots.final_basis().matrix() : rots.R1(i + 1).matrix();
    auto d_next = [&](int li) -> Matrix& { return last ? d_r2(li) : d_r1(li + 1); };

    Matrix kq = l.w_q * l.norm1_gain.asDiagonal();
    Matrix kk = l.w_k * l.norm1_gain.asDiagonal();
    Matrix kv = l.w_v * l.norm1_gain.asDiagonal();

    d_r1(i) += lg.w_q.transpose() * kq;             // W~q = Kq A^T
    d_r1(i) += lg.w_k.transpose() * kk;             // W~k = Kk A^T
    d_r1(i) += lg.w_v.transpose() * (c_blk * kv);   // W~v = C Kv A^T
    d_r3(i) += reduce_head_blocks(lg.w_v * a * kv.transpose(), cfg.n_heads, dh);

    // W~o = B Ko M^T with M = (H5) C.
    Matrix m_in = rots.online_fht ? (h_head_blk * c_blk).eval() : c_blk;
    d_r2(i) += lg.w_o * m_in * l.w_o.transpose();
    Matrix dm = lg.w_o.transpose() * b * l.w_o;
    d_r3(i) += reduce_head_blocks(rots.online_fht ? (h_head_blk * dm).eval() : dm,
                                  cfg.n_heads, dh);

    Matrix kgate = l.w_gate * l.norm2_gain.asDiagonal();
    Matrix kup = l.w_up * l.norm2_gain.asDiagonal();
    d_r2(i) += lg.w_gate.transpose() * kgate;       // W~gate = Kg B^T
    d_r2(i) += lg.w_up.transpose() * kup;

    // W~down = N Wdown (H4)^T.
    if (rots.online_fht)
      d_next(i) += lg.w_down * h_ffn * l.w_down.transpose();
    else
      d_next(i) += lg.w_down * l.w_down.transpose();

    if (lg.t_attn.size()) {  // T = B A^T
      d_r2(i) += lg.t_attn * a;
      d_r1(i) += lg.t_attn.transpose() * b;
    }
    if (lg.t_ffn.size() && !last) {  // T = N B^T; the last one is constant I
      d_next(i) += lg.t_ffn * b;
      d_r2(i) += lg.t_ffn.transpose() * next;
    }
  }

  // Embedding and position tables absorb R1 of layer 0.
  d_r1(0) += grads.embed.transpose() * model.embed;
  d_r1(0) += grads.pos.transpose() * model.pos;

  // The unembedding absorbs the final basis (R2 of the last layer).
  Matrix u_f = model.unembed * model.final_gain.asDiagonal();
  d_r2(cfg.layers - 1) += grads.unembed.transpose() * u_f;

  return rg;
}

namespace {

Matrix grad_for(const RotationGrads& rg, const LearnableRef& ref) {
  switch (ref.kind) {
    case 0: return rg.r1[ref.index];
    case 1: return rg.r2[ref.index];
    case 2: return rg.r3[ref.index];
  }
  throw std::logic_error("grad_for: bad kind");
}

struct Batch {
  std::vector<size_t> offsets;
};

Batch sample_batch(Rng& rng, const SyntheticCorpus& corpus, int batch, int seqlen) {
  if (corpus.train.size() <= static_cast<size_t>(seqlen) + 1)
    throw ConfigError("calibrate: train split shorter than one sequence");
  Batch b;
  for (int i = 0; i < batch; ++i)
    b.offsets.push_back(rng.uniform_int(corpus.train.size() - seqlen - 1));
  return b;
}

double batch_loss(const ToyTransformer& model, const SyntheticCorpus& corpus,
                  const Batch& batch, int seqlen, const ForwardOptions& opts,
                  ModelGrads* grads) {
  double loss = 0.0;
  for (size_t off : batch.offsets) {
    std::span<const int> seq(corpus.train.data() + off, seqlen + 1);
    loss += sequence_loss(model, seq, opts, grads);
  }
  return loss / static_cast<double>(batch.offsets.size());
}

}  // namespace

CalibResult calibrate(const ToyTransformer& pretrained, RotationSet rots,
                      const SyntheticCorpus& corpus, const CalibConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("calibrate: steps must be >= 1");
  CalibResult result;
  std::vector<LearnableRef> learnable = learnable_rotations(rots);
  for (const auto& ref : learnable) result.rotation_names.push_back(ref.name);
  if (learnable.empty()) {
    result.rots = std::move(rots);
    return result;
  }

  const RotationSet init = rots;
  const double lr = cfg.resolved_lr(rots.scheme);
  ForwardOptions opts;
  opts.mode.w = cfg.w;
  opts.mode.a = cfg.a;
  opts.mode.kv = cfg.kv;

  std::vector<Matrix> momentum(learnable.size());
  for (size_t j = 0; j < learnable.size(); ++j) {
    int d = learnable[j].rot->dim();
    momentum[j] = Matrix::Zero(d, d);
  }

  auto deviations = [&](const RotationSet& cur) {
    std::vector<DeviationStats> dev;
    RotationSet tmp = cur;  // learnable_rotations needs mutable access
    auto cur_refs = learnable_rotations(tmp);
    for (size_t j = 0; j < cur_refs.size(); ++j) {
      const OrthogonalMatrix& r0 = [&]() -> const OrthogonalMatrix& {
        switch (cur_refs[j].kind) {
          case 0: return init.r1[cur_refs[j].index];
          case 1: return init.r2[cur_refs[j].index];
          default: return init.r3[cur_refs[j].index];
        }
      }();
      dev.push_back(deviation_stats(*cur_refs[j].rot, r0));
    }
    return dev;
  };

  Rng rng(cfg.seed);
  Batch first_batch;
  for (int step = 0; step < cfg.steps; ++step) {
    double alpha = lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                              static_cast<double>(cfg.steps)));
    Batch batch = sample_batch(rng, corpus, cfg.batch, cfg.seqlen);
    if (step == 0) first_batch = batch;

    FusedModel fm = fuse(pretrained, rots);
    ModelGrads grads = ModelGrads::zero_like(fm.model);
    double loss = batch_loss(fm.model, corpus, batch, cfg.seqlen, opts, &grads);
    if (!std::isfinite(loss))
      throw NumericalError("calibrate: non-finite loss at step " + std::to_string(step));
    grads.scale(1.0 / cfg.batch);

    RotationGrads rg = chain_rotation_grads(pretrained, rots, grads);
    for (size_t j = 0; j < learnable.size(); ++j) {
      LearnableRef& ref = learnable[j];
      SkewMatrix w = riemannian_grad(*ref.rot, grad_for(rg, ref));
      momentum[j] = cfg.momentum * momentum[j] + w.matrix();
      // Descent: retract along the negative momentum direction.
      Matrix stepped = cayley_apply(ref.rot->matrix(), momentum[j], -alpha);
      double defect = OrthogonalMatrix::ortho_defect(stepped);
      if (defect > 1e-8 * ref.rot->dim()) {
        stepped = polar_orthogonal(stepped).matrix();
        result.warnings.push_back("step " + std::to_string(step) + ": re-orthogonalized " +
                                  ref.name + " (defect " + std::to_string(defect) + ")");
      }
      *ref.rot = OrthogonalMatrix(std::move(stepped));
    }
    result.log.push_back({step, loss, alpha, deviations(rots)});
  }

  // Final comparable row: the step-0 batch under the final rotations.
  FusedModel fm = fuse(pretrained, rots);
  double final_loss = batch_loss(fm.model, corpus, first_batch, cfg.seqlen, opts, nullptr);
  result.log.push_back({cfg.steps, final_loss, 0.0, deviations(rots)});

  result.rots = std::move(rots);
  return result;
}

namespace {

struct SiteGram {
  Matrix gram;
  int64_t n = 0;
};

CalibHessian hessian_from_gram(const SiteGram& sg, double damping) {
  Matrix h = (2.0 / static_cast<double>(sg.n)) * sg.gram;
  h = 0.5 * (h + h.transpose()).eval();
  h.diagonal().array() += damping * h.diagonal().mean();
  return CalibHessian{static_cast<int>(h.rows()), std::move(h)};
}

}  // namespace

std::vector<GptqSiteReport> quantize_weights_gptq(ToyTransformer& model,
                                                  const SyntheticCorpus& corpus,
                                                  const QuantSpec& w_spec,
                                                  uint64_t seed, int n_sequences) {
  if (!w_spec.symmetric || w_spec.granularity != Granularity::PerChannel)
    throw ConfigError("quantize_weights_gptq: weight spec must be per-channel symmetric");

  std::map<std::string, SiteGram> grams;
  SiteRecorder rec;
  rec.on_site = [&](const std::string& site, const Matrix& x) {
    SiteGram& sg = grams[site];
    if (sg.n == 0) sg.gram = Matrix::Zero(x.cols(), x.cols());
    sg.gram += x.transpose() * x;
    sg.n += x.rows();
  };
  ForwardOptions opts;  // fp activations, standard GPTQ protocol
  opts.recorder = &rec;

  Rng rng(seed);
  const int seqlen = model.cfg.ctx;
  for (int s = 0; s < n_sequences; ++s) {
    size_t off = rng.uniform_int(corpus.train.size() - seqlen - 1);
    std::vector<int> toks(corpus.train.begin() + off, corpus.train.begin() + off + seqlen);
    forward_logits(model, toks, opts);
  }

  std::vector<GptqSiteReport> reports;
  auto apply = [&](Matrix& w, const std::string& gram_site, const std::string& name) {
    CalibHessian h = hessian_from_gram(grams.at(gram_site), 0.01);
    QuantSpec spec = w_spec;
    spec.clip_ratio = clip_search(w, w_spec.bits);
    QuantizedTensor qt = gptq_quantize(w, h, spec);
    Matrix what = qt.dequantize();
    Matrix rtn = quantize(w, spec).dequantize();
    reports.push_back({name, spec.clip_ratio, proxy_loss(w, what, h), proxy_loss(w, rtn, h)});
    w = std::move(what);
  };

  for (int i = 0; i < model.cfg.layers; ++i) {
    const std::string s = "." + std::to_string(i);
    LayerWeights& l = model.layers[i];
    apply(l.w_q, "attn_in" + s, "w_q" + s);
    apply(l.w_k, "attn_in" + s, "w_k" + s);
    apply(l.w_v, "attn_in" + s, "w_v" + s);
    apply(l.w_o, "o_in" + s, "w_o" + s);
    apply(l.w_gate, "ffn_in" + s, "w_gate" + s);
    apply(l.w_up, "ffn_in" + s, "w_up" + s);
    apply(l.w_down, "down_in" + s, "w_down" + s);
  }
  return reports;
}

void rtn_quantize_weights(ToyTransformer& model, const QuantSpec& w_spec) {
  if (!w_spec.symmetric || w_spec.granularity != Granularity::PerChannel)
    throw ConfigError("rtn_quantize_weights: weight spec must be per-channel symmetric");
  auto apply = [&](Matrix& w) {
    QuantSpec spec = w_spec;
    spec.clip_ratio = clip_search(w, w_spec.bits);
    w = quantize(w, spec).dequantize();
  };
  for (auto& l : model.layers) {
    apply(l.w_q);
    apply(l.w_k);
    apply(l.w_v);
    apply(l.w_o);
    apply(l.w_gate);
    apply(l.w_up);
    apply(l.w_down);
  }
}

std::vector<GradCheckRow> grad_check(const ToyTransformer& model, const RotationSet& rots,
                                     const SyntheticCorpus& corpus, uint64_t seed) {
  RotationSet work = rots;
  std::vector<LearnableRef> learnable = learnable_rotations(work);
  std::vector<GradCheckRow> rows;
  if (learnable.empty()) return rows;

  const int seqlen = std::min(model.cfg.ctx, 12);
  std::vector<int> toks(corpus.train.begin(), corpus.train.begin() + seqlen + 1);
  ForwardOptions opts;  // fp only: the STE sites are excluded by contract

  FusedModel fm = fuse(model, work);
  ModelGrads grads = ModelGrads::zero_like(fm.model);
  sequence_loss(fm.model, toks, opts, &grads);
  RotationGrads rg = chain_rotation_grads(model, work, grads);

  Rng rng(seed);
  const double h = 1e-5;
  for (const auto& ref : learnable) {
    int d = ref.rot->dim();
    Matrix g = rng.gaussian_matrix(d, d);
    Matrix omega = g - g.transpose();
    omega /= omega.norm();

    double analytic = grad_for(rg, ref).cwiseProduct(omega * ref.rot->matrix()).sum();

    OrthogonalMatrix saved = *ref.rot;
    auto loss_at = [&](double step) {
      *ref.rot = cayley_retract(saved, SkewMatrix(omega), step);
      FusedModel f = fuse(model, work);
      return sequence_loss(f.model, toks, opts, nullptr);
    };
    double fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
    *ref.rot = saved;

    // The fp loss is exactly rotation-invariant (fusion is a
    // re-parameterization), so both sides sit at zero up to round-off /
    // finite-difference noise; the unit floor keeps the metric meaningful
    // there while any inconsistent chain term would surface as an O(1)
    // phantom gradient.
    double rel = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1.0});
    rows.push_back({ref.name, analytic, fd, rel});
  }
  return rows;
}

}  // namespace respin
