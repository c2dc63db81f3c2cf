#include "respin/toymodel.hpp"

#include <cmath>

namespace respin {

void ModelConfig::validate() const {
  if (layers < 0) throw ConfigError("ModelConfig: layers must be >= 0");
  if (n_heads < 1 || dim % n_heads != 0)
    throw ConfigError("ModelConfig: dim must be divisible by n_heads");
  if (!is_power_of_two(dim) || !is_power_of_two(d_head()) || !is_power_of_two(d_ffn))
    throw ConfigError("ModelConfig: dim, d_head and d_ffn must be powers of two");
  if (vocab < 2) throw ConfigError("ModelConfig: vocab must be >= 2");
  if (ctx < 2) throw ConfigError("ModelConfig: ctx must be >= 2");
}

Matrix ResidualHandle::apply(const Matrix& x) const {
  switch (kind) {
    case ResidualKind::Skip:
      return x;
    case ResidualKind::Dense:
      return x * dense.transpose();
    case ResidualKind::Subspace:
      return subspace_apply(approx, x);
  }
  throw std::logic_error("ResidualHandle: bad kind");
}

bool ToyTransformer::all_finite() const {
  bool ok = embed.allFinite() && pos.allFinite() && final_gain.allFinite() &&
            unembed.allFinite();
  for (const auto& l : layers)
    ok = ok && l.norm1_gain.allFinite() && l.norm2_gain.allFinite() &&
         l.w_q.allFinite() && l.w_k.allFinite() && l.w_v.allFinite() &&
         l.w_o.allFinite() && l.w_gate.allFinite() && l.w_up.allFinite() &&
         l.w_down.allFinite();
  return ok;
}

ToyTransformer build_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int d = cfg.dim;
  const double ws = 1.0 / std::sqrt(static_cast<double>(d));
  const double fs = 1.0 / std::sqrt(static_cast<double>(cfg.d_ffn));

  ToyTransformer m;
  m.cfg = cfg;
  m.embed = rng.gaussian_matrix(cfg.vocab, d, ws);
  m.pos = rng.gaussian_matrix(cfg.ctx, d, ws);
  m.layers.resize(cfg.layers);
  for (auto& l : m.layers) {
    l.w_q = rng.gaussian_matrix(d, d, ws);
    l.w_k = rng.gaussian_matrix(d, d, ws);
    l.w_v = rng.gaussian_matrix(d, d, ws);
    l.w_o = rng.gaussian_matrix(d, d, ws);
    l.w_gate = rng.gaussian_matrix(cfg.d_ffn, d, ws);
    l.w_up = rng.gaussian_matrix(cfg.d_ffn, d, ws);
    l.w_down = rng.gaussian_matrix(d, cfg.d_ffn, fs);
    l.norm1_gain = Vector::Ones(d);
    l.norm2_gain = Vector::Ones(d);
  }
  m.final_gain = Vector::Ones(d);
  // Small head init keeps the step-0 loss at ln(vocab).
  m.unembed = rng.gaussian_matrix(cfg.vocab, d, 0.1 * ws);

  // Channel outliers: k = max(2, D/64) gain channels per pre-block norm
  // jump to 50x, the premise the rotations have to flatten.
  const int k = std::max(2, d / 64);
  auto amplify = [&](Vector& gain) {
    int placed = 0;
    while (placed < k) {
      int c = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(d)));
      if (gain(c) != 50.0) {
        gain(c) = 50.0;
        ++placed;
      }
    }
  };
  for (auto& l : m.layers) {
    amplify(l.norm1_gain);
    amplify(l.norm2_gain);
    // Compensate the fed weight columns so the function at init matches a
    // clean transformer (trained LLMs coexist with their outlier channels
    // the same way). The activation tensors entering each block keep the
    // full 50x channel structure.
    Vector inv1 = l.norm1_gain.cwiseInverse();
    Vector inv2 = l.norm2_gain.cwiseInverse();
    l.w_q = l.w_q * inv1.asDiagonal();
    l.w_k = l.w_k * inv1.asDiagonal();
    l.w_v = l.w_v * inv1.asDiagonal();
    l.w_gate = l.w_gate * inv2.asDiagonal();
    l.w_up = l.w_up * inv2.asDiagonal();
  }
  return m;
}

namespace {

constexpr double kRmsEps = 1e-12;

struct NormCache {
  Matrix normed;  // x / rms per token, before the gain
  Vector rms;
};

NormCache rmsnorm(const Matrix& x) {
  NormCache c;
  c.rms.resize(x.rows());
  c.normed.resize(x.rows(), x.cols());
  const double inv_d = 1.0 / static_cast<double>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    double ms = x.row(t).squaredNorm() * inv_d + kRmsEps;
    double r = std::sqrt(ms);
    c.rms(t) = r;
    c.normed.row(t) = x.row(t) / r;
  }
  return c;
}

// d(loss)/dx for y = x / rms(x), given d(loss)/dy.
Matrix rmsnorm_backward(const Matrix& dy, const Matrix& x, const Vector& rms) {
  Matrix dx(x.rows(), x.cols());
  const double inv_d = 1.0 / static_cast<double>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    double r = rms(t);
    double dot = dy.row(t).dot(x.row(t));
    dx.row(t) = dy.row(t) / r - x.row(t) * (dot * inv_d / (r * r * r));
  }
  return dx;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Fake quantization with the straight-through mask (1 where the unclamped
// code stays inside the code range).
Matrix fake_quant_masked(const Matrix& x, const QuantSpec& spec, Matrix* mask) {
  GroupParams p = compute_group_params(x, spec);
  const int qmax = spec.qmax();
  const int qmin = spec.symmetric ? -qmax : 0;
  Matrix out(x.rows(), x.cols());
  if (mask) mask->setOnes(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index g = spec.granularity == Granularity::PerTensor ? 0 : i;
    double s = p.scale(g);
    int zp = p.zero_point(g);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double raw = std::nearbyint(x(i, j) / s) + zp;
      double code = std::min(std::max(raw, static_cast<double>(qmin)),
                             static_cast<double>(qmax));
      if (mask && raw != code) (*mask)(i, j) = 0.0;
      out(i, j) = s * (code - zp);
    }
  }
  return out;
}

struct QuantizedLinear {
  Matrix w_hat;
  Matrix mask;  // empty unless STE gradients are needed
};

struct LayerTape {
  Matrix x_in;
  NormCache norm1;
  Matrix a_in, a_hat, a_mask;
  QuantizedLinear q_q, q_k, q_v, q_o, q_gate, q_up, q_down;
  Matrix q, k, v;
  Matrix k_hat, k_mask, v_hat, v_mask;
  std::vector<Matrix> probs;
  Matrix attn, attn_hat, attn_mask;
  Matrix x_mid;
  NormCache norm2;
  Matrix f_in, f_hat, f_mask;
  Matrix gate_pre, up, hidden, hidden_hat, hidden_mask;
  Matrix x_out;
};

struct Tape {
  Matrix x0;
  std::vector<LayerTape> layers;
  NormCache norm_f;
  Matrix ff;
  Matrix logits;
};

class Engine {
 public:
  Engine(const ToyTransformer& m, const ForwardOptions& opts, bool need_grads)
      : m_(m), opts_(opts), need_grads_(need_grads) {}

  const ToyTransformer& m_;
  const ForwardOptions& opts_;
  bool need_grads_;

  void record(const std::string& site, const Matrix& x) {
    if (opts_.recorder && opts_.recorder->on_site) opts_.recorder->on_site(site, x);
  }

  QuantizedLinear quant_weight(const Matrix& w) {
    QuantizedLinear q;
    if (opts_.mode.w && !opts_.mode.weights_prequantized) {
      q.w_hat = fake_quant_masked(w, *opts_.mode.w, need_grads_ ? &q.mask : nullptr);
    } else {
      q.w_hat = w;
      if (need_grads_) q.mask = Matrix::Ones(w.rows(), w.cols());
    }
    return q;
  }

  Matrix quant_act(const Matrix& x, const std::optional<QuantSpec>& spec, Matrix* mask) {
    if (!spec) {
      if (mask) mask->setOnes(x.rows(), x.cols());
      return x;
    }
    return fake_quant_masked(x, *spec, mask);
  }

  Tape forward(std::span<const int> tokens) {
    const ModelConfig& cfg = m_.cfg;
    const int t_len = static_cast<int>(tokens.size());
    if (t_len < 1 || t_len > cfg.ctx)
      throw std::invalid_argument("forward: sequence length out of range");
    for (int tok : tokens)
      if (tok < 0 || tok >= cfg.vocab)
        throw std::invalid_argument("forward: token id out of range");

    const int dh = cfg.d_head();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tape tape;
    tape.x0.resize(t_len, cfg.dim);
    for (int t = 0; t < t_len; ++t)
      tape.x0.row(t) = m_.embed.row(tokens[t]) + m_.pos.row(t);

    Matrix x = tape.x0;
    tape.layers.resize(m_.layers.size());
    for (size_t li = 0; li < m_.layers.size(); ++li) {
      const LayerWeights& l = m_.layers[li];
      LayerTape& lt = tape.layers[li];
      const std::string suffix = "." + std::to_string(li);
      lt.x_in = x;

      // MHSA sublayer.
      lt.norm1 = rmsnorm(x);
      lt.a_in = (lt.norm1.normed.array().rowwise() * l.norm1_gain.transpose().array()).matrix();
      record("attn_in" + suffix, lt.a_in);
      lt.a_hat = quant_act(lt.a_in, opts_.mode.a, need_grads_ ? &lt.a_mask : nullptr);

      lt.q_q = quant_weight(l.w_q);
      lt.q_k = quant_weight(l.w_k);
      lt.q_v = quant_weight(l.w_v);
      lt.q = lt.a_hat * lt.q_q.w_hat.transpose();
      lt.k = lt.a_hat * lt.q_k.w_hat.transpose();
      lt.v = lt.a_hat * lt.q_v.w_hat.transpose();
      if (m_.fht_value) {
        for (int h = 0; h < cfg.n_heads; ++h) {
          Matrix block = lt.v.middleCols(h * dh, dh);
          fht_rows_inplace(block);
          lt.v.middleCols(h * dh, dh) = block;
        }
      }
      lt.k_hat = quant_act(lt.k, opts_.mode.kv, need_grads_ ? &lt.k_mask : nullptr);
      lt.v_hat = quant_act(lt.v, opts_.mode.kv, need_grads_ ? &lt.v_mask : nullptr);

      lt.attn.resize(t_len, cfg.dim);
      lt.probs.resize(cfg.n_heads);
      for (int h = 0; h < cfg.n_heads; ++h) {
        auto qh = lt.q.middleCols(h * dh, dh);
        auto kh = lt.k_hat.middleCols(h * dh, dh);
        auto vh = lt.v_hat.middleCols(h * dh, dh);
        Matrix scores = att_scale * (qh * kh.transpose());
        Matrix& p = lt.probs[h];
        p = Matrix::Zero(t_len, t_len);
        for (int t = 0; t < t_len; ++t) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int j = 0; j <= t; ++j) mx = std::max(mx, scores(t, j));
          double sum = 0.0;
          for (int j = 0; j <= t; ++j) {
            p(t, j) = std::exp(scores(t, j) - mx);
            sum += p(t, j);
          }
          p.row(t).head(t + 1) /= sum;
        }
        lt.attn.middleCols(h * dh, dh) = p * vh;
      }
      record("o_in" + suffix, lt.attn);
      lt.attn_hat = quant_act(lt.attn, opts_.mode.a, need_grads_ ? &lt.attn_mask : nullptr);
      lt.q_o = quant_weight(l.w_o);
      Matrix o_out = lt.attn_hat * lt.q_o.w_hat.transpose();
      lt.x_mid = l.t_attn.apply(lt.x_in) + o_out;

      // FFN sublayer.
      lt.norm2 = rmsnorm(lt.x_mid);
      lt.f_in = (lt.norm2.normed.array().rowwise() * l.norm2_gain.transpose().array()).matrix();
      record("ffn_in" + suffix, lt.f_in);
      lt.f_hat = quant_act(lt.f_in, opts_.mode.a, need_grads_ ? &lt.f_mask : nullptr);
      lt.q_gate = quant_weight(l.w_gate);
      lt.q_up = quant_weight(l.w_up);
      lt.gate_pre = lt.f_hat * lt.q_gate.w_hat.transpose();
      lt.up = lt.f_hat * lt.q_up.w_hat.transpose();
      lt.hidden.resize(t_len, cfg.d_ffn);
      for (Eigen::Index i = 0; i < lt.hidden.rows(); ++i)
        for (Eigen::Index j = 0; j < lt.hidden.cols(); ++j) {
          double g = lt.gate_pre(i, j);
          lt.hidden(i, j) = g * sigmoid(g) * lt.up(i, j);
        }
      if (m_.fht_ffn) fht_rows_inplace(lt.hidden);
      record("down_in" + suffix, lt.hidden);
      lt.hidden_hat = quant_act(lt.hidden, opts_.mode.a, need_grads_ ? &lt.hidden_mask : nullptr);
      lt.q_down = quant_weight(l.w_down);
      Matrix d_out = lt.hidden_hat * lt.q_down.w_hat.transpose();
      lt.x_out = l.t_ffn.apply(lt.x_mid) + d_out;
      x = lt.x_out;
    }

    tape.norm_f = rmsnorm(x);
    tape.ff = (tape.norm_f.normed.array().rowwise() * m_.final_gain.transpose().array()).matrix();
    record("final_in", tape.ff);
    tape.logits = tape.ff * m_.unembed.transpose();
    return tape;
  }

  // Backward from d(loss)/dlogits; accumulates into grads.
  void backward(const Tape& tape, std::span<const int> tokens, const Matrix& dlogits,
                ModelGrads& grads) {
    const ModelConfig& cfg = m_.cfg;
    const int t_len = static_cast<int>(tokens.size());
    const int dh = cfg.d_head();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    grads.unembed += dlogits.transpose() * tape.ff;
    Matrix dff = dlogits * m_.unembed;
    grads.final_gain += (dff.array() * tape.norm_f.normed.array()).colwise().sum().matrix().transpose();
    Matrix dnf = (dff.array().rowwise() * m_.final_gain.transpose().array()).matrix();
    const Matrix& x_last = m_.layers.empty() ? tape.x0 : tape.layers.back().x_out;
    Matrix dx = rmsnorm_backward(dnf, x_last, tape.norm_f.rms);

    for (int li = static_cast<int>(m_.layers.size()) - 1; li >= 0; --li) {
      const LayerWeights& l = m_.layers[li];
      const LayerTape& lt = tape.layers[li];
      LayerGrads& lg = grads.layers[li];

      // x_out = t_ffn(x_mid) + d_out
      Matrix dx_mid = residual_backward(l.t_ffn, dx, lt.x_mid, lg.t_ffn);
      const Matrix& dd_out = dx;
      lg.w_down += (dd_out.transpose() * lt.hidden_hat).cwiseProduct(lt.q_down.mask);
      Matrix dhidden_hat = dd_out * lt.q_down.w_hat;
      Matrix dhidden = opts_.mode.a ? dhidden_hat.cwiseProduct(lt.hidden_mask).eval()
                                    : std::move(dhidden_hat);
      if (m_.fht_ffn) fht_rows_inplace(dhidden);  // H is symmetric orthogonal
      Matrix dgate_pre(t_len, cfg.d_ffn), dup(t_len, cfg.d_ffn);
      for (Eigen::Index i = 0; i < dhidden.rows(); ++i)
        for (Eigen::Index j = 0; j < dhidden.cols(); ++j) {
          double g = lt.gate_pre(i, j);
          double sg = sigmoid(g);
          double silu = g * sg;
          dgate_pre(i, j) = dhidden(i, j) * lt.up(i, j) * (sg * (1.0 + g * (1.0 - sg)));
          dup(i, j) = dhidden(i, j) * silu;
        }
      lg.w_gate += (dgate_pre.transpose() * lt.f_hat).cwiseProduct(lt.q_gate.mask);
      lg.w_up += (dup.transpose() * lt.f_hat).cwiseProduct(lt.q_up.mask);
      Matrix df_hat = dgate_pre * lt.q_gate.w_hat + dup * lt.q_up.w_hat;
      Matrix df_in = opts_.mode.a ? df_hat.cwiseProduct(lt.f_mask).eval() : std::move(df_hat);
      lg.norm2_gain += (df_in.array() * lt.norm2.normed.array()).colwise().sum().matrix().transpose();
      Matrix dn2 = (df_in.array().rowwise() * l.norm2_gain.transpose().array()).matrix();
      dx_mid += rmsnorm_backward(dn2, lt.x_mid, lt.norm2.rms);

      // x_mid = t_attn(x_in) + o_out
      Matrix dx_in = residual_backward(l.t_attn, dx_mid, lt.x_in, lg.t_attn);
      const Matrix& do_out = dx_mid;
      lg.w_o += (do_out.transpose() * lt.attn_hat).cwiseProduct(lt.q_o.mask);
      Matrix dattn_hat = do_out * lt.q_o.w_hat;
      Matrix dattn = opts_.mode.a ? dattn_hat.cwiseProduct(lt.attn_mask).eval()
                                  : std::move(dattn_hat);

      Matrix dq(t_len, cfg.dim), dk_hat(t_len, cfg.dim), dv_hat(t_len, cfg.dim);
      for (int h = 0; h < cfg.n_heads; ++h) {
        auto dah = dattn.middleCols(h * dh, dh);
        auto vh = lt.v_hat.middleCols(h * dh, dh);
        auto qh = lt.q.middleCols(h * dh, dh);
        auto kh = lt.k_hat.middleCols(h * dh, dh);
        const Matrix& p = lt.probs[h];
        Matrix dp = dah * vh.transpose();
        dv_hat.middleCols(h * dh, dh) = p.transpose() * dah;
        Matrix ds(t_len, t_len);
        for (int t = 0; t < t_len; ++t) {
          double dot = dp.row(t).head(t + 1).dot(p.row(t).head(t + 1));
          for (int j = 0; j < t_len; ++j)
            ds(t, j) = p(t, j) * (dp(t, j) - dot);
        }
        dq.middleCols(h * dh, dh) = att_scale * (ds * kh);
        dk_hat.middleCols(h * dh, dh) = att_scale * (ds.transpose() * qh);
      }
      Matrix dv = opts_.mode.kv ? dv_hat.cwiseProduct(lt.v_mask).eval() : std::move(dv_hat);
      Matrix dk = opts_.mode.kv ? dk_hat.cwiseProduct(lt.k_mask).eval() : std::move(dk_hat);
      if (m_.fht_value) {
        for (int h = 0; h < cfg.n_heads; ++h) {
          Matrix block = dv.middleCols(h * dh, dh);
          fht_rows_inplace(block);
          dv.middleCols(h * dh, dh) = block;
        }
      }
      lg.w_q += (dq.transpose() * lt.a_hat).cwiseProduct(lt.q_q.mask);
      lg.w_k += (dk.transpose() * lt.a_hat).cwiseProduct(lt.q_k.mask);
      lg.w_v += (dv.transpose() * lt.a_hat).cwiseProduct(lt.q_v.mask);
      Matrix da_hat = dq * lt.q_q.w_hat + dk * lt.q_k.w_hat + dv * lt.q_v.w_hat;
      Matrix da_in = opts_.mode.a ? da_hat.cwiseProduct(lt.a_mask).eval() : std::move(da_hat);
      lg.norm1_gain += (da_in.array() * lt.norm1.normed.array()).colwise().sum().matrix().transpose();
      Matrix dn1 = (da_in.array().rowwise() * l.norm1_gain.transpose().array()).matrix();
      dx_in += rmsnorm_backward(dn1, lt.x_in, lt.norm1.rms);
      dx = std::move(dx_in);
    }

    for (int t = 0; t < t_len; ++t) {
      grads.embed.row(tokens[t]) += dx.row(t);
      grads.pos.row(t) += dx.row(t);
    }
  }

 private:
  static Matrix residual_backward(const ResidualHandle& h, const Matrix& dout,
                                  const Matrix& x_in, Matrix& t_grad) {
    switch (h.kind) {
      case ResidualKind::Skip:
        return dout;
      case ResidualKind::Dense:
        if (t_grad.size() == 0) t_grad = Matrix::Zero(h.dense.rows(), h.dense.cols());
        t_grad += dout.transpose() * x_in;
        return dout * h.dense;
      case ResidualKind::Subspace: {
        if (h.approx.rank == 0) return dout;
        Matrix y = dout * h.approx.q;
        return dout + (y * h.approx.m) * h.approx.q.transpose();
      }
    }
    throw std::logic_error("residual_backward: bad kind");
  }
};

}  // namespace

Matrix forward_logits(const ToyTransformer& model, std::span<const int> tokens,
                      const ForwardOptions& opts) {
  Engine eng(model, opts, /*need_grads=*/false);
  return eng.forward(tokens).logits;
}

Matrix forward_logits(const ToyTransformer& model, std::span<const int> tokens,
                      const QuantMode& mode) {
  ForwardOptions opts;
  opts.mode = mode;
  return forward_logits(model, tokens, opts);
}

ModelGrads ModelGrads::zero_like(const ToyTransformer& m) {
  ModelGrads g;
  g.embed = Matrix::Zero(m.embed.rows(), m.embed.cols());
  g.pos = Matrix::Zero(m.pos.rows(), m.pos.cols());
  g.final_gain = Vector::Zero(m.final_gain.size());
  g.unembed = Matrix::Zero(m.unembed.rows(), m.unembed.cols());
  g.layers.resize(m.layers.size());
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerWeights& l = m.layers[i];
    LayerGrads& lg = g.layers[i];
    lg.norm1_gain = Vector::Zero(l.norm1_gain.size());
    lg.norm2_gain = Vector::Zero(l.norm2_gain.size());
    lg.w_q = Matrix::Zero(l.w_q.rows(), l.w_q.cols());
    lg.w_k = Matrix::Zero(l.w_k.rows(), l.w_k.cols());
    lg.w_v = Matrix::Zero(l.w_v.rows(), l.w_v.cols());
    lg.w_o = Matrix::Zero(l.w_o.rows(), l.w_o.cols());
    lg.w_gate = Matrix::Zero(l.w_gate.rows(), l.w_gate.cols());
    lg.w_up = Matrix::Zero(l.w_up.rows(), l.w_up.cols());
    lg.w_down = Matrix::Zero(l.w_down.rows(), l.w_down.cols());
    // transition grads are lazily sized on first touch
  }
  return g;
}

void ModelGrads::scale(double s) {
  embed *= s;
  pos *= s;
  final_gain *= s;
  unembed *= s;
  for (auto& lg : layers) {
    lg.norm1_gain *= s;
    lg.norm2_gain *= s;
    lg.w_q *= s;
    lg.w_k *= s;
    lg.w_v *= s;
    lg.w_o *= s;
    lg.w_gate *= s;
    lg.w_up *= s;
    lg.w_down *= s;
    if (lg.t_attn.size()) lg.t_attn *= s;
    if (lg.t_ffn.size()) lg.t_ffn *= s;
  }
}

double sequence_loss(const ToyTransformer& model, std::span<const int> tokens,
                     const ForwardOptions& opts, ModelGrads* grads) {
  if (tokens.size() < 2)
    throw std::invalid_argument("sequence_loss: need at least two tokens");
  std::span<const int> inputs = tokens.subspan(0, tokens.size() - 1);
  Engine eng(model, opts, grads != nullptr);
  Tape tape = eng.forward(inputs);

  const int t_len = static_cast<int>(inputs.size());
  double total = 0.0;
  Matrix dlogits = Matrix::Zero(t_len, model.cfg.vocab);
  for (int t = 0; t < t_len; ++t) {
    int target = tokens[t + 1];
    double mx = tape.logits.row(t).maxCoeff();
    double lse = std::log((tape.logits.row(t).array() - mx).exp().sum()) + mx;
    total += lse - tape.logits(t, target);
    if (grads) {
      for (int j = 0; j < model.cfg.vocab; ++j)
        dlogits(t, j) = std::exp(tape.logits(t, j) - lse);
      dlogits(t, target) -= 1.0;
    }
  }
  double mean = total / t_len;
  if (grads) {
    dlogits /= static_cast<double>(t_len);
    eng.backward(tape, inputs, dlogits, *grads);
  }
  return mean;
}

double perplexity(const ToyTransformer& model, const std::vector<int>& eval_tokens,
                  const QuantMode& mode) {
  if (eval_tokens.size() < 2) throw ConfigError("perplexity: eval split is empty");
  const int ctx = model.cfg.ctx;
  ForwardOptions opts;
  opts.mode = mode;
  double total = 0.0;
  int64_t n_pred = 0;
  for (size_t i = 0; i + 1 < eval_tokens.size(); i += ctx) {
    size_t end = std::min(i + ctx + 1, eval_tokens.size());
    if (end - i < 2) break;
    std::span<const int> window(eval_tokens.data() + i, end - i);
    double mean = sequence_loss(model, window, opts, nullptr);
    total += mean * static_cast<double>(window.size() - 1);
    n_pred += static_cast<int64_t>(window.size() - 1);
  }
  return std::exp(total / static_cast<double>(n_pred));
}

namespace {

// Visits parameters and their gradient/momentum counterparts in a fixed
// order; shared by SGD and any state walker.
template <typename Fn>
void for_each_param(ToyTransformer& m, ModelGrads& g, ModelGrads& mom, Fn&& fn) {
  fn(m.embed, g.embed, mom.embed);
  fn(m.pos, g.pos, mom.pos);
  fn(m.final_gain, g.final_gain, mom.final_gain);
  fn(m.unembed, g.unembed, mom.unembed);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    auto& lg = g.layers[i];
    auto& lm = mom.layers[i];
    fn(l.norm1_gain, lg.norm1_gain, lm.norm1_gain);
    fn(l.norm2_gain, lg.norm2_gain, lm.norm2_gain);
    fn(l.w_q, lg.w_q, lm.w_q);
    fn(l.w_k, lg.w_k, lm.w_k);
    fn(l.w_v, lg.w_v, lm.w_v);
    fn(l.w_o, lg.w_o, lm.w_o);
    fn(l.w_gate, lg.w_gate, lm.w_gate);
    fn(l.w_up, lg.w_up, lm.w_up);
    fn(l.w_down, lg.w_down, lm.w_down);
  }
}

}  // namespace

void pretrain(ToyTransformer& model, const SyntheticCorpus& corpus,
              const PretrainConfig& cfg, std::vector<PretrainLogRow>* log) {
  if (cfg.steps < 0) throw ConfigError("pretrain: steps must be >= 0");
  if (static_cast<size_t>(cfg.seqlen) + 1 >= corpus.train.size())
    throw ConfigError("pretrain: train split shorter than one sequence");

  Rng rng(cfg.seed);
  ModelGrads momentum = ModelGrads::zero_like(model);
  ForwardOptions opts;  // full precision
  for (int step = 0; step < cfg.steps; ++step) {
    ModelGrads grads = ModelGrads::zero_like(model);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      size_t off = rng.uniform_int(corpus.train.size() - cfg.seqlen - 1);
      std::span<const int> seq(corpus.train.data() + off, cfg.seqlen + 1);
      loss += sequence_loss(model, seq, opts, &grads);
    }
    loss /= cfg.batch;
    if (!std::isfinite(loss))
      throw NumericalError("pretrain: non-finite loss at step " + std::to_string(step));
    grads.scale(1.0 / cfg.batch);
    for_each_param(model, grads, momentum, [&](auto& p, auto& g, auto& mom) {
      mom = cfg.momentum * mom + g;
      p -= cfg.lr * mom;
    });
    if (log) log->push_back({step, loss, cfg.lr});
  }
}

double mean_token_max_over_rms(const Matrix& x) {
  double acc = 0.0;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    double mx = x.row(t).cwiseAbs().maxCoeff();
    double rms = std::sqrt(x.row(t).squaredNorm() / static_cast<double>(x.cols()) + 1e-30);
    acc += mx / rms;
  }
  return acc / static_cast<double>(x.rows());
}

}  // namespace respin
