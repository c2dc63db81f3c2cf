#include "respin/rotscheme.hpp"

namespace respin {

const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::Identity: return "identity";
    case Scheme::GlobalHadamard: return "global-hadamard";
    case Scheme::GlobalLearned: return "global-learned";
    case Scheme::LayerWise: return "layerwise";
  }
  throw std::logic_error("scheme_name: bad scheme");
}

Scheme scheme_from_name(const std::string& name) {
  if (name == "identity") return Scheme::Identity;
  if (name == "global-hadamard") return Scheme::GlobalHadamard;
  if (name == "global-learned") return Scheme::GlobalLearned;
  if (name == "layerwise") return Scheme::LayerWise;
  throw ConfigError("unknown rotation scheme: " + name);
}

RotationSet init_rotations(const ModelConfig& cfg, Scheme scheme, uint64_t seed) {
  cfg.validate();
  RotationSet rs;
  rs.scheme = scheme;
  rs.layers = cfg.layers;
  rs.dim = cfg.dim;
  rs.d_head = cfg.d_head();

  switch (scheme) {
    case Scheme::Identity:
      rs.r1.push_back(OrthogonalMatrix::identity(cfg.dim));
      rs.r3.push_back(OrthogonalMatrix::identity(cfg.d_head()));
      rs.online_fht = false;
      break;
    case Scheme::GlobalHadamard: {
      // Randomized-Hadamard global rotation: H * diag(+-1), seeded.
      Rng rng(seed);
      Matrix h = hadamard(cfg.dim).matrix();
      for (int j = 0; j < cfg.dim; ++j)
        if (rng.uniform() < 0.5) h.col(j) = -h.col(j);
      rs.r1.emplace_back(std::move(h));
      rs.r3.push_back(hadamard(cfg.d_head()));
      rs.online_fht = true;
      break;
    }
    case Scheme::GlobalLearned:
      rs.r1.push_back(hadamard(cfg.dim));
      rs.r3.push_back(hadamard(cfg.d_head()));
      rs.online_fht = true;
      break;
    case Scheme::LayerWise:
      for (int i = 0; i < cfg.layers; ++i) {
        rs.r1.push_back(hadamard(cfg.dim));
        rs.r2.push_back(hadamard(cfg.dim));
        rs.r3.push_back(hadamard(cfg.d_head()));
      }
      rs.online_fht = true;
      break;
  }
  return rs;
}

OrthogonalMatrix transition(const OrthogonalMatrix& r_in, const OrthogonalMatrix& r_out) {
  if (r_in.dim() != r_out.dim())
    throw std::invalid_argument("transition: dimension mismatch");
  return OrthogonalMatrix(r_out.matrix() * r_in.matrix().transpose());
}

Matrix block_diag_heads(const Matrix& head_rot, int n_heads) {
  int dh = static_cast<int>(head_rot.rows());
  Matrix out = Matrix::Zero(dh * n_heads, dh * n_heads);
  for (int h = 0; h < n_heads; ++h) out.block(h * dh, h * dh, dh, dh) = head_rot;
  return out;
}

namespace {

Matrix fold_gain(const Matrix& w, const Vector& gain) {
  return w * gain.asDiagonal();
}

}  // namespace

FusedModel fuse(const ToyTransformer& model, const RotationSet& rots,
                TransitionMode tmode) {
  const ModelConfig& cfg = model.cfg;
  FusedModel out;
  out.scheme = rots.scheme;

  if (rots.scheme == Scheme::Identity) {
    out.model = model;
    for (int i = 0; i < cfg.layers; ++i) {
      out.t_attn.push_back(Matrix::Identity(cfg.dim, cfg.dim));
      out.t_ffn.push_back(Matrix::Identity(cfg.dim, cfg.dim));
      if (tmode == TransitionMode::Dense) {
        out.model.layers[i].t_attn = {ResidualKind::Dense, out.t_attn[i], {}};
        out.model.layers[i].t_ffn = {ResidualKind::Dense, out.t_ffn[i], {}};
      }
    }
    return out;
  }

  if (rots.dim != cfg.dim || rots.d_head != cfg.d_head() || rots.layers != cfg.layers)
    throw std::invalid_argument("fuse: rotation set does not match the model geometry");
  if (cfg.layers < 1)
    throw std::invalid_argument("fuse: rotated schemes need at least one layer");

  const Matrix h_head = hadamard(cfg.d_head()).matrix();
  const Matrix h_head_blk = block_diag_heads(h_head, cfg.n_heads);
  const Matrix h_ffn = hadamard(cfg.d_ffn).matrix();

  ToyTransformer f;
  f.cfg = cfg;
  f.fht_value = rots.online_fht;
  f.fht_ffn = rots.online_fht;

  const Matrix& a0 = rots.R1(0).matrix();
  f.embed = model.embed * a0.transpose();
  f.pos = model.pos * a0.transpose();

  f.layers.resize(cfg.layers);
  for (int i = 0; i < cfg.layers; ++i) {
    const LayerWeights& l = model.layers[i];
    LayerWeights& fl = f.layers[i];
    const Matrix& a = rots.R1(i).matrix();
    const Matrix& b = rots.R2(i).matrix();
    const Matrix c_blk = block_diag_heads(rots.R3(i).matrix(), cfg.n_heads);
    const Matrix& next = (i + 1 < cfg.layers) ? rots.R1(i + 1).matrix()
                                              : rots.final_basis().matrix();

    Matrix kq = fold_gain(l.w_q, l.norm1_gain);
    Matrix kk = fold_gain(l.w_k, l.norm1_gain);
    Matrix kv = fold_gain(l.w_v, l.norm1_gain);
    fl.w_q = kq * a.transpose();
    fl.w_k = kk * a.transpose();
    fl.w_v = c_blk * kv * a.transpose();
    fl.w_o = b * l.w_o * c_blk.transpose();
    if (rots.online_fht) fl.w_o = fl.w_o * h_head_blk;

    fl.w_gate = fold_gain(l.w_gate, l.norm2_gain) * b.transpose();
    fl.w_up = fold_gain(l.w_up, l.norm2_gain) * b.transpose();
    fl.w_down = next * l.w_down;
    if (rots.online_fht) fl.w_down = fl.w_down * h_ffn;

    fl.norm1_gain = Vector::Ones(cfg.dim);
    fl.norm2_gain = Vector::Ones(cfg.dim);

    Matrix t_attn = transition(rots.R1(i), rots.R2(i)).matrix();
    Matrix t_ffn = (i + 1 < cfg.layers)
                       ? transition(rots.R2(i), rots.R1(i + 1)).matrix()
                       : Matrix::Identity(cfg.dim, cfg.dim);
    out.t_attn.push_back(t_attn);
    out.t_ffn.push_back(t_ffn);

    // The last FFN transition is structurally identity (the unembedding
    // absorbs R2 of the last layer), so Auto keeps it on the skip path.
    bool dense_attn = tmode == TransitionMode::Dense || rots.scheme == Scheme::LayerWise;
    bool dense_ffn = tmode == TransitionMode::Dense ||
                     (rots.scheme == Scheme::LayerWise && i + 1 < cfg.layers);
    if (dense_attn) fl.t_attn = {ResidualKind::Dense, t_attn, {}};
    if (dense_ffn) fl.t_ffn = {ResidualKind::Dense, t_ffn, {}};
  }

  const Matrix& fin = rots.final_basis().matrix();
  f.final_gain = Vector::Ones(cfg.dim);
  f.unembed = fold_gain(model.unembed, model.final_gain) * fin.transpose();

  out.model = std::move(f);
  return out;
}

DeviationStats deviation_stats(const OrthogonalMatrix& r, const OrthogonalMatrix& r_init) {
  if (r.dim() != r_init.dim())
    throw std::invalid_argument("deviation_stats: dimension mismatch");
  double frob = (r.matrix() - r_init.matrix()).norm();
  double dot = r.matrix().cwiseProduct(r_init.matrix()).sum();
  double cos = dot / (r.matrix().norm() * r_init.matrix().norm());
  return {frob, cos};
}

}  // namespace respin
