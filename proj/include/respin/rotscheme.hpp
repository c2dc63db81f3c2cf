#pragma once

// Rotation assignment, offline weight fusion and residual transition
// matrices. Stored rotations act on the residual stream in column form
// (x_tilde = R x), so row-major activations are rotated as x * R^T and a
// linear layer with input basis A and output basis B fuses as
// W_tilde = B * W * A^T. Residual transitions are T = R_out * R_in^T,
// applied to row batches as x * T^T.

#include "respin/orthonum.hpp"
#include "respin/toymodel.hpp"

namespace respin {

enum class Scheme { Identity, GlobalHadamard, GlobalLearned, LayerWise };

const char* scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);

// Per-layer stream rotations R1 (block input) and R2 (block output /
// FFN input), the shared head rotation R3 on the value path, and the
// online-FHT slots R4 (FFN hidden) / R5 (per head, value path). Global
// schemes store one shared R (r1) and one shared R3.
struct RotationSet {
  Scheme scheme = Scheme::Identity;
  int layers = 0;
  int dim = 0;
  int d_head = 0;
  bool online_fht = false;  // R4/R5 enabled

  std::vector<OrthogonalMatrix> r1;  // L entries, or 1 shared for Global
  std::vector<OrthogonalMatrix> r2;  // empty for Global (aliases r1[0])
  std::vector<OrthogonalMatrix> r3;  // L entries, or 1 shared

  bool global() const { return scheme != Scheme::LayerWise; }
  const OrthogonalMatrix& R1(int i) const { return global() ? r1[0] : r1[i]; }
  const OrthogonalMatrix& R2(int i) const { return global() ? r1[0] : r2[i]; }
  const OrthogonalMatrix& R3(int i) const { return global() ? r3[0] : r3[i]; }
  // Basis of the residual stream after the last FFN block: R2 of the last
  // layer, absorbed by the unembedding.
  const OrthogonalMatrix& final_basis() const { return R2(layers - 1); }
};

RotationSet init_rotations(const ModelConfig& cfg, Scheme scheme, uint64_t seed);

// T = R_out * R_in^T.
OrthogonalMatrix transition(const OrthogonalMatrix& r_in, const OrthogonalMatrix& r_out);

struct FusedModel {
  ToyTransformer model;
  Scheme scheme = Scheme::Identity;
  std::vector<Matrix> t_attn;  // dense transitions, L entries
  std::vector<Matrix> t_ffn;
};

// Auto uses Skip handles where T is exactly identity (Identity and Global
// schemes); Dense forces dense handles everywhere (fusion-equivalence
// checks run in that mode).
enum class TransitionMode { Auto, Dense };

// Absorbs the rotations into the weights. RMSNorm gains are folded into
// the adjacent weight matrices first (rotations do not commute with
// per-channel gains); the Identity scheme is a bitwise copy with live
// gains, matching what an unrotated deployment quantizes.
FusedModel fuse(const ToyTransformer& model, const RotationSet& rots,
                TransitionMode tmode = TransitionMode::Auto);

struct DeviationStats {
  double frob;  // ||R - R_init||_F
  double cos;   // <R, R_init>_F / (||R||_F ||R_init||_F)
};

DeviationStats deviation_stats(const OrthogonalMatrix& r, const OrthogonalMatrix& r_init);

// Block-diagonal per-head expansion of a d_head rotation.
Matrix block_diag_heads(const Matrix& head_rot, int n_heads);

}  // namespace respin
