#pragma once

// From-scratch L-layer pre-norm transformer (MHSA + gated FFN + RMSNorm +
// residuals) with a learned absolute position embedding, seeded init and
// channel-outlier injection through the RMSNorm gains. The same container
// serves the raw pretrained model and its rotation-fused form: fusing sets
// the residual transition handles and the online-FHT flags.

#include "respin/corpus.hpp"
#include "respin/quantizer.hpp"
#include "respin/subspace.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace respin {

struct ModelConfig {
  int layers = 4;
  int dim = 128;
  int n_heads = 4;
  int d_ffn = 256;
  int vocab = 64;
  int ctx = 64;
  uint64_t seed = 1;

  int d_head() const { return dim / n_heads; }
  void validate() const;
};

enum class ResidualKind { Skip, Dense, Subspace };

// How the residual stream crosses a basis change at a block boundary.
// Dense applies the stored column map T as x <- x * T^T per row; Subspace
// uses the rank-r approximation; Skip is the exact-identity fast path.
struct ResidualHandle {
  ResidualKind kind = ResidualKind::Skip;
  Matrix dense;
  TransitionApprox approx;

  Matrix apply(const Matrix& x) const;
};

struct LayerWeights {
  Vector norm1_gain, norm2_gain;
  Matrix w_q, w_k, w_v, w_o;  // dim x dim
  Matrix w_gate, w_up;        // d_ffn x dim
  Matrix w_down;              // dim x d_ffn
  ResidualHandle t_attn, t_ffn;
};

struct ToyTransformer {
  ModelConfig cfg;
  Matrix embed;  // vocab x dim
  Matrix pos;    // ctx x dim
  std::vector<LayerWeights> layers;
  Vector final_gain;
  Matrix unembed;  // vocab x dim
  bool fht_value = false;  // online per-head FHT on the value path
  bool fht_ffn = false;    // online FHT on the FFN hidden activation

  bool all_finite() const;
};

ToyTransformer build_model(const ModelConfig& cfg);

// Per-component fake quantization during the forward pass. Absent specs run
// in full precision. weights_prequantized marks models whose weights were
// already replaced by dequantized codes offline (GPTQ / RTN): the weight
// quantizer must not run again on top.
struct QuantMode {
  std::optional<QuantSpec> w, a, kv;
  bool weights_prequantized = false;

  static QuantMode fp() { return QuantMode{}; }
  bool any() const { return w || a || kv; }
};

// Activation recorder for GPTQ calibration and outlier statistics. Sites
// are the linear-layer inputs, keyed "attn_in.3", "o_in.3", "ffn_in.3",
// "down_in.3" plus "final_in". Tensors are the pre-quantizer values.
struct SiteRecorder {
  std::function<void(const std::string& site, const Matrix& x)> on_site;
};

struct ForwardOptions {
  QuantMode mode;
  SiteRecorder* recorder = nullptr;
};

Matrix forward_logits(const ToyTransformer& model, std::span<const int> tokens,
                      const ForwardOptions& opts);
Matrix forward_logits(const ToyTransformer& model, std::span<const int> tokens,
                      const QuantMode& mode);

// Gradients mirror the parameter layout; transition gradients are only
// accumulated for Dense handles.
struct LayerGrads {
  Vector norm1_gain, norm2_gain;
  Matrix w_q, w_k, w_v, w_o, w_gate, w_up, w_down;
  Matrix t_attn, t_ffn;
};

struct ModelGrads {
  Matrix embed, pos;
  std::vector<LayerGrads> layers;
  Vector final_gain;
  Matrix unembed;

  static ModelGrads zero_like(const ToyTransformer& m);
  void scale(double s);
};

// Teacher-forced mean cross entropy of next-token prediction over one
// sequence; tokens has T+1 entries (T inputs, shifted targets). Backward
// accumulates into grads when given. Quantizer sites use the
// straight-through contract: identity inside the clip range, zero outside.
double sequence_loss(const ToyTransformer& model, std::span<const int> tokens,
                     const ForwardOptions& opts, ModelGrads* grads);

double perplexity(const ToyTransformer& model, const std::vector<int>& eval_tokens,
                  const QuantMode& mode);

struct PretrainConfig {
  int steps = 500;
  double lr = 0.5;
  double momentum = 0.9;
  int batch = 8;
  int seqlen = 64;
  uint64_t seed = 7;
};

struct PretrainLogRow {
  int step;
  double loss;
  double lr;
};

// Plain SGD with momentum on cross entropy; aborts (step index in the
// message) if the loss turns non-finite.
void pretrain(ToyTransformer& model, const SyntheticCorpus& corpus,
              const PretrainConfig& cfg, std::vector<PretrainLogRow>* log = nullptr);

// Mean over tokens of max|x|/rms(x) per site; the outlier premise metric.
double mean_token_max_over_rms(const Matrix& x);

}  // namespace respin
