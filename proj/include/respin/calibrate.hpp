#pragma once

// Rotation optimization: quantization-aware forward with straight-through
// gradients, Cayley-manifold updates with momentum on the skew
// representative and a cosine learning-rate schedule, then GPTQ weight
// quantization of the frozen, fused model.

#include "respin/gptq.hpp"
#include "respin/rotscheme.hpp"

namespace respin {

struct CalibConfig {
  int steps = 100;
  double lr = 0.0;  // 0 resolves to the scheme default: 1.5 global, 15 layer-wise
  double momentum = 0.9;
  int batch = 8;
  int seqlen = 64;
  uint64_t seed = 11;
  QuantSpec w{4, true, Granularity::PerChannel, 1.0};
  QuantSpec a{4, false, Granularity::PerToken, 1.0};
  QuantSpec kv{4, false, Granularity::PerToken, 1.0};
  int gptq_sequences = 32;  // calibration forwards for the Hessians

  double resolved_lr(Scheme s) const {
    if (lr > 0.0) return lr;
    return s == Scheme::LayerWise ? 15.0 : 1.5;
  }
};

struct CalibLogRow {
  int step;
  double loss;
  double lr;
  std::vector<DeviationStats> deviations;  // aligned with rotation_names
};

struct CalibResult {
  RotationSet rots;
  std::vector<std::string> rotation_names;
  // Rows 0..steps-1 log the training batches; the final row (step == steps)
  // re-evaluates the step-0 batch under the final rotations so first and
  // last entries are directly comparable.
  std::vector<CalibLogRow> log;
  std::vector<std::string> warnings;
};

// Trains the learnable rotations of the scheme (weights stay frozen);
// Identity / GlobalHadamard sets have nothing to train and pass through
// with an empty log.
CalibResult calibrate(const ToyTransformer& pretrained, RotationSet rots,
                      const SyntheticCorpus& corpus, const CalibConfig& cfg);

struct GptqSiteReport {
  std::string site;   // weight name, e.g. "w_q.2"
  double clip_ratio;
  double gptq_loss;   // tr(dW H dW^T) proxy
  double rtn_loss;
};

// Records calibration activations per linear site, then clip_search +
// gptq_quantize per weight matrix, replacing weights with their
// dequantized codes. Embedding / unembedding stay in fp.
std::vector<GptqSiteReport> quantize_weights_gptq(ToyTransformer& model,
                                                  const SyntheticCorpus& corpus,
                                                  const QuantSpec& w_spec,
                                                  uint64_t seed, int n_sequences);

// Plain RTN weight quantization (clip_search + round-to-nearest), for the
// no-compensation baselines.
void rtn_quantize_weights(ToyTransformer& model, const QuantSpec& w_spec);

// Ambient Euclidean gradients per stored rotation (sizes follow the
// RotationSet storage: one entry for Global schemes, L for LayerWise).
struct RotationGrads {
  std::vector<Matrix> r1, r2, r3;
};

// Maps gradients on the fused tensors (and dense transitions) back to the
// stored rotations. For W~ = B K A^T with upstream gradient G this is
// dB = G A K^T, dA = G^T B K; transitions T = B A^T give dB = G_T A,
// dA = G_T^T B.
RotationGrads chain_rotation_grads(const ToyTransformer& model, const RotationSet& rots,
                                   const ModelGrads& grads);

struct GradCheckRow {
  std::string rotation;
  double analytic;  // <G, Omega R>
  double fd;        // central difference through the retraction
  double rel_err;
};

// fp-mode directional-derivative check of the rotation gradient chain.
// Fake-quant mode is excluded by contract (the straight-through estimator
// is not a derivative). Since fusion makes the fp loss exactly invariant
// along the manifold, the honest expectation is a zero derivative on both
// sides: the check catches phantom tangent gradients from any
// inconsistent or missing chain term. rel_err is floored at the unit loss
// scale accordingly.
std::vector<GradCheckRow> grad_check(const ToyTransformer& model, const RotationSet& rots,
                                     const SyntheticCorpus& corpus, uint64_t seed);

}  // namespace respin
