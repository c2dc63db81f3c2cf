#pragma once

// Simulated ("fake") uniform quantizers. Weights use per-channel symmetric
// grids, activations and KV tensors per-token asymmetric ones; rounding is
// half-to-even throughout.

#include "respin/common.hpp"

#include <vector>

namespace respin {

enum class Granularity { PerTensor, PerChannel, PerToken };

struct QuantSpec {
  int bits = 4;
  bool symmetric = true;
  Granularity granularity = Granularity::PerChannel;
  double clip_ratio = 1.0;

  void validate() const;
  // Symmetric code magnitude 2^{b-1}-1, or asymmetric top code 2^b-1.
  int qmax() const { return symmetric ? (1 << (bits - 1)) - 1 : (1 << bits) - 1; }
};

// Integer codes plus per-group scale / zero point. Groups are rows for
// per-channel (weights, output channel) and per-token (activations)
// granularity, or the whole tensor for per-tensor.
struct QuantizedTensor {
  IntMatrix codes;
  Vector scale;        // one per group
  IntVector zero_point;  // zero when symmetric
  QuantSpec spec;
  bool degenerate_group = false;  // some group had zero range; scale forced to 1

  Matrix dequantize() const;
};

QuantizedTensor quantize(const Matrix& x, const QuantSpec& spec);
Matrix dequantize(const QuantizedTensor& q);
Matrix fake_quant(const Matrix& x, const QuantSpec& spec);

// Shared grid: quantize-dequantize one row against precomputed group
// parameters. Used by both the plain path and the GPTQ column loop so the
// two agree bitwise.
double fake_quant_value(double x, double scale, int zero_point, int code_min, int code_max);

struct GroupParams {
  Vector scale;
  IntVector zero_point;
  bool degenerate = false;
};

// Per-group scale/zero-point for x under spec (rows = groups unless
// per-tensor).
GroupParams compute_group_params(const Matrix& x, const QuantSpec& spec);

// Grid search over clip_ratio in {1.00, 0.95, ..., 0.70} minimizing the
// per-channel symmetric reconstruction MSE. Deterministic; ties keep the
// larger ratio.
double clip_search(const Matrix& w, int bits);

}  // namespace respin
