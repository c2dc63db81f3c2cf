#pragma once

// Hessian-guided weight quantization with error compensation. Columns are
// processed left to right at full blocksize; the residual of each quantized
// column is pushed into the not-yet-quantized ones through the Cholesky
// factor of the inverse Hessian.

#include "respin/quantizer.hpp"

namespace respin {

struct CalibHessian {
  int dim = 0;
  Matrix h;  // symmetric positive definite after damping
};

// H = (2/N) sum x x^T over the rows of X, plus lambda * mean(diag) * I.
CalibHessian accumulate_hessian(const Matrix& x, double damping = 0.01);

// Per-channel symmetric GPTQ. clip_ratio in spec is expected to be frozen
// beforehand (clip_search). Scales are derived from the original W rows and
// held fixed through the column loop.
QuantizedTensor gptq_quantize(const Matrix& w, const CalibHessian& hessian,
                              const QuantSpec& spec);

// tr((W - What) H (W - What)^T): the calibration-set reconstruction
// objective up to a constant factor.
double proxy_loss(const Matrix& w, const Matrix& what, const CalibHessian& hessian);

}  // namespace respin
