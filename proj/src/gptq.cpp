#include "respin/gptq.hpp"

#include <Eigen/Cholesky>

namespace respin {

CalibHessian accumulate_hessian(const Matrix& x, double damping) {
  if (x.rows() < 1) throw std::invalid_argument("accumulate_hessian: need N >= 1 samples");
  if (!x.allFinite())
    throw NumericalError("accumulate_hessian: non-finite calibration activations");
  int d = static_cast<int>(x.cols());
  Matrix h = (2.0 / static_cast<double>(x.rows())) * (x.transpose() * x);
  h = 0.5 * (h + h.transpose()).eval();  // exact symmetry
  if (damping != 0.0) {
    double mean_diag = h.diagonal().mean();
    h.diagonal().array() += damping * mean_diag;
  }
  return CalibHessian{d, std::move(h)};
}

namespace {

// Upper-triangular U with H^-1 = U^T U, or empty on Cholesky failure.
bool inverse_cholesky_upper(const Matrix& h, Matrix& u_out) {
  Eigen::LLT<Matrix> llt(h);
  if (llt.info() != Eigen::Success) return false;
  Matrix hinv = llt.solve(Matrix::Identity(h.rows(), h.cols()));
  hinv = 0.5 * (hinv + hinv.transpose()).eval();
  Eigen::LLT<Matrix> llt_inv(hinv);
  if (llt_inv.info() != Eigen::Success) return false;
  u_out = llt_inv.matrixL().transpose();
  return true;
}

}  // namespace

QuantizedTensor gptq_quantize(const Matrix& w, const CalibHessian& hessian,
                              const QuantSpec& spec) {
  spec.validate();
  if (!spec.symmetric || spec.granularity != Granularity::PerChannel)
    throw ConfigError("gptq_quantize: requires per-channel symmetric quantization");
  if (hessian.dim != w.cols())
    throw std::invalid_argument("gptq_quantize: Hessian dim does not match weight columns");

  // Scales from the original weights, frozen for the whole column loop.
  GroupParams params = compute_group_params(w, spec);
  const int qmax = spec.qmax();

  Matrix u;
  if (!inverse_cholesky_upper(hessian.h, u)) {
    // One retry with 10x extra damping, then give up.
    Matrix damped = hessian.h;
    damped.diagonal().array() += 0.1 * hessian.h.diagonal().mean();
    if (!inverse_cholesky_upper(damped, u))
      throw NumericalError("gptq_quantize: Cholesky failed twice; Hessian not SPD");
  }

  Matrix work = w;
  QuantizedTensor out;
  out.spec = spec;
  out.scale = params.scale;
  out.zero_point = params.zero_point;
  out.degenerate_group = params.degenerate;
  out.codes.resize(w.rows(), w.cols());

  const Eigen::Index rows = w.rows();
  const Eigen::Index cols = w.cols();
  for (Eigen::Index j = 0; j < cols; ++j) {
    double d = u(j, j);
    for (Eigen::Index i = 0; i < rows; ++i) {
      double s = params.scale(i);
      int code = static_cast<int>(std::nearbyint(work(i, j) / s));
      code = std::min(std::max(code, -qmax), qmax);
      out.codes(i, j) = code;
      double q = s * static_cast<double>(code);
      double err = (work(i, j) - q) / d;
      // Push the residual into the remaining columns.
      for (Eigen::Index k = j + 1; k < cols; ++k) work(i, k) -= err * u(j, k);
    }
  }
  return out;
}

double proxy_loss(const Matrix& w, const Matrix& what, const CalibHessian& hessian) {
  Matrix delta = w - what;
  return (delta * hessian.h).cwiseProduct(delta).sum();
}

}  // namespace respin
