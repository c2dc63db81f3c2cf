#include "respin/quantizer.hpp"

#include <cmath>

namespace respin {

void QuantSpec::validate() const {
  if (bits < 2 || bits > 8)
    throw ConfigError("QuantSpec: bits must be in [2, 8], got " + std::to_string(bits));
  if (!(clip_ratio > 0.0 && clip_ratio <= 1.0))
    throw ConfigError("QuantSpec: clip_ratio must be in (0, 1]");
}

namespace {

// nearbyint under the default FE_TONEAREST mode rounds half to even.
inline double round_even(double v) { return std::nearbyint(v); }

inline int clamp_code(double v, int lo, int hi) {
  if (v < lo) return lo;
  if (v > hi) return hi;
  return static_cast<int>(v);
}

}  // namespace

double fake_quant_value(double x, double scale, int zero_point, int code_min,
                        int code_max) {
  int code = clamp_code(round_even(x / scale) + zero_point, code_min, code_max);
  return scale * static_cast<double>(code - zero_point);
}

GroupParams compute_group_params(const Matrix& x, const QuantSpec& spec) {
  spec.validate();
  Eigen::Index groups = spec.granularity == Granularity::PerTensor ? 1 : x.rows();
  GroupParams p;
  p.scale.resize(groups);
  p.zero_point = IntVector::Zero(groups);
  const int qmax = spec.qmax();
  const bool per_tensor = spec.granularity == Granularity::PerTensor;
  for (Eigen::Index g = 0; g < groups; ++g) {
    double mn = per_tensor ? x.minCoeff() : x.row(g).minCoeff();
    double mx = per_tensor ? x.maxCoeff() : x.row(g).maxCoeff();
    if (spec.symmetric) {
      double amax = std::max(std::abs(mn), std::abs(mx));
      if (amax == 0.0) {
        p.scale(g) = 1.0;
        p.degenerate = true;
      } else {
        p.scale(g) = spec.clip_ratio * amax / static_cast<double>(qmax);
      }
    } else {
      double range = mx - mn;
      if (range == 0.0) {
        p.scale(g) = 1.0;
        p.zero_point(g) = clamp_code(round_even(-mn), 0, qmax);
        p.degenerate = true;
      } else {
        double s = spec.clip_ratio * range / static_cast<double>(qmax);
        p.scale(g) = s;
        p.zero_point(g) = clamp_code(round_even(-mn / s), 0, qmax);
      }
    }
  }
  return p;
}

QuantizedTensor quantize(const Matrix& x, const QuantSpec& spec) {
  GroupParams p = compute_group_params(x, spec);
  const int qmax = spec.qmax();
  const int qmin = spec.symmetric ? -qmax : 0;

  QuantizedTensor out;
  out.spec = spec;
  out.scale = p.scale;
  out.zero_point = p.zero_point;
  out.degenerate_group = p.degenerate;
  out.codes.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index g = spec.granularity == Granularity::PerTensor ? 0 : i;
    double s = p.scale(g);
    int zp = p.zero_point(g);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out.codes(i, j) = clamp_code(round_even(x(i, j) / s) + zp, qmin, qmax);
  }
  return out;
}

Matrix QuantizedTensor::dequantize() const {
  Matrix out(codes.rows(), codes.cols());
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    Eigen::Index g = spec.granularity == Granularity::PerTensor ? 0 : i;
    double s = scale(g);
    int zp = zero_point(g);
    for (Eigen::Index j = 0; j < codes.cols(); ++j)
      out(i, j) = s * static_cast<double>(codes(i, j) - zp);
  }
  return out;
}

Matrix dequantize(const QuantizedTensor& q) { return q.dequantize(); }

Matrix fake_quant(const Matrix& x, const QuantSpec& spec) {
  return quantize(x, spec).dequantize();
}

double clip_search(const Matrix& w, int bits) {
  QuantSpec spec;
  spec.bits = bits;
  spec.symmetric = true;
  spec.granularity = Granularity::PerChannel;
  double best_ratio = 1.0;
  double best_mse = std::numeric_limits<double>::infinity();
  for (int step = 0; step <= 6; ++step) {
    double ratio = 1.0 - 0.05 * step;
    spec.clip_ratio = ratio;
    double mse = (w - fake_quant(w, spec)).squaredNorm();
    if (mse < best_mse) {
      best_mse = mse;
      best_ratio = ratio;
    }
  }
  return best_ratio;
}

}  // namespace respin
