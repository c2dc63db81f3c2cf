#include "respin/orthonum.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <cmath>

namespace respin {

OrthogonalMatrix::OrthogonalMatrix(Matrix m) : m_(std::move(m)) {
  if (m_.rows() < 1 || m_.rows() != m_.cols())
    throw std::invalid_argument("OrthogonalMatrix: need a square matrix with dim >= 1");
  double defect = ortho_defect(m_);
  double tol = kOrthoTol * static_cast<double>(m_.rows());
  if (!(defect <= tol))
    throw NumericalError("OrthogonalMatrix: ||R R^T - I||_F = " + std::to_string(defect) +
                         " exceeds " + std::to_string(tol));
}

double OrthogonalMatrix::ortho_defect() const { return ortho_defect(m_); }

double OrthogonalMatrix::ortho_defect(const Matrix& m) {
  Matrix g = m * m.transpose();
  g.diagonal().array() -= 1.0;
  return g.norm();
}

OrthogonalMatrix OrthogonalMatrix::identity(int dim) {
  return OrthogonalMatrix(Matrix::Identity(dim, dim));
}

SkewMatrix::SkewMatrix(Matrix m) : m_(std::move(m)) {
  if (m_.rows() < 1 || m_.rows() != m_.cols())
    throw std::invalid_argument("SkewMatrix: need a square matrix with dim >= 1");
  double defect = (m_ + m_.transpose()).norm();
  if (!(defect <= kSkewTol * std::max(m_.norm(), 1e-300)) && defect != 0.0)
    throw NumericalError("SkewMatrix: ||A + A^T||_F = " + std::to_string(defect) +
                         " is not skew within tolerance");
}

OrthogonalMatrix hadamard(int dim) {
  if (!is_power_of_two(dim))
    throw std::invalid_argument("hadamard: dim " + std::to_string(dim) +
                                " is not a power of two (rotated dims are restricted "
                                "to powers of two)");
  Matrix h(1, 1);
  h(0, 0) = 1.0;
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (int n = 1; n < dim; n *= 2) {
    Matrix next(2 * n, 2 * n);
    next.topLeftCorner(n, n) = h;
    next.topRightCorner(n, n) = h;
    next.bottomLeftCorner(n, n) = h;
    next.bottomRightCorner(n, n) = -h;
    h = inv_sqrt2 * next;
  }
  return OrthogonalMatrix(std::move(h));
}

void fht_inplace(double* data, int n) {
  if (!is_power_of_two(n))
    throw std::invalid_argument("fht: length " + std::to_string(n) +
                                " is not a power of two");
  for (int len = 1; len < n; len <<= 1) {
    for (int i = 0; i < n; i += len << 1) {
      for (int j = i; j < i + len; ++j) {
        double a = data[j];
        double b = data[j + len];
        data[j] = a + b;
        data[j + len] = a - b;
      }
    }
  }
  double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (int i = 0; i < n; ++i) data[i] *= scale;
}

Vector fht(const Vector& x) {
  Vector y = x;
  fht_inplace(y.data(), static_cast<int>(y.size()));
  return y;
}

void fht_rows_inplace(Matrix& m) {
  int n = static_cast<int>(m.cols());
  Vector row(n);
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    row = m.row(t);
    fht_inplace(row.data(), n);
    m.row(t) = row;
  }
}

OrthogonalMatrix random_orthogonal(int dim, Rng& rng) {
  if (dim < 1) throw std::invalid_argument("random_orthogonal: dim must be >= 1");
  Matrix g = rng.gaussian_matrix(dim, dim);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  Matrix r = qr.matrixQR();
  // Sign-correct with the R diagonal so the draw is uniform on O(D).
  for (int j = 0; j < dim; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return OrthogonalMatrix(std::move(q));
}

OrthogonalMatrix random_orthogonal(int dim, uint64_t seed) {
  Rng rng(seed);
  return random_orthogonal(dim, rng);
}

SkewMatrix riemannian_grad(const OrthogonalMatrix& r, const Matrix& grad) {
  if (grad.rows() != r.dim() || grad.cols() != r.dim())
    throw std::invalid_argument("riemannian_grad: gradient shape mismatch");
  Matrix p = grad * r.matrix().transpose();
  // p - p^T is elementwise antisymmetric in exact float arithmetic.
  Matrix w = p - p.transpose();
  return SkewMatrix(std::move(w));
}

Matrix cayley_apply(const Matrix& r, const Matrix& w, double alpha) {
  int d = static_cast<int>(r.rows());
  Matrix half = (0.5 * alpha) * w;
  Matrix lhs = Matrix::Identity(d, d) - half;
  Matrix rhs = (Matrix::Identity(d, d) + half) * r;
  Eigen::PartialPivLU<Matrix> lu(lhs);
  // I - a/2 W is nonsingular for real a and skew W; guard regardless.
  double rcond = lu.rcond();
  if (!(rcond > 1e-14))
    throw NumericalError("cayley_apply: near-singular solve (rcond = " +
                         std::to_string(rcond) + ")");
  return lu.solve(rhs);
}

OrthogonalMatrix cayley_retract(const OrthogonalMatrix& r, const SkewMatrix& w,
                                double alpha) {
  if (w.dim() != r.dim()) throw std::invalid_argument("cayley_retract: dim mismatch");
  return OrthogonalMatrix(cayley_apply(r.matrix(), w.matrix(), alpha));
}

OrthogonalMatrix polar_orthogonal(const Matrix& a) {
  if (a.rows() != a.cols() || a.rows() < 1)
    throw std::invalid_argument("polar_orthogonal: need a square matrix");
  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector& s = svd.singularValues();
  double smax = s(0);
  for (int i = 0; i < s.size(); ++i) {
    if (!(s(i) > 1e-12 * smax))
      throw NumericalError("polar_orthogonal: rank-deficient input, singular value #" +
                           std::to_string(i) + " = " + std::to_string(s(i)));
  }
  return OrthogonalMatrix(svd.matrixU() * svd.matrixV().transpose());
}

}  // namespace respin
