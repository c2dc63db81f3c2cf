#include "respin/subspace.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>

namespace respin {

namespace {

// Deterministic column signs: the largest-magnitude entry of each left
// singular vector is made positive (ties: first index wins).
void fix_svd_signs(Matrix& u, Matrix& v) {
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    Eigen::Index imax = 0;
    double amax = -1.0;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      double a = std::abs(u(i, j));
      if (a > amax) {
        amax = a;
        imax = i;
      }
    }
    if (u(imax, j) < 0.0) {
      u.col(j) = -u.col(j);
      if (j < v.cols()) v.col(j) = -v.col(j);
    }
  }
}

}  // namespace

TransitionApprox subspace_build(const OrthogonalMatrix& t, int rank) {
  const int d = t.dim();
  if (rank < 0 || rank > d)
    throw std::invalid_argument("subspace_build: rank must be in [0, dim]");

  Matrix delta = t.matrix() - Matrix::Identity(d, d);
  Eigen::BDCSVD<Matrix> svd(delta, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix u = svd.matrixU();
  Matrix v = svd.matrixV();
  fix_svd_signs(u, v);

  TransitionApprox out;
  out.dim = d;
  out.rank = rank;
  out.singular_values = svd.singularValues();
  if (rank == 0) {
    out.q = Matrix::Zero(d, 0);
    out.m = Matrix::Zero(0, 0);
    return out;
  }

  out.q = u.leftCols(rank);
  Matrix t_sub = out.q.transpose() * t.matrix() * out.q;
  OrthogonalMatrix r_sub = polar_orthogonal(t_sub);
  out.m = r_sub.matrix() - Matrix::Identity(rank, rank);

  double q_defect = (out.q.transpose() * out.q - Matrix::Identity(rank, rank)).norm();
  if (!(q_defect <= 1e-10))
    throw NumericalError("subspace_build: Q columns not orthonormal, defect = " +
                         std::to_string(q_defect));
  out.det_sign = r_sub.matrix().determinant() >= 0.0 ? 1 : -1;
  return out;
}

Matrix subspace_apply(const TransitionApprox& a, const Matrix& x) {
  if (x.cols() != a.dim) throw std::invalid_argument("subspace_apply: dim mismatch");
  if (a.rank == 0) return x;
  Matrix y = x * a.q;                  // T x r
  Matrix z = y * a.m.transpose();      // T x r
  return x + z * a.q.transpose();
}

Vector subspace_apply(const TransitionApprox& a, const Vector& x) {
  if (x.size() != a.dim) throw std::invalid_argument("subspace_apply: dim mismatch");
  if (a.rank == 0) return x;
  Vector y = a.q.transpose() * x;
  Vector z = a.m * y;
  return x + a.q * z;
}

OrthogonalMatrix subspace_dense_from(const TransitionApprox& a) {
  Matrix that = Matrix::Identity(a.dim, a.dim);
  if (a.rank > 0) that += a.q * a.m * a.q.transpose();
  double defect = OrthogonalMatrix::ortho_defect(that);
  if (!(defect <= 1e-8))
    throw NumericalError("subspace_dense_from: That off the orthogonal group, defect = " +
                         std::to_string(defect));
  return OrthogonalMatrix(std::move(that));
}

std::vector<std::pair<int, double>> approx_error_curve(const OrthogonalMatrix& t,
                                                       const std::vector<int>& ranks) {
  for (size_t i = 1; i < ranks.size(); ++i)
    if (ranks[i] < ranks[i - 1])
      throw std::invalid_argument("approx_error_curve: ranks must be ascending");
  std::vector<std::pair<int, double>> curve;
  curve.reserve(ranks.size());
  for (int r : ranks) {
    TransitionApprox a = subspace_build(t, r);
    Matrix that = Matrix::Identity(t.dim(), t.dim());
    if (r > 0) that += a.q * a.m * a.q.transpose();
    curve.emplace_back(r, (that - t.matrix()).norm());
  }
  return curve;
}

}  // namespace respin
