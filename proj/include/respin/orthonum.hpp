#pragma once

// Orthogonal-matrix numerics: Hadamard construction, fast Hadamard
// transform, random orthogonal sampling, Cayley retraction, Riemannian
// gradient projection and SVD-based polar decomposition. Everything is
// dense 64-bit; dimensions stay desk-scale (D <= 1024).

#include "respin/common.hpp"

namespace respin {

// Dense square matrix constrained to the orthogonal manifold.
// ||R R^T - I||_F <= kOrthoTol * dim is enforced at construction.
class OrthogonalMatrix {
 public:
  static constexpr double kOrthoTol = 1e-8;

  explicit OrthogonalMatrix(Matrix m);

  int dim() const { return static_cast<int>(m_.rows()); }
  const Matrix& matrix() const { return m_; }

  // Frobenius orthogonality defect ||R R^T - I||_F.
  double ortho_defect() const;
  static double ortho_defect(const Matrix& m);

  static OrthogonalMatrix identity(int dim);

 private:
  Matrix m_;
};

// D x D real matrix with A = -A^T (tolerance relative to ||A||_F).
class SkewMatrix {
 public:
  static constexpr double kSkewTol = 1e-10;

  explicit SkewMatrix(Matrix m);

  int dim() const { return static_cast<int>(m_.rows()); }
  const Matrix& matrix() const { return m_; }

  static SkewMatrix zero(int dim) { return SkewMatrix(Matrix::Zero(dim, dim)); }

 private:
  Matrix m_;
};

// Normalized Sylvester Hadamard matrix; symmetric and involutory.
// Rejects non-power-of-two D.
OrthogonalMatrix hadamard(int dim);

// Fast Hadamard transform, equal to hadamard(n) * x. In-place butterfly
// with a final 1/sqrt(n) scaling; accounted as n*log2(n) MACs.
void fht_inplace(double* data, int n);
Vector fht(const Vector& x);

// Applies the FHT to every row of a T x n batch.
void fht_rows_inplace(Matrix& m);

// Haar-ish uniform draw on O(D): QR of a seeded Gaussian matrix with the
// R-diagonal sign correction. Deterministic per (dim, seed).
OrthogonalMatrix random_orthogonal(int dim, uint64_t seed);
OrthogonalMatrix random_orthogonal(int dim, Rng& rng);

// Projects an ambient Euclidean gradient G onto the tangent space at R
// (right-translated): W = G R^T - R G^T. Exactly skew by construction.
SkewMatrix riemannian_grad(const OrthogonalMatrix& r, const Matrix& grad);

// Cayley step R' = (I - a/2 W)^-1 (I + a/2 W) R via a direct dense solve.
OrthogonalMatrix cayley_retract(const OrthogonalMatrix& r, const SkewMatrix& w,
                                double alpha);

// Unchecked Cayley map; callers that need drift recovery validate the
// result themselves.
Matrix cayley_apply(const Matrix& r, const Matrix& w, double alpha);

// Frobenius-nearest orthogonal matrix U V^T from the SVD of A. Rejects
// rank-deficient inputs (relative singular value threshold 1e-12),
// reporting the offending index.
OrthogonalMatrix polar_orthogonal(const Matrix& a);

}  // namespace respin
