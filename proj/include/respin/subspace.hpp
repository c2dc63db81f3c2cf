#pragma once

// Rank-r subspace residual rotation approximation of a transition matrix T.
// The top-r left singular vectors of T - I span the mismatch subspace Q;
// the projected transition is re-orthogonalized by polar decomposition and
// applied as x + Q M Q^T x with M = R_sub - I_r, so the orthogonal
// complement of Q passes through untouched.

#include "respin/orthonum.hpp"

#include <utility>
#include <vector>

namespace respin {

struct TransitionApprox {
  int dim = 0;
  int rank = 0;
  Matrix q;             // dim x rank, orthonormal columns
  Matrix m;             // rank x rank, R_sub - I
  Vector singular_values;  // full spectrum of T - I, descending (diagnostic)
  int det_sign = 1;     // sign of det(I + M) (diagnostic; see dense_from)

  // MACs per token for apply(): 2 r D + r^2.
  int64_t macs_per_token() const {
    return 2 * static_cast<int64_t>(rank) * dim +
           static_cast<int64_t>(rank) * rank;
  }
};

TransitionApprox subspace_build(const OrthogonalMatrix& t, int rank);

// y = x + (x Q) M^T Q^T for row-major batches (each row one token).
// rank 0 returns the input unchanged.
Matrix subspace_apply(const TransitionApprox& a, const Matrix& x);
Vector subspace_apply(const TransitionApprox& a, const Vector& x);

// That = I + Q M Q^T; throws if the result drifts off the orthogonal group
// beyond 1e-8 (that would indicate an SVD/polar defect upstream).
OrthogonalMatrix subspace_dense_from(const TransitionApprox& a);

// Frobenius approximation error per rank; ranks must be ascending.
std::vector<std::pair<int, double>> approx_error_curve(const OrthogonalMatrix& t,
                                                       const std::vector<int>& ranks);

}  // namespace respin
