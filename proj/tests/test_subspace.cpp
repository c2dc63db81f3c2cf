#include "doctest.h"

#include "respin/subspace.hpp"

using namespace respin;

namespace {

// Near-identity rotation: Cayley image of a small random skew direction.
OrthogonalMatrix near_identity_rotation(int d, uint64_t seed, double skew_scale) {
  Rng rng(seed);
  Matrix g = rng.gaussian_matrix(d, d, skew_scale / std::sqrt(static_cast<double>(d)));
  SkewMatrix w((g - g.transpose()).eval());
  return cayley_retract(OrthogonalMatrix::identity(d), w, 1.0);
}

}  // namespace

TEST_CASE("identity transition gives the zero correction at any rank") {
  OrthogonalMatrix t = OrthogonalMatrix::identity(8);
  for (int r : {0, 3, 8}) {
    TransitionApprox a = subspace_build(t, r);
    CHECK(a.m.norm() <= 1e-12);
    Rng rng(1);
    Matrix x = rng.gaussian_matrix(4, 8);
    CHECK((subspace_apply(a, x) - x).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("full rank recovers T") {
  OrthogonalMatrix t = random_orthogonal(16, 5);
  TransitionApprox a = subspace_build(t, 16);
  CHECK((subspace_dense_from(a).matrix() - t.matrix()).norm() <= 1e-8);
}

TEST_CASE("planar rotation block: rank 2 is exact") {
  // T = block-diag(rot(0.3), I_2): Delta T has rank 2 and Q spans the
  // rotated plane.
  double th = 0.3;
  Matrix t = Matrix::Identity(4, 4);
  t(0, 0) = std::cos(th);
  t(0, 1) = -std::sin(th);
  t(1, 0) = std::sin(th);
  t(1, 1) = std::cos(th);
  OrthogonalMatrix tm{t};

  TransitionApprox a = subspace_build(tm, 2);
  CHECK(a.singular_values(1) > 1e-3);
  CHECK(a.singular_values(2) <= 1e-12);  // rank exactly 2
  // Q columns live in the span of e0, e1.
  CHECK(a.q.bottomRows(2).norm() <= 1e-12);
  CHECK((subspace_dense_from(a).matrix() - t).norm() <= 1e-10);
}

TEST_CASE("apply matches the dense reconstruction") {
  Rng rng(7);
  for (int rep = 0; rep < 5; ++rep) {
    OrthogonalMatrix t = near_identity_rotation(32, 100 + rep, 0.2);
    int r = 1 + static_cast<int>(rng.uniform_int(31));
    TransitionApprox a = subspace_build(t, r);
    Matrix dense = subspace_dense_from(a).matrix();
    Matrix x = rng.gaussian_matrix(6, 32);
    // Row-major batches go through x * That^T.
    CHECK((subspace_apply(a, x) - x * dense.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
    Vector xv = rng.gaussian_vector(32);
    CHECK((subspace_apply(a, xv) - dense * xv).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("rank 0 is a bitwise no-op and the complement is invariant") {
  OrthogonalMatrix t = near_identity_rotation(24, 3, 0.3);
  TransitionApprox a0 = subspace_build(t, 0);
  Rng rng(4);
  Matrix x = rng.gaussian_matrix(3, 24);
  Matrix y = subspace_apply(a0, x);
  CHECK((y - x).cwiseAbs().maxCoeff() == 0.0);

  TransitionApprox a = subspace_build(t, 6);
  // Project a random vector onto the orthogonal complement of Q.
  Vector v = rng.gaussian_vector(24);
  Vector perp = v - a.q * (a.q.transpose() * v);
  Vector out = subspace_apply(a, perp);
  CHECK((out - perp).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("That stays on the orthogonal group") {
  for (int rep = 0; rep < 10; ++rep) {
    OrthogonalMatrix t = near_identity_rotation(48, 500 + rep, 0.4);
    for (int r : {0, 4, 12, 48}) {
      TransitionApprox a = subspace_build(t, r);
      OrthogonalMatrix that = subspace_dense_from(a);
      CHECK(that.ortho_defect() <= 1e-8);
    }
  }
}

TEST_CASE("truncation error bounded by the tail singular mass") {
  OrthogonalMatrix t = near_identity_rotation(64, 9, 0.1);
  int r = 8;
  TransitionApprox a = subspace_build(t, r);
  Matrix that = subspace_dense_from(a).matrix();
  double err = (that - t.matrix()).norm();
  double tail = a.singular_values.tail(64 - r).sum();
  CHECK(err <= tail + 1e-10);
}

TEST_CASE("error curve is nonincreasing over a near-identity ensemble") {
  std::vector<int> ranks = {0, 1, 2, 4, 8, 16, 32, 64, 96, 128};
  for (int rep = 0; rep < 10; ++rep) {
    OrthogonalMatrix t = near_identity_rotation(128, 9000 + rep, 0.1);
    auto curve = approx_error_curve(t, ranks);
    CHECK(curve.front().first == 0);
    CHECK(curve.back().second <= 1e-8);  // full rank
    for (size_t i = 1; i < curve.size(); ++i)
      CHECK(curve[i].second <= curve[i - 1].second + 1e-6);
  }

  // T = I: all errors vanish.
  auto flat = approx_error_curve(OrthogonalMatrix::identity(16), {0, 4, 16});
  for (auto& [r, e] : flat) CHECK(e <= 1e-12);
}

TEST_CASE("MAC accounting") {
  OrthogonalMatrix t = near_identity_rotation(128, 2, 0.1);
  TransitionApprox a = subspace_build(t, 32);
  CHECK(a.macs_per_token() == 2 * 32 * 128 + 32 * 32);
}

TEST_CASE("argument validation") {
  OrthogonalMatrix t = OrthogonalMatrix::identity(8);
  CHECK_THROWS_AS(subspace_build(t, 9), std::invalid_argument);
  CHECK_THROWS_AS(subspace_build(t, -1), std::invalid_argument);
  TransitionApprox a = subspace_build(t, 2);
  Matrix wrong = Matrix::Zero(2, 9);
  CHECK_THROWS_AS(subspace_apply(a, wrong), std::invalid_argument);
  CHECK_THROWS_AS(approx_error_curve(t, {4, 2}), std::invalid_argument);
}
