#include "doctest.h"

#include "respin/orthonum.hpp"

using namespace respin;

namespace {

// Independent dense oracle: unnormalized Sylvester recursion scaled once at
// the end, built without touching the library construction path.
Matrix dense_hadamard_oracle(int d) {
  Matrix h(1, 1);
  h(0, 0) = 1.0;
  for (int n = 1; n < d; n *= 2) {
    Matrix next(2 * n, 2 * n);
    next.topLeftCorner(n, n) = h;
    next.topRightCorner(n, n) = h;
    next.bottomLeftCorner(n, n) = h;
    next.bottomRightCorner(n, n) = -h;
    h = next;
  }
  return h / std::sqrt(static_cast<double>(d));
}

}  // namespace

TEST_CASE("hadamard base cases and involution") {
  CHECK(hadamard(1).matrix()(0, 0) == 1.0);

  Matrix h2 = hadamard(2).matrix();
  double s = 1.0 / std::sqrt(2.0);
  CHECK(h2(0, 0) == doctest::Approx(s).epsilon(1e-15));
  CHECK(h2(0, 1) == doctest::Approx(s).epsilon(1e-15));
  CHECK(h2(1, 0) == doctest::Approx(s).epsilon(1e-15));
  CHECK(h2(1, 1) == doctest::Approx(-s).epsilon(1e-15));

  // D=4: first row all 1/2 (expand the recursion by hand), H*H = I.
  Matrix h4 = hadamard(4).matrix();
  for (int j = 0; j < 4; ++j) CHECK(h4(0, j) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK((h4 * h4 - Matrix::Identity(4, 4)).norm() <= 1e-12);

  for (int d : {2, 8, 64, 256}) {
    Matrix h = hadamard(d).matrix();
    CHECK((h * h - Matrix::Identity(d, d)).norm() <= 1e-10);
    CHECK((h - h.transpose()).norm() == 0.0);
  }

  CHECK_THROWS_AS(hadamard(3), std::invalid_argument);
  CHECK_THROWS_AS(hadamard(48), std::invalid_argument);
  CHECK_THROWS_AS(hadamard(0), std::invalid_argument);
}

TEST_CASE("fht equals the dense Hadamard multiply") {
  // fht(e0), D=4 -> first column of H4 = (1/2, 1/2, 1/2, 1/2).
  Vector e0 = Vector::Zero(4);
  e0(0) = 1.0;
  Vector expect = dense_hadamard_oracle(4) * e0;
  Vector got = fht(e0);
  CHECK((got - expect).norm() <= 1e-15);
  for (int i = 0; i < 4; ++i) CHECK(got(i) == doctest::Approx(0.5).epsilon(1e-15));

  // fht((1,-1)) = (0, sqrt(2)).
  Vector x2(2);
  x2 << 1.0, -1.0;
  Vector y2 = fht(x2);
  CHECK(y2(0) == doctest::Approx(0.0));
  CHECK(y2(1) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));

  Rng rng(11);
  for (int d = 2; d <= 1024; d *= 2) {
    Matrix h = dense_hadamard_oracle(d);
    for (int rep = 0; rep < 5; ++rep) {
      Vector x = rng.gaussian_vector(d);
      CHECK(((fht(x) - h * x).cwiseAbs().maxCoeff()) <= 1e-10);
      // Involution of the normalized symmetric transform.
      CHECK(((fht(fht(x)) - x).cwiseAbs().maxCoeff()) <= 1e-12);
    }
  }

  Vector bad(3);
  bad.setZero();
  CHECK_THROWS_AS(fht(bad), std::invalid_argument);
}

TEST_CASE("random_orthogonal determinism and invariant") {
  Matrix r1 = random_orthogonal(1, 123).matrix();
  CHECK(std::abs(std::abs(r1(0, 0)) - 1.0) <= 1e-12);

  Matrix a = random_orthogonal(16, 7).matrix();
  Matrix b = random_orthogonal(16, 7).matrix();
  CHECK((a - b).norm() == 0.0);
  Matrix c = random_orthogonal(16, 8).matrix();
  CHECK((a - c).norm() > 1e-3);

  OrthogonalMatrix big = random_orthogonal(64, 7);
  CHECK(big.ortho_defect() <= 1e-8 * 64);

  CHECK_THROWS_AS(random_orthogonal(0, 1), std::invalid_argument);
}

TEST_CASE("riemannian_grad projection") {
  // G = R -> G R^T = I symmetric -> W = 0.
  OrthogonalMatrix r = random_orthogonal(8, 3);
  SkewMatrix w0 = riemannian_grad(r, r.matrix());
  CHECK(w0.matrix().norm() <= 1e-12);

  // R = I, symmetric G -> 0.
  Rng rng(5);
  Matrix g = rng.gaussian_matrix(6, 6);
  Matrix gs = g + g.transpose();
  SkewMatrix w1 = riemannian_grad(OrthogonalMatrix::identity(6), gs);
  CHECK(w1.matrix().norm() == 0.0);

  // R = I, G = [[0,1],[0,0]] -> [[0,1],[-1,0]].
  Matrix g2 = Matrix::Zero(2, 2);
  g2(0, 1) = 1.0;
  Matrix w2 = riemannian_grad(OrthogonalMatrix::identity(2), g2).matrix();
  CHECK(w2(0, 1) == 1.0);
  CHECK(w2(1, 0) == -1.0);
  CHECK(w2(0, 0) == 0.0);

  // Output is exactly skew up to float antisymmetry of a - b.
  Matrix g3 = rng.gaussian_matrix(16, 16);
  Matrix w3 = riemannian_grad(random_orthogonal(16, 9), g3).matrix();
  CHECK((w3 + w3.transpose()).norm() == 0.0);

  CHECK_THROWS_AS(riemannian_grad(r, g2), std::invalid_argument);
}

TEST_CASE("cayley_retract") {
  OrthogonalMatrix r = random_orthogonal(8, 21);

  // W = 0 keeps R.
  OrthogonalMatrix same = cayley_retract(r, SkewMatrix::zero(8), 0.7);
  CHECK((same.matrix() - r.matrix()).norm() <= 1e-14);

  // 2x2 closed form: rotation by theta = 2*atan(alpha*w/2).
  double wv = 0.8, alpha = 0.5;
  Matrix wm = Matrix::Zero(2, 2);
  wm(0, 1) = wv;
  wm(1, 0) = -wv;
  Matrix got = cayley_retract(OrthogonalMatrix::identity(2), SkewMatrix(wm), alpha).matrix();
  double theta = 2.0 * std::atan(alpha * wv / 2.0);
  Matrix expect(2, 2);
  expect << std::cos(theta), std::sin(theta), -std::sin(theta), std::cos(theta);
  CHECK((got - expect).norm() <= 1e-12);

  // Orthogonality preserved over 1000 random-direction steps.
  Rng rng(33);
  OrthogonalMatrix cur = random_orthogonal(32, 2);
  for (int step = 0; step < 1000; ++step) {
    Matrix g = rng.gaussian_matrix(32, 32);
    SkewMatrix w = riemannian_grad(cur, g);
    cur = cayley_retract(cur, w, 0.05);
  }
  CHECK(cur.ortho_defect() <= 1e-10 * 32);
}

TEST_CASE("polar_orthogonal") {
  // Orthogonal input is a fixed point.
  OrthogonalMatrix r = random_orthogonal(12, 4);
  CHECK((polar_orthogonal(r.matrix()).matrix() - r.matrix()).norm() <= 1e-12);

  // Positive diagonal -> identity.
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 2.0;
  d(1, 1) = 0.5;
  CHECK((polar_orthogonal(d).matrix() - Matrix::Identity(2, 2)).norm() <= 1e-13);

  // Sampling oracle: nothing on the 2x2 orthogonal group (rotations and
  // reflections) beats the polar factor in Frobenius distance.
  Matrix a(2, 2);
  a << 2.0, 0.0, 1.0, 1.0;
  Matrix p = polar_orthogonal(a).matrix();
  double polar_err = (a - p).norm();
  double sampled_min = std::numeric_limits<double>::infinity();
  const int n_samples = 5000;
  for (int i = 0; i < n_samples; ++i) {
    double th = 2.0 * M_PI * i / n_samples;
    double c = std::cos(th), s = std::sin(th);
    Matrix rot(2, 2), refl(2, 2);
    rot << c, -s, s, c;
    refl << c, s, s, -c;
    sampled_min = std::min({sampled_min, (a - rot).norm(), (a - refl).norm()});
  }
  CHECK(polar_err <= sampled_min + 1e-9);
  CHECK(sampled_min <= polar_err + 1e-4);  // the grid does approach the optimum

  // Idempotent on its own output.
  Matrix p2 = polar_orthogonal(p).matrix();
  CHECK((p2 - p).norm() <= 1e-12);

  // Rank-deficient input is rejected with the offending index.
  Matrix sing = Matrix::Zero(3, 3);
  sing(0, 0) = 1.0;
  sing(1, 1) = 1.0;
  CHECK_THROWS_WITH_AS(polar_orthogonal(sing),
                       doctest::Contains("singular value #2"), NumericalError);
}

TEST_CASE("skew and orthogonal type invariants") {
  Matrix not_orth = Matrix::Identity(4, 4);
  not_orth(0, 0) = 1.5;
  CHECK_THROWS_AS(OrthogonalMatrix{not_orth}, NumericalError);

  Matrix not_skew = Matrix::Identity(4, 4);
  CHECK_THROWS_AS(SkewMatrix{not_skew}, NumericalError);
}
