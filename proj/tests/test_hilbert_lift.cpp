#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "delay_hjb/errors.hpp"
#include "delay_hjb/hilbert_lift.hpp"

using namespace delay_hjb;

TEST_CASE("uniform grid invariants") {
  SegmentGrid g = SegmentGrid::uniform(2.0, 9);
  CHECK(g.nodes.front() == doctest::Approx(-2.0));
  CHECK(g.nodes.back() == 0.0);
  double sum = 0.0;
  for (double w : g.weights) sum += w;
  CHECK(sum == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(g.weights.front() == doctest::Approx(0.5 * g.spacing()));
  CHECK_NOTHROW(g.validate());
  CHECK_THROWS_AS(SegmentGrid::uniform(0.0, 5), InvalidArgument);
  CHECK_THROWS_AS(SegmentGrid::uniform(1.0, 1), InvalidArgument);
}

TEST_CASE("flatten round trip and dimension checks") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 5);
  std::mt19937_64 rng(1);
  LiftedState x = random_state(2, g, rng);
  LiftedState y = LiftedState::unflatten(x.flatten(), 2, 5);
  CHECK(x.x0 == y.x0);
  CHECK(x.x1 == y.x1);
  CHECK_THROWS_AS(check_dims(LiftedState::zero(1, 4), g), InvalidArgument);
}

TEST_CASE("inverse generator on a constant segment") {
  // (x0, c) -> (-x0, -x0 + c s) at interior nodes, where the running integral is exact
  SegmentGrid g = SegmentGrid::uniform(1.0, 11);
  LiftedState x = LiftedState::constant(Eigen::VectorXd::Constant(1, 0.7), 11);
  x.x0(0) = 1.5;
  LiftedState r = apply_A_inverse(x, g);
  CHECK(r.x0(0) == doctest::Approx(-1.5));
  for (int k = 1; k < 10; ++k) CHECK(r.x1(k, 0) == doctest::Approx(-1.5 + 0.7 * g.nodes[k]).epsilon(1e-12));
  // the end node keeps half of its own half cell
  CHECK(r.x1(10, 0) == doctest::Approx(-1.5 - 0.5 * g.weights[10] * 0.7));

  // matrix form agrees with the direct map
  std::mt19937_64 rng(4);
  LiftedState z = random_state(1, g, rng);
  LiftedState a = apply_A_inverse(z, g), b = a_inverse_matrix(g, 1).apply(z);
  CHECK((a.flatten() - b.flatten()).norm() < 1e-12);
}

TEST_CASE("weak norm identities") {
  for (int m : {8, 33}) {
    SegmentGrid g = SegmentGrid::uniform(1.5, m);
    OperatorMatrix B = build_B(g, 2);
    std::mt19937_64 rng(m);
    for (int s = 0; s < 50; ++s) {
      LiftedState x = random_state(2, g, rng);
      double w = norm_minus1(x, g);
      CHECK(w * w == doctest::Approx(inner_X(B.apply(x), x, g)).epsilon(1e-10));
      CHECK(x.x0.norm() <= w * (1.0 + 1e-12));
    }
    OperatorAudit a = audit_operators(g, 2, 200, 3);
    CHECK(a.pass);
    CHECK(a.weak_B.max_ratio <= 1e-8);
  }
}

TEST_CASE("metric adjoint") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 7);
  OperatorMatrix A = a_inverse_matrix(g, 1);
  OperatorMatrix At = A.adjoint();
  std::mt19937_64 rng(9);
  for (int s = 0; s < 20; ++s) {
    LiftedState x = random_state(1, g, rng), z = random_state(1, g, rng);
    CHECK(inner_X(A.apply(x), z, g) == doctest::Approx(inner_X(x, At.apply(z), g)).epsilon(1e-12));
  }
}

TEST_CASE("spectrum of B") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 17);
  BSpectrum sp = spectrum_B(build_B(g, 1));
  REQUIRE(sp.size() == 18);
  for (int i = 0; i + 1 < sp.size(); ++i) CHECK(sp.eigenvalues[i] >= sp.eigenvalues[i + 1]);
  CHECK(sp.eigenvalues.back() > 0.0);
  // e_i orthonormal in the weak inner product
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      LiftedState ei = LiftedState::unflatten(sp.eigenvectors_minus1.col(i), 1, 17);
      LiftedState ej = LiftedState::unflatten(sp.eigenvectors_minus1.col(j), 1, 17);
      CHECK(inner_minus1(ei, ej, g) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8));
    }
  // full coordinates reproduce the weak norm
  std::mt19937_64 rng(2);
  LiftedState x = random_state(1, g, rng);
  double sum = 0.0;
  for (int i = 0; i < sp.size(); ++i) sum += std::pow(sp.coordinate(x.flatten(), i), 2);
  CHECK(sum == doctest::Approx(std::pow(norm_minus1(x, g), 2)).epsilon(1e-8));
  // P + Q = identity
  OperatorMatrix P = sp.projection_P(5), Q = sp.projection_Q(5);
  CHECK((P.entries + Q.entries - Eigen::MatrixXd::Identity(18, 18)).norm() < 1e-10);
}

TEST_CASE("operator csv dump") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 3);
  std::ostringstream out;
  dump_operator_csv(a_inverse_matrix(g, 1), out);
  CHECK(out.str().rfind("i,j,value\n", 0) == 0);
}
