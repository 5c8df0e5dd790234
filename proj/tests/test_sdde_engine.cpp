#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "delay_hjb/errors.hpp"
#include "delay_hjb/sdde_engine.hpp"

using namespace delay_hjb;

namespace {

// dy = (a y + int k(xi) y(t+xi) dxi + c u) dt + s dW, scalar
ProblemSpec linear_spec(double a, double c, double s, const SegmentGrid& g) {
  ProblemSpec spec;
  spec.grid = g;
  spec.a1 = KernelSpec::zero(1, 1, g);
  spec.a2 = KernelSpec::zero(1, 1, g);
  spec.drift = [a, c](const Eigen::VectorXd& y, const Eigen::VectorXd& z, const Eigen::VectorXd& u,
                      Eigen::VectorXd& out) {
    out.resize(1);
    out(0) = a * y(0) + z(0) + c * u(0);
  };
  spec.diffusion = [s](const Eigen::VectorXd&, const Eigen::VectorXd&, Eigen::MatrixXd& out) {
    out.resize(1, 1);
    out(0, 0) = s;
  };
  spec.cost = [](const Eigen::VectorXd& y, const Eigen::VectorXd& u) { return u(0) * u(0) - y(0); };
  spec.controls = ControlSet::box(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1));
  spec.lipschitz_C = 1.0;
  return spec;
}

Eigen::VectorXd scalar(double v) { return Eigen::VectorXd::Constant(1, v); }

}  // namespace

TEST_CASE("Euler recursion of a deterministic linear equation") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 11);
  ProblemSpec spec = linear_spec(-0.5, 0.0, 0.0, g);
  LiftedState x = LiftedState::constant(scalar(2.0), 11);
  const double dt = 0.01;
  Path p = integrate(spec, x, ControlSource::constant(scalar(0.0)), 1.0, dt, 1);
  for (int k = 0; k <= p.steps; k += 25) CHECK(p.present(k, 0) == doctest::Approx(2.0 * std::pow(1 - 0.5 * dt, k)));
  CHECK(p.present(p.steps, 0) == doctest::Approx(2.0 * std::exp(-0.5)).epsilon(5e-3));
}

TEST_CASE("distributed delay term on a constant history") {
  // y' = int_{-1}^0 (xi + 1) y(t + xi) dxi with y = 1 on [-1, 0]
  SegmentGrid g = SegmentGrid::uniform(1.0, 11);
  ProblemSpec spec = linear_spec(0.0, 0.0, 0.0, g);
  spec.a1 = KernelSpec::sample(g, 1, 1, [](double xi) { return Eigen::MatrixXd::Constant(1, 1, xi + 1.0); });
  LiftedState x = LiftedState::constant(scalar(1.0), 11);
  Path p = integrate(spec, x, ControlSource::constant(scalar(0.0)), 0.1, 0.1, 1);
  // one Euler step of 0.1; the trapezoid rule is exact for the linear kernel
  CHECK(p.present(1, 0) == doctest::Approx(1.05).epsilon(1e-12));
}

TEST_CASE("Ornstein-Uhlenbeck moments under a constant control") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 11);
  const double a = -1.0, s = 0.5, u = 0.4, T = 2.0, dt = 0.01;
  ProblemSpec spec = linear_spec(a, 1.0, s, g);
  LiftedState x = LiftedState::constant(scalar(0.0), 11);
  const int P = 4000;
  double mean = 0.0, sq = 0.0;
  for (int i = 0; i < P; ++i) {
    Path p = integrate(spec, x, ControlSource::constant(scalar(u)), T, dt, 42, i);
    double y = p.present(p.steps, 0);
    mean += y;
    sq += y * y;
  }
  mean /= P;
  double var = sq / P - mean * mean;
  double exact_mean = -u / a * (1.0 - std::exp(a * T));
  double exact_var = s * s / (-2.0 * a) * (1.0 - std::exp(2.0 * a * T));
  CHECK(std::abs(mean - exact_mean) < 4.0 * std::sqrt(exact_var / P) + 0.01);
  CHECK(var == doctest::Approx(exact_var).epsilon(0.08));
}

TEST_CASE("noise streams are reproducible per (seed, path)") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 5);
  ProblemSpec spec = linear_spec(-0.3, 1.0, 0.2, g);
  LiftedState x = LiftedState::zero(1, 5);
  auto c = ControlSource::constant(scalar(0.2));
  Path a = integrate(spec, x, c, 1.0, 0.05, 7, 3), b = integrate(spec, x, c, 1.0, 0.05, 7, 3);
  Path other = integrate(spec, x, c, 1.0, 0.05, 7, 4);
  CHECK(a.noise == b.noise);
  CHECK(a.present == b.present);
  CHECK(a.noise_checksum() != other.noise_checksum());
}

TEST_CASE("lattice and argument checks") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 11);
  ProblemSpec spec = linear_spec(-0.3, 1.0, 0.2, g);
  LiftedState x = LiftedState::zero(1, 11);
  auto c = ControlSource::constant(scalar(0.0));
  CHECK_THROWS_AS(integrate(spec, x, c, 1.0, 0.03, 1), InvalidArgument);
  CHECK_THROWS_AS(integrate(spec, x, c, 1.005, 0.01, 1), InvalidArgument);
  CHECK_THROWS_AS(integrate(spec, LiftedState::zero(1, 5), c, 1.0, 0.01, 1), InvalidArgument);
  KernelSpec bad = KernelSpec::sample(g, 1, 1, [](double) { return Eigen::MatrixXd::Constant(1, 1, 1.0); });
  CHECK_THROWS_AS(bad.validate(g), InvalidArgument);
}

TEST_CASE("piecewise schedule") {
  ControlSource c = ControlSource::piecewise({scalar(0.1), scalar(0.2), scalar(0.3)}, 3.0);
  Eigen::VectorXd u;
  c.schedule(0.5, u);
  CHECK(u(0) == 0.1);
  c.schedule(1.0, u);
  CHECK(u(0) == 0.2);
  c.schedule(5.0, u);
  CHECK(u(0) == 0.3);
}

TEST_CASE("discounted cost of a constant running cost") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 11);
  ProblemSpec spec = linear_spec(0.0, 0.0, 0.0, g);
  spec.rho = 0.8;
  spec.cost = [](const Eigen::VectorXd&, const Eigen::VectorXd&) { return 2.0; };
  Path p = integrate(spec, LiftedState::zero(1, 11), ControlSource::constant(scalar(0.0)), 5.0, 0.01, 1);
  CHECK(discounted_cost(spec, p) == doctest::Approx(2.0 * (1.0 - std::exp(-4.0)) / 0.8).epsilon(1e-4));
}

TEST_CASE("lifted trajectory matches the integrator buffer") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 6);
  ProblemSpec spec = linear_spec(-0.2, 1.0, 0.3, g);
  spec.a1 = KernelSpec::sample(g, 1, 1, [](double xi) { return Eigen::MatrixXd::Constant(1, 1, -(xi + 1.0)); });
  std::mt19937_64 rng(3);
  LiftedState x = random_state(1, g, rng);
  IntegrateOptions opt;
  opt.record_every = 7;
  Path p = integrate(spec, x, ControlSource::constant(scalar(0.5)), 2.0, 0.02, 5, 0, opt);
  REQUIRE(p.segment_snapshots.size() > 3);
  for (const auto& [k, seg] : p.segment_snapshots) CHECK(lift_trajectory(p, k * 0.02, g).x1 == seg);
  CHECK_THROWS_AS(lift_trajectory(p, 0.013, g), InvalidArgument);
}

TEST_CASE("rho_0 threshold and strict mode") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 5);
  ProblemSpec spec = linear_spec(-0.3, 1.0, 0.2, g);
  spec.rho = 0.1;
  SpecDiagnostics d = validate_spec(spec);
  CHECK(!d.warnings.empty());
  CHECK(d.rho0 > 0.1);
  spec.strict_rho = true;
  CHECK_THROWS_AS(validate_spec(spec), ConfigError);
}

TEST_CASE("comparison of coupled paths") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 11);
  ProblemSpec spec = linear_spec(-0.3, 1.0, 0.2, g);
  spec.a1 = KernelSpec::sample(g, 1, 1, [](double xi) { return Eigen::MatrixXd::Constant(1, 1, 0.4 * (xi + 1.0)); });
  LiftedState lo = LiftedState::constant(scalar(-0.5), 11), hi = LiftedState::constant(scalar(0.5), 11);
  ComparisonReport r = compare_paths(spec, lo, hi, ControlSource::constant(scalar(0.3)), 2.0, 0.01, 40, 3);
  CHECK(r.pass);
  CHECK(r.coupled);
  CHECK_THROWS_AS(compare_paths(spec, hi, lo, ControlSource::constant(scalar(0.3)), 2.0, 0.01, 4, 3),
                  InvalidArgument);
  // a drift decreasing in the delayed term is rejected with a witness
  ProblemSpec neg = spec;
  neg.a1 = KernelSpec::sample(g, 1, 1, [](double xi) { return Eigen::MatrixXd::Constant(1, 1, -(xi + 1.0)); });
  MonotonicityWitness w = probe_comparison_hypotheses(neg, 50, 1);
  CHECK(w.found);
  CHECK_THROWS_AS(compare_paths(neg, lo, hi, ControlSource::constant(scalar(0.3)), 2.0, 0.01, 4, 3),
                  PreconditionError);
}

TEST_CASE("Dynkin residual of the present coordinate") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 11);
  ProblemSpec spec = linear_spec(-0.3, 1.0, 0.2, g);
  spec.a1 = KernelSpec::sample(g, 1, 1, [](double xi) { return Eigen::MatrixXd::Constant(1, 1, -0.5 * (xi + 1.0)); });
  LiftedState x = LiftedState::constant(scalar(0.5), 11);
  const double dt = 0.01;
  auto res = dynkin_residuals(spec, {constant_test_function(1.0, 1, g), present_test_function(0, 1, g)}, x,
                              ControlSource::constant(scalar(0.3)), 1.0, 50.0, dt, 2000, 6);
  for (const auto& r : res) CHECK(r.residual <= std::max(3.0 * r.std_error, 5.0 * dt));
}

TEST_CASE("path csv header") {
  SegmentGrid g = SegmentGrid::uniform(1.0, 3);
  ProblemSpec spec = linear_spec(-0.3, 1.0, 0.2, g);
  Path p = integrate(spec, LiftedState::zero(1, 3), ControlSource::constant(scalar(0.1)), 1.0, 0.5, 1);
  std::ostringstream out;
  write_path_csv(p, out);
  CHECK(out.str().rfind("t,y_1,u_1\n", 0) == 0);
}
