#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "delay_hjb/advertising.hpp"
#include "delay_hjb/cli.hpp"
#include "delay_hjb/config.hpp"
#include "delay_hjb/errors.hpp"
#include "delay_hjb/regularization.hpp"
#include "delay_hjb/value_solver.hpp"

using namespace delay_hjb;

namespace {

std::string fixture(const std::string& name) { return std::string(DELAY_HJB_FIXTURES) + "/" + name; }

struct Solved {
  RunConfig cfg;
  ProblemSpec spec;
  ValueField field;
};

const Solved& no_delay() {
  static const Solved s = [] {
    Solved r;
    r.cfg = load_config(fixture("linear_no_delay.toml"));
    r.spec = build_advertising_spec(r.cfg.model);
    r.field = solve_value_field(r.cfg, r.spec, r.cfg.solve.stage_rule);
    return r;
  }();
  return s;
}

LagChainMDP small_delayed(ProblemSpec& spec, StageRule rule = StageRule::Trapezoid) {
  RunConfig cfg = load_config(fixture("advertising_delay.toml"));
  spec = build_advertising_spec(cfg.model);
  cfg.solve.nodes = 7;
  return build_lag_mdp(spec, 2, grid_config(cfg, spec), 11, 5, rule);
}

}  // namespace

TEST_CASE("Gauss-Hermite moments of the standard normal") {
  std::vector<double> z, w;
  gauss_hermite_normal(7, z, w);
  double m0 = 0, m2 = 0, m4 = 0, m6 = 0, m1 = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    m0 += w[i];
    m1 += w[i] * z[i];
    m2 += w[i] * z[i] * z[i];
    m4 += w[i] * std::pow(z[i], 4);
    m6 += w[i] * std::pow(z[i], 6);
  }
  CHECK(m0 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(m1) < 1e-12);
  CHECK(m2 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m4 == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(m6 == doctest::Approx(15.0).epsilon(1e-12));
}

TEST_CASE("lag space embedding") {
  const Solved& s = no_delay();
  ProblemSpec spec;
  LagChainMDP mdp = small_delayed(spec);
  LagSpace sp = mdp.lag_space();
  Eigen::VectorXd v(3);
  v << 0.3, -0.2, 0.7;
  CHECK((sp.project(sp.embed(v)) - v).norm() < 1e-12);
  LiftedState e = sp.embed(v);
  CHECK(std::pow(norm_minus1(e, sp.grid), 2) == doctest::Approx(v.dot(sp.gram() * v)).epsilon(1e-10));
  CHECK(s.field.lag_space().dims() == 2);
}

TEST_CASE("linear no-delay slope") {
  const Solved& s = no_delay();
  const auto& m = s.cfg.model;
  const double slope = -m.gamma / (m.rho - m.a0);
  Eigen::VectorXd mid = Eigen::VectorXd::Constant(2, 0.5 * (s.field.mdp.axis.lo + s.field.mdp.axis.hi));
  CHECK(gradient_x0(s.field, mid)(0) == doctest::Approx(slope).epsilon(0.02));
  CHECK(s.field.residual < s.cfg.solve.tol);
}

TEST_CASE("zero dynamics and zero cost give a zero value") {
  RunConfig cfg = load_config(fixture("linear_no_delay.toml"));
  ProblemSpec spec = build_advertising_spec(cfg.model);
  spec.drift = [](const Eigen::VectorXd& y, const Eigen::VectorXd&, const Eigen::VectorXd&, Eigen::VectorXd& out) {
    out = Eigen::VectorXd::Zero(y.size());
  };
  spec.diffusion = [](const Eigen::VectorXd& y, const Eigen::VectorXd&, Eigen::MatrixXd& out) {
    out = Eigen::MatrixXd::Zero(y.size(), 1);
  };
  spec.cost = [](const Eigen::VectorXd&, const Eigen::VectorXd&) { return 0.0; };
  spec.closed_form_maximizer = nullptr;
  cfg.solve.nodes = 11;
  ValueField f = solve_value_field(cfg, spec, cfg.solve.stage_rule);
  double worst = 0.0;
  for (double v : f.values) worst = std::max(worst, std::abs(v));
  CHECK(worst == 0.0);
}

TEST_CASE("Bellman operator: contraction, monotonicity, shift") {
  ProblemSpec spec;
  LagChainMDP mdp = small_delayed(spec);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  std::vector<double> v(mdp.node_count()), w(v.size()), tv, tw, ts(v.size()), tsh;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = normal(rng);
    w[i] = v[i] + std::abs(normal(rng));
    ts[i] = v[i] + 0.75;
  }
  bellman_apply(mdp, spec, v, tv);
  bellman_apply(mdp, spec, w, tw);
  bellman_apply(mdp, spec, ts, tsh);
  double sup_in = 0.0, sup_out = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(tv[i] <= tw[i] + 1e-10);
    CHECK(tsh[i] - tv[i] == doctest::Approx(mdp.discount * 0.75).epsilon(1e-10));
    sup_in = std::max(sup_in, std::abs(w[i] - v[i]));
    sup_out = std::max(sup_out, std::abs(tw[i] - tv[i]));
  }
  CHECK(sup_out <= mdp.discount * sup_in + 1e-12);
}

TEST_CASE("value iteration reports non-convergence") {
  ProblemSpec spec;
  LagChainMDP mdp = small_delayed(spec);
  CHECK_THROWS_AS(value_iteration(mdp, spec, 1e-12, 3), NumericalError);
}

TEST_CASE("field evaluation and persistence") {
  const Solved& s = no_delay();
  const ValueField& f = s.field;
  for (std::size_t i = 0; i < f.mdp.node_count(); i += 97)
    CHECK(f.evaluate(f.mdp.node_state(i)) == doctest::Approx(f.values[i]).epsilon(1e-12));
  Eigen::VectorXd out = Eigen::VectorXd::Constant(2, f.mdp.axis.hi + 1.0);
  CHECK_FALSE(f.inside(out));
  CHECK_THROWS_AS(f.evaluate(out), InvalidArgument);
  CHECK_NOTHROW(f.evaluate(out, true));

  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "delay_hjb_value_io";
  fs::create_directories(dir);
  save_value_field(f, (dir / "v.json").string(), (dir / "v.csv").string());
  ValueField g = load_value_field((dir / "v.json").string());
  REQUIRE(g.values.size() == f.values.size());
  for (std::size_t i = 0; i < f.values.size(); ++i) CHECK(g.values[i] == f.values[i]);
  CHECK(g.mdp.axis.lo == f.mdp.axis.lo);
  CHECK(g.mdp.discount == f.mdp.discount);
  {
    std::ofstream body(dir / "v.csv", std::ios::app);
    body << "0,1\n";
  }
  CHECK_THROWS_AS(load_value_field((dir / "v.json").string()), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("Hamiltonian: closed form against the mesh scan") {
  const Solved& s = no_delay();
  LiftedState x = s.cfg.model.initial_state();
  auto mesh = s.spec.controls.mesh(s.spec.control_mesh);
  for (double p0 : {-0.2, -0.77, -2.0, 0.5}) {
    Eigen::VectorXd p = Eigen::VectorXd::Constant(1, p0);
    HamiltonianResult a = hamiltonian(x, p, s.spec), b = hamiltonian_mesh(x, p, s.spec, mesh);
    CHECK(std::abs(a.argmax(0) - b.argmax(0)) <= s.spec.controls.cell_width(s.spec.control_mesh, 0));
    CHECK(a.value >= b.value - 1e-12);
  }
  // nonnegative costate: spending does not pay
  CHECK(hamiltonian(x, Eigen::VectorXd::Constant(1, 0.5), s.spec).argmax(0) == 0.0);
}

TEST_CASE("tail bound and horizon") {
  const Solved& s = no_delay();
  LiftedState x = s.cfg.model.initial_state();
  CHECK(tail_bound(s.spec, x, 5.0) > tail_bound(s.spec, x, 10.0));
  double T = minimal_horizon(s.spec, x, 0.01);
  CHECK(tail_bound(s.spec, x, T) <= 0.01 * (1 + 1e-9));
  auto c = ControlSource::constant(Eigen::VectorXd::Constant(1, 0.2));
  CHECK_THROWS_AS(mc_cost(s.spec, x, c, 1.0, 0.01, 10, 1, 0.01), ConfigError);
  CostEstimate e = mc_cost(s.spec, x, c, 2.0, 0.01, 50, 1);
  CHECK(e.samples.size() == 50);
  CHECK(e.std_error > 0.0);
}

TEST_CASE("open-loop oracle finds the cheapest constant") {
  const Solved& s = no_delay();
  OracleConfig oc;
  oc.T = 6.0;
  oc.dt = 0.01;
  oc.pieces = 1;
  oc.paths = 100;
  for (double u : {0.0, 0.25, 0.6}) oc.levels.push_back(Eigen::VectorXd::Constant(1, u));
  OracleResult r = open_loop_oracle(s.spec, s.cfg.model.initial_state(), oc);
  CHECK(r.evaluated == 3);
  CHECK(r.best_levels[0](0) == 0.25);
  CHECK(r.value == doctest::Approx(r.estimate.mean + r.estimate.tail_bound));
  oc.pieces = 30;
  CHECK_THROWS_AS(open_loop_oracle(s.spec, s.cfg.model.initial_state(), oc), ConfigError);
}

TEST_CASE("weak-norm Lipschitz probe and convexity hypotheses") {
  const Solved& s = no_delay();
  LagSpace sp = s.field.lag_space();
  LagFunction f = [&s](const Eigen::VectorXd& v) { return s.field.evaluate(v, true); };
  LipschitzProbe p = lipschitz_minus1_probe(f, sp, 200, 4);
  CHECK(p.K > 0.0);
  CHECK(p.pass);
  CHECK(check_convexity_hypotheses(s.spec, 50, 2).hold());
  ConvexityReport c = convexity_probe(f, central_region(sp, 0.5), 500, 3, 1e-6);
  CHECK(c.violations == 0);
}
