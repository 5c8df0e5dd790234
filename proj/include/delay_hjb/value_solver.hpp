#pragma once

// Value function approximation on a lag chain (present plus L equally spaced
// past values), Monte-Carlo cost estimates, the Hamiltonian and an open-loop
// brute-force oracle.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "delay_hjb/hilbert_lift.hpp"
#include "delay_hjb/sdde_engine.hpp"

namespace delay_hjb {

// Lag vectors s = (y(0), y(-delta), ..., y(-L delta)) for a scalar state,
// embedded in X by piecewise-linear interpolation between the lags.
struct LagSpace {
  int lags = 1;
  double delta = 1.0;
  SegmentGrid grid;
  Eigen::VectorXd lo, hi;  // search / grid box per coordinate

  int dims() const { return lags + 1; }
  LiftedState embed(const Eigen::VectorXd& s) const;
  Eigen::VectorXd project(const LiftedState& x) const;
  // |embed(v)|^2_{-1} = v^T G v
  Eigen::MatrixXd gram() const;
};

struct LagAxis {
  double lo = 0.0, hi = 1.0;
  int nodes = 2;
  double spacing() const { return (hi - lo) / (nodes - 1); }
  double node(int i) const { return i == nodes - 1 ? hi : lo + spacing() * i; }
};

enum class StageRule {
  LeftPoint,  // l(s0, u) delta
  Trapezoid,  // delta/2 (l(s0, u) + beta E l(s0', u))
};

struct LagChainMDP {
  int lags = 1;
  double delta = 1.0;
  LagAxis axis;  // shared by the present and every lag coordinate
  std::vector<Eigen::VectorXd> control_mesh;
  double control_cell = 0.0;
  std::vector<double> gh_nodes, gh_weights;  // standard normal, weights sum to 1
  double discount = 0.0;                     // exp(-rho delta)
  StageRule stage_rule = StageRule::Trapezoid;
  // kernel times lag trapezoid weight, one h-vector per lag
  std::vector<Eigen::VectorXd> lag_kernel_a1, lag_kernel_a2;
  double calibration_clamp_rate = 0.0;
  SegmentGrid grid;

  int dims() const { return lags + 1; }
  std::size_t node_count() const;
  Eigen::VectorXd node_state(std::size_t index) const;
  LagSpace lag_space() const;
};

struct GridConfig {
  int nodes = 41;
  bool auto_box = true;
  double lo = 0.0, hi = 0.0;    // used when auto_box is false
  double sd_multiplier = 4.0;
  // calibration rollout
  double calibration_T = 10.0;
  double calibration_dt = 0.0;  // 0: one segment node spacing
  int calibration_paths = 64;
  std::uint64_t seed = 11;
  LiftedState calibration_state;  // empty: zero state
};

LagChainMDP build_lag_mdp(const ProblemSpec& spec, int L, const GridConfig& grid_config,
                          int control_mesh, int gh_order = 7,
                          StageRule stage_rule = StageRule::Trapezoid);

// Gauss-Hermite rule for the standard normal (probabilists' weights, sum 1).
void gauss_hermite_normal(int order, std::vector<double>& nodes, std::vector<double>& weights);

// One MDP step of the present coordinate (mean and standard deviation).
void lag_transition(const LagChainMDP& mdp, const ProblemSpec& spec, const Eigen::VectorXd& s,
                    const Eigen::VectorXd& u, double& mean, double& sd);

struct ValueField {
  LagChainMDP mdp;
  std::vector<double> values;
  int iterations = 0;
  double residual = 0.0;
  std::vector<double> residual_history;
  double clamp_rate = 0.0;  // share of quadrature successors clamped to the box

  // Multilinear interpolation. Throws InvalidArgument outside the box unless clamp.
  double evaluate(const Eigen::VectorXd& s, bool clamp = false) const;
  double evaluate(const LiftedState& x, bool clamp = false) const;
  bool inside(const Eigen::VectorXd& s) const;
  LagSpace lag_space() const { return mdp.lag_space(); }
  // max over nodes and axes of |second difference| / 8
  double interpolation_error_estimate() const;
  // Distance of the stored values from the exact fixed point: residual beta / (1 - beta).
  double fixed_point_error() const { return residual * mdp.discount / (1.0 - mdp.discount); }
};

// One Bellman sweep T[v]; optional argmin control indices per node.
void bellman_apply(const LagChainMDP& mdp, const ProblemSpec& spec, const std::vector<double>& v,
                   std::vector<double>& out, std::vector<int>* argmin = nullptr,
                   double* clamp_rate = nullptr);

ValueField value_iteration(const LagChainMDP& mdp, const ProblemSpec& spec, double tol, int max_iter);

struct HamiltonianResult {
  double value = 0.0;
  Eigen::VectorXd argmax;
};

// -x0.p0 + max_u { -b0(x0, z1, u).p0 - l(x0, u) } over the control mesh, or at
// the registered closed-form maximizer.
HamiltonianResult hamiltonian(const LiftedState& x, const Eigen::VectorXd& p0, const ProblemSpec& spec);
// Always scans the given control list (no closed form).
HamiltonianResult hamiltonian_mesh(const LiftedState& x, const Eigen::VectorXd& p0, const ProblemSpec& spec,
                                   const std::vector<Eigen::VectorXd>& mesh);

struct CostEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  int paths = 0;
  double horizon = 0.0;
  double tail_bound = 0.0;
  std::vector<double> samples;  // per-path costs, kept for paired comparisons
};

double tail_bound(const ProblemSpec& spec, const LiftedState& x, double T);
double minimal_horizon(const ProblemSpec& spec, const LiftedState& x, double tail_tolerance);

// tail_tolerance <= 0 disables the horizon check.
CostEstimate mc_cost(const ProblemSpec& spec, const LiftedState& x, const ControlSource& control, double T,
                     double dt, int paths, std::uint64_t seed, double tail_tolerance = 0.0);

struct MomentFit {
  std::vector<double> times, mean_norm;
  double rate = 0.0;      // fitted lambda
  double constant = 0.0;  // smallest C with mean_norm(t) <= C (1+|x|) exp(rate t)
};

MomentFit fit_moment_growth(const ProblemSpec& spec, const LiftedState& x, const ControlSource& control,
                            double T, double dt, int paths, std::uint64_t seed);

struct OracleConfig {
  double T = 10.0;
  double dt = 0.01;
  int pieces = 2;
  std::vector<Eigen::VectorXd> levels;  // candidate piece values
  int paths = 200;
  std::uint64_t seed = 5;
  std::size_t max_combinations = 1000000;
  bool random_search = false;
  int random_samples = 0;
};

struct OracleResult {
  double value = 0.0;  // re-evaluated mean + tail bound (an upper estimate of V)
  CostEstimate estimate;
  std::vector<Eigen::VectorXd> best_levels;
  std::size_t evaluated = 0;
};

OracleResult open_loop_oracle(const ProblemSpec& spec, const LiftedState& x, const OracleConfig& cfg);

// Lag states drawn uniformly from the central `shrink` share of the box.
std::vector<Eigen::VectorXd> probe_lag_states(const LagSpace& space, int count, std::uint64_t seed,
                                              double shrink = 0.5);

// Central difference in the present coordinate, step one grid cell.
Eigen::VectorXd gradient_x0(const ValueField& field, const Eigen::VectorXd& s);
Eigen::VectorXd gradient_x0(const ValueField& field, const LiftedState& x);

struct LipschitzProbe {
  double K = 0.0;
  double K_second = 0.0;
  bool pass = false;
};

using LagFunction = std::function<double(const Eigen::VectorXd&)>;

LipschitzProbe lipschitz_minus1_probe(const LagFunction& f, const LagSpace& space, int samples,
                                      std::uint64_t seed);

struct ConvexityReport {
  int samples = 0;
  int violations = 0;
  double worst_margin = 0.0;  // most negative (rhs + slack - lhs)
  double slack = 0.0;
  double satisfied_fraction = 0.0;
};

ConvexityReport convexity_probe(const LagFunction& f, const LagSpace& space, int samples, std::uint64_t seed,
                                double slack);

struct ConvexityHypotheses {
  bool drift_affine = false;
  bool diffusion_constant = false;
  bool cost_convex = false;
  bool hold() const { return drift_affine && diffusion_constant && cost_convex; }
};

ConvexityHypotheses check_convexity_hypotheses(const ProblemSpec& spec, int probes, std::uint64_t seed);

// Persistence: JSON header plus CSV body "node,value". The header stores an
// FNV-1a hash of the body; loading fails if it does not match.
void save_value_field(const ValueField& field, const std::string& header_path, const std::string& body_path);
ValueField load_value_field(const std::string& header_path);

}  // namespace delay_hjb
