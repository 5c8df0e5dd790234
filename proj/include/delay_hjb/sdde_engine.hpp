#pragma once

// Euler-Maruyama simulation of controlled SDDEs with distributed delay, the
// lifted trajectory, coupled comparison runs and the Dynkin residual.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "delay_hjb/hilbert_lift.hpp"

namespace delay_hjb {

// Matrix-valued kernel sampled at the segment nodes; values[k] is h x n.
struct KernelSpec {
  int h = 0;
  int n = 0;
  std::vector<Eigen::MatrixXd> values;

  static KernelSpec zero(int h, int n, const SegmentGrid& grid);
  static KernelSpec sample(const SegmentGrid& grid, int h, int n,
                           const std::function<Eigen::MatrixXd(double)>& a);

  // The kernel must vanish at -d. Throws InvalidArgument otherwise.
  void validate(const SegmentGrid& grid) const;
  // Discrete W^{1,2} seminorm surrogate (finite-difference derivative, L2 in xi).
  double derivative_norm(const SegmentGrid& grid) const;
  bool nonnegative() const;
  bool nonpositive() const;
  bool is_zero() const;

  // sum_k w_k a(xi_k) seg.row(k)
  Eigen::VectorXd integrate(const SegmentGrid& grid, const Eigen::MatrixXd& seg) const;
};

struct ControlSet {
  enum class Kind { Box, Finite };
  Kind kind = Kind::Box;
  Eigen::VectorXd lo, hi;
  // When set, hi itself is excluded and mesh points stop one cell short of it.
  bool upper_open = false;
  std::vector<Eigen::VectorXd> points;

  static ControlSet box(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                        bool upper_open = false);
  static ControlSet finite(std::vector<Eigen::VectorXd> points);

  int dim() const;
  // Tensor mesh with per_dim points per axis (ignored for finite sets),
  // sorted lexicographically ascending.
  std::vector<Eigen::VectorXd> mesh(int per_dim) const;
  double cell_width(int per_dim, int axis) const;
  bool contains(const Eigen::VectorXd& u) const;
};

struct ProblemSpec {
  using Drift = std::function<void(const Eigen::VectorXd& y, const Eigen::VectorXd& z1,
                                   const Eigen::VectorXd& u, Eigen::VectorXd& out)>;
  using Diffusion =
      std::function<void(const Eigen::VectorXd& y, const Eigen::VectorXd& z2, Eigen::MatrixXd& out)>;
  using RunningCost = std::function<double(const Eigen::VectorXd& y, const Eigen::VectorXd& u)>;
  // Closed-form argmax of -b0(x0, z1, u).p0 - l(x0, u) over U, if known.
  using Maximizer = std::function<Eigen::VectorXd(const Eigen::VectorXd& x0,
                                                  const Eigen::VectorXd& z1,
                                                  const Eigen::VectorXd& p0)>;

  int n = 1, h = 1, q = 1, p = 1;
  SegmentGrid grid = SegmentGrid::uniform(1.0, 2);
  Drift drift;
  Diffusion diffusion;
  RunningCost cost;
  Maximizer closed_form_maximizer;
  KernelSpec a1, a2;
  double rho = 1.0;
  ControlSet controls;
  int control_mesh = 41;

  // Declared constants: drift/diffusion constant C (sets rho_0), growth of the
  // running cost |l| <= cost_growth (1 + |x|), and the moment envelope
  // E|Y(t)|_X <= moment_constant (1 + |x|_X) exp(moment_rate t).
  double lipschitz_C = 1.0;
  double cost_growth = 1.0;
  double moment_constant = 1.0;
  double moment_rate = 0.0;
  // Fail validation instead of warning when rho <= rho_0.
  bool strict_rho = false;

  void check_dims() const;
};

struct SpecDiagnostics {
  double B_norm = 0.0;
  double rho0 = 0.0;
  double probed_drift_C = 0.0;      // sup <b(x)-b(y), B(x-y)> / |x-y|^2_{-1}
  double probed_diffusion_C = 0.0;  // sup |sigma(x)-sigma(y)|_HS / |x-y|_{-1}
  std::vector<std::string> warnings;
};

double rho0_threshold(double C, double B_norm);
SpecDiagnostics validate_spec(const ProblemSpec& spec, std::uint64_t seed = 7, int probes = 200);

struct ControlSource {
  using Schedule = std::function<void(double t, Eigen::VectorXd& u)>;
  using Feedback = std::function<void(const LiftedState& Y, double t, Eigen::VectorXd& u)>;
  Schedule schedule;
  Feedback feedback;

  static ControlSource constant(const Eigen::VectorXd& u);
  // levels[i] holds on [i T/K, (i+1) T/K); the last level continues after T.
  static ControlSource piecewise(std::vector<Eigen::VectorXd> levels, double T);
  static ControlSource open_loop(Schedule s);
  static ControlSource policy(Feedback f);
  bool is_feedback() const { return static_cast<bool>(feedback); }
};

struct Path {
  double dt = 0.0;
  int steps = 0;
  int ratio = 1;  // node spacing / dt
  std::vector<double> times;
  Eigen::MatrixXd present;   // (steps+1) x n
  Eigen::MatrixXd controls;  // steps x p, u_k used on [t_k, t_{k+1})
  Eigen::MatrixXd noise;     // steps x q Brownian increments
  LiftedState initial;
  // History buffer at the final time, oldest first: samples of the segment on
  // the dt lattice over [T-d, T].
  Eigen::MatrixXd history;
  // Segments seen by the integrator at recorded steps (see IntegrateOptions).
  std::vector<std::pair<int, Eigen::MatrixXd>> segment_snapshots;

  double noise_checksum() const;
};

struct IntegrateOptions {
  int record_every = 0;  // snapshot the history segment every k steps (0 = never)
  bool keep_noise = true;
  // Called before each step with the lifted state; return false to stop early.
  std::function<bool(int k, double t, const LiftedState& Y, const Eigen::VectorXd& u)> observer;
};

// One path. The noise stream is derived from (seed, path_id).
Path integrate(const ProblemSpec& spec, const LiftedState& x, const ControlSource& control,
               double T, double dt, std::uint64_t seed, std::uint64_t path_id = 0,
               const IntegrateOptions& options = {});

LiftedState lift_trajectory(const Path& path, double t, const SegmentGrid& grid);

// Discounted running cost of one path, trapezoid in time.
double discounted_cost(const ProblemSpec& spec, const Path& path);

void write_path_csv(const Path& path, std::ostream& out);

struct ComparisonReport {
  double max_violation = 0.0;  // max of y_low - y_high over paths, times, components
  double slack = 0.0;
  int paths = 0;
  bool coupled = true;  // every pair shared its noise trace
  bool pass = false;
};

struct MonotonicityWitness {
  bool found = false;
  std::string description;
};

// Random probes of the comparison hypotheses: additive noise, nonnegative
// kernel, drift nondecreasing in z, and the one-sided bound
// b^i(x,z,u) - b^i(y,z,u) <= C [ |(x-y)^+| + |x^i-y^i| ].
MonotonicityWitness probe_comparison_hypotheses(const ProblemSpec& spec, int probes,
                                                std::uint64_t seed);

ComparisonReport compare_paths(const ProblemSpec& spec, const LiftedState& x_low,
                               const LiftedState& x_high, const ControlSource& control, double T,
                               double dt, int paths, std::uint64_t seed);

// phi with the derivative data the generator needs.
struct SmoothTestFunction {
  std::string name;
  std::function<double(const LiftedState&)> value;
  std::function<LiftedState(const LiftedState&)> gradient;         // D phi in X
  std::function<LiftedState(const LiftedState&)> astar_gradient;   // A* D phi
  std::function<Eigen::MatrixXd(const LiftedState&)> hessian_x0;   // D^2_{x0} phi
};

SmoothTestFunction constant_test_function(double c, int n, const SegmentGrid& grid);
SmoothTestFunction present_test_function(int component, int n, const SegmentGrid& grid);

// Weight profile g on [-d,0] with g(-d) = 0, together with g'.
struct SegmentWeight {
  std::function<double(double)> g;
  std::function<double(double)> dg;
};

// Scalar psi of (x0[component], <g_1, x1[component]>, ..., <g_J, x1[component]>).
struct MomentFunction {
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
  std::function<double(const Eigen::VectorXd&)> d2_present;
};

SmoothTestFunction moment_test_function(std::string name, int component, int n,
                                        const SegmentGrid& grid, std::vector<SegmentWeight> weights,
                                        MomentFunction psi);

struct DynkinResult {
  double residual = 0.0;
  double std_error = 0.0;
  double mean_defect = 0.0;  // signed
  int paths = 0;
  double stopped_fraction = 0.0;  // share of paths stopped by the radius
};

DynkinResult dynkin_residual(const ProblemSpec& spec, const SmoothTestFunction& phi,
                             const LiftedState& x, const ControlSource& control, double t,
                             double R, double dt, int paths, std::uint64_t seed);

// Several test functions evaluated on the same simulated paths.
std::vector<DynkinResult> dynkin_residuals(const ProblemSpec& spec,
                                           const std::vector<SmoothTestFunction>& phis,
                                           const LiftedState& x, const ControlSource& control,
                                           double t, double R, double dt, int paths,
                                           std::uint64_t seed);

}  // namespace delay_hjb
