#pragma once

// Stochastic goodwill model: dy = [a0 y + int a1(xi) y(t+xi) dxi + c0 u] dt + sigma0 dW,
// running cost h(u) - g(y), controls in [0, u_bar].

#include <limits>
#include <string>
#include <vector>

#include "delay_hjb/hilbert_lift.hpp"
#include "delay_hjb/sdde_engine.hpp"

namespace delay_hjb {

// h(u) = kappa ((1 - u/u_bar)^-1 - 1 - u/u_bar) on [0, u_bar).
double default_h(double u, double kappa, double u_bar);
double default_h_prime(double u, double kappa, double u_bar);
// Inverse of h' on [0, inf): u_bar (1 - (1 + r u_bar / kappa)^(-1/2)).
double default_h_prime_inverse(double r, double kappa, double u_bar);

struct AdvertisingConfig {
  enum class KernelShape { Zero, Linear, Nodes };
  enum class CostShape { Barrier, Power };
  enum class UtilityShape { Linear, Quadratic };

  double a0 = -0.3;
  double c0 = 1.0;
  double sigma0 = 0.2;
  double rho = 1.0;
  double u_bar = 1.0;
  double d = 1.0;
  int segment_nodes = 21;
  int control_mesh = 41;

  KernelShape kernel = KernelShape::Zero;
  double alpha = 0.0;                // Linear: a1(xi) = -alpha (xi + d)
  std::vector<double> kernel_values;  // Nodes: one value per segment node

  CostShape cost = CostShape::Barrier;
  double kappa = 1.0;
  double cost_exponent = 2.0;  // Power: h(u) = kappa (u / u_bar)^exponent

  UtilityShape utility = UtilityShape::Linear;
  double gamma = 1.0;
  double curvature = 0.0;  // Quadratic: g(y) = gamma y - curvature y^2 / 2

  double x0 = 0.0;
  std::vector<double> history;  // empty: constant history equal to history_value
  double history_value = 0.0;

  // Declared constants; NaN means derive them in build_advertising_spec.
  double lipschitz_C = std::numeric_limits<double>::quiet_NaN();
  double cost_growth = std::numeric_limits<double>::quiet_NaN();
  double moment_constant = std::numeric_limits<double>::quiet_NaN();
  double moment_rate = std::numeric_limits<double>::quiet_NaN();
  bool strict_rho = false;

  // Throws ConfigError naming every violated invariant.
  void validate() const;
  std::vector<std::string> violations() const;

  SegmentGrid grid() const;
  KernelSpec kernel_spec() const;
  LiftedState initial_state() const;
  double h(double u) const;
  double g(double y) const;
};

// Builds the problem. Undeclared constants are derived: C from the drift
// probes, the cost growth from the largest mesh control, and the moment
// envelope from a short simulation under the largest mesh control.
ProblemSpec build_advertising_spec(const AdvertisingConfig& cfg, std::uint64_t seed = 3);

}  // namespace delay_hjb
