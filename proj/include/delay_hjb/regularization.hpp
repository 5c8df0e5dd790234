#pragma once

// Inf/sup-convolutions in the weak norm over lag vectors, semiconvexity and
// envelope-convergence audits, and coordinate-wise mollification along the
// eigenvectors of B.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "delay_hjb/hilbert_lift.hpp"
#include "delay_hjb/value_solver.hpp"

namespace delay_hjb {

struct EnvelopeSearch {
  int scan_points = 5;   // per lag coordinate in the coarse scan
  int max_sweeps = 50;   // coordinate-descent sweeps
  double tolerance = 1e-8;
};

struct EnvelopeResult {
  double epsilon = 0.0;
  std::vector<double> values;
  std::vector<Eigen::VectorXd> argmins;
  std::vector<double> gaps;           // f(x) - envelope(x); negative for the sup form
  std::vector<bool> boundary_argmin;  // argmin touched the search box
};

// min_y f(y) + |x-y|^2_{-1} / (2 eps) over the box of `space`.
EnvelopeResult inf_convolution(const LagFunction& f, const LagSpace& space, double epsilon,
                               const std::vector<Eigen::VectorXd>& queries, const EnvelopeSearch& search = {});
// max_y f(y) - |x-y|^2_{-1} / (2 eps), computed as -inf_convolution(-f).
EnvelopeResult sup_convolution(const LagFunction& f, const LagSpace& space, double epsilon,
                               const std::vector<Eigen::VectorXd>& queries, const EnvelopeSearch& search = {});

// The envelope as a field, one minimization per evaluation.
LagFunction envelope_function(const LagFunction& f, const LagSpace& space, double epsilon,
                              const EnvelopeSearch& search = {});

struct SemiconvexityReport {
  int samples = 0;
  int violations = 0;
  double worst_margin = 0.0;
  double constant = 0.0;
  bool pass() const { return violations == 0; }
};

// Sub-box covering the central `share` of every coordinate range. The field
// near the box faces is shaped by successor clamping, so shape probes use this.
LagSpace central_region(const LagSpace& space, double share = 0.5);

// lam f(x) + (1-lam) f(y) - f(lam x + (1-lam) y) >= -C lam (1-lam) |x-y|^2_{-1} - slack
SemiconvexityReport semiconvexity_probe(const LagFunction& f, const LagSpace& space, double C, int samples,
                                        std::uint64_t seed, double slack = 1e-9);

struct AuditRow {
  double epsilon = 0.0;
  int query_id = 0;
  double gap = 0.0;
  double bound = 0.0;
  bool pass = false;
};

struct EnvelopeAudit {
  std::vector<AuditRow> rows;
  std::vector<double> sup_gap;  // per epsilon
  bool monotone = true;
  bool pass = false;
};

// PASS iff 0 <= gap <= K^2 eps / 2 + slack everywhere and gaps shrink with eps.
EnvelopeAudit envelope_convergence_audit(const LagFunction& f, const LagSpace& space, double K,
                                         const std::vector<double>& epsilons,
                                         const std::vector<Eigen::VectorXd>& queries, double slack = 1e-6,
                                         const EnvelopeSearch& search = {});
void write_audit_csv(const EnvelopeAudit& audit, std::ostream& out);

struct DerivativeRow {
  int query_id = 0;
  double envelope_slope = 0.0;
  double field_lo = 0.0, field_hi = 0.0;  // field slope range within two cells
  bool pass = false;
};

// Present-coordinate slope of the envelope against the slope of f sampled
// within two cells (cell = step) of the query.
std::vector<DerivativeRow> envelope_derivative_audit(const LagFunction& f, const LagSpace& space, double epsilon,
                                                     const std::vector<Eigen::VectorXd>& queries, double step,
                                                     const EnvelopeSearch& search = {});

using StateFunction = std::function<double(const LiftedState&)>;

// z^{eta,k}(x) = integral of z(x + sum_i t_i e_i) prod_i rho_{eta_i}(t_i) dt,
// e_i the leading B eigenvectors, eta_i = eta sqrt(lambda_i) / 2^i.
class MollifiedField {
 public:
  MollifiedField(StateFunction base, const BSpectrum& spectrum, const SegmentGrid& grid, int n, double eta, int k,
                 int order = 9);

  double operator()(const LiftedState& x) const;
  double eta() const { return eta_; }
  int k() const { return k_; }
  const std::vector<double>& widths() const { return widths_; }
  double width_sum() const;

 private:
  StateFunction base_;
  SegmentGrid grid_;
  int n_ = 1;
  double eta_ = 0.0;
  int k_ = 0;
  std::vector<double> widths_;
  std::vector<Eigen::VectorXd> directions_;  // flattened eigenvectors
  std::vector<double> nodes_, weights_;      // bump-weighted rule on [-1, 1]
};

MollifiedField partial_mollify(StateFunction base, const BSpectrum& spectrum, const SegmentGrid& grid, int n,
                               double eta, int k, int order = 9);

// Standard Gauss-Legendre rule on [-1, 1].
void gauss_legendre(int order, std::vector<double>& nodes, std::vector<double>& weights);

}  // namespace delay_hjb
