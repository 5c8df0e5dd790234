#pragma once

// Discretized present x past state space: R^n x L2([-d,0]; R^n) on a uniform
// trapezoidal grid, the inverse delay generator, the weak norm and the
// eigenbasis of B = (A^-1)* A^-1.

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

namespace delay_hjb {

struct SegmentGrid {
  double d = 1.0;
  int m = 2;
  std::vector<double> nodes;    // -d = nodes[0] < ... < nodes[m-1] = 0
  std::vector<double> weights;  // trapezoidal weights, sum = d

  // Uniform trapezoidal grid. Throws InvalidArgument if d <= 0 or m < 2.
  static SegmentGrid uniform(double d, int m);

  double spacing() const { return d / (m - 1); }
  // Checks the ordering and weight-sum invariants.
  void validate() const;
};

struct LiftedState {
  Eigen::VectorXd x0;  // present, length n
  Eigen::MatrixXd x1;  // past segment, m rows (nodes) by n columns

  static LiftedState zero(int n, int m);
  static LiftedState constant(const Eigen::VectorXd& value, int m);

  int n() const { return static_cast<int>(x0.size()); }
  int m() const { return static_cast<int>(x1.rows()); }

  // Flat layout: x0 first, then x1 node by node.
  Eigen::VectorXd flatten() const;
  static LiftedState unflatten(const Eigen::VectorXd& v, int n, int m);

  LiftedState operator+(const LiftedState& o) const;
  LiftedState operator-(const LiftedState& o) const;
  LiftedState operator*(double s) const;
};

void check_dims(const LiftedState& x, const SegmentGrid& grid);

// Square matrix acting on flattened states, plus the diagonal metric W
// (identity on the present block, quadrature weights on the segment block).
struct OperatorMatrix {
  Eigen::MatrixXd entries;
  Eigen::VectorXd weight_metric;

  int dim() const { return static_cast<int>(entries.rows()); }
  // W^-1 T^T W
  OperatorMatrix adjoint() const;
  OperatorMatrix operator*(const OperatorMatrix& o) const;
  LiftedState apply(const LiftedState& x) const;
  // Operator norm induced by the metric.
  double metric_norm() const;
};

Eigen::VectorXd metric_diagonal(const SegmentGrid& grid, int n);

double inner_X(const LiftedState& x, const LiftedState& z, const SegmentGrid& grid);
double norm_X(const LiftedState& x, const SegmentGrid& grid);

// (x0, x1) -> (-x0, -x0 - int_s^0 x1). The running integral uses dual cells:
// node k contributes half of its own cell plus the full cells to its right,
// which coincides with the trapezoidal running sum at interior nodes.
LiftedState apply_A_inverse(const LiftedState& x, const SegmentGrid& grid);
OperatorMatrix a_inverse_matrix(const SegmentGrid& grid, int n);

OperatorMatrix build_B(const SegmentGrid& grid, int n);

double norm_minus1(const LiftedState& x, const SegmentGrid& grid);
double inner_minus1(const LiftedState& x, const LiftedState& z, const SegmentGrid& grid);

struct BSpectrum {
  std::vector<double> eigenvalues;   // descending
  Eigen::MatrixXd eigenvectors_X;    // columns f_i, orthonormal in the metric
  Eigen::MatrixXd eigenvectors_minus1;  // columns e_i = f_i / sqrt(lambda_i)
  Eigen::VectorXd weight_metric;

  int size() const { return static_cast<int>(eigenvalues.size()); }
  // Orthogonal projection onto span{f_1..f_N}, and its complement.
  OperatorMatrix projection_P(int N) const;
  OperatorMatrix projection_Q(int N) const;
  // x^i = <x, e_i>_{-1} = sqrt(lambda_i) <x, f_i>_X
  double coordinate(const Eigen::VectorXd& flat_x, int i) const;
};

BSpectrum spectrum_B(const OperatorMatrix& B, double tol = 1e-10);

struct WeakBReport {
  double max_ratio = 0.0;
  int worst_sample = -1;
  int samples = 0;
  double tolerance = 1e-8;
  bool pass = false;
};

// Samples random nonzero states and reports max <A* B x, x>_X / |x|^2_{-1},
// with A* the metric adjoint of the inverse of the A^-1 matrix.
WeakBReport check_weak_B(const OperatorMatrix& B, const SegmentGrid& grid, int samples,
                         std::uint64_t seed, double tolerance = 1e-8);

// Row-major "i,j,value" dump.
struct OperatorAudit {
  int samples = 0;
  double identity_rel_error = 0.0;  // max | |x|^2_{-1} - <Bx,x>_X | / |x|^2_{-1}
  double present_ratio = 0.0;       // max |x0| / |x|_{-1}
  WeakBReport weak_B;
  bool pass = false;
};

// Random-state checks of |x|^2_{-1} = <Bx,x>, |x0| <= |x|_{-1} and the weak B condition.
OperatorAudit audit_operators(const SegmentGrid& grid, int n, int samples, std::uint64_t seed,
                              double identity_tol = 1e-10, double weak_tol = 1e-8);

void dump_operator_csv(const OperatorMatrix& op, std::ostream& out);

LiftedState random_state(int n, const SegmentGrid& grid, std::mt19937_64& rng);

}  // namespace delay_hjb
