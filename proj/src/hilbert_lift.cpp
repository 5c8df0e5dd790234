#include "delay_hjb/hilbert_lift.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "delay_hjb/errors.hpp"

namespace delay_hjb {

SegmentGrid SegmentGrid::uniform(double d, int m) {
  if (!(d > 0.0) || !std::isfinite(d)) throw InvalidArgument("SegmentGrid: d must be positive");
  if (m < 2) throw InvalidArgument("SegmentGrid: need at least 2 nodes for the trapezoidal rule");
  SegmentGrid g;
  g.d = d;
  g.m = m;
  g.nodes.resize(m);
  g.weights.assign(m, d / (m - 1));
  for (int k = 0; k < m; ++k) g.nodes[k] = -d + d * k / (m - 1);
  g.nodes[m - 1] = 0.0;
  g.weights[0] *= 0.5;
  g.weights[m - 1] *= 0.5;
  return g;
}

void SegmentGrid::validate() const {
  if (m < 2 || static_cast<int>(nodes.size()) != m || static_cast<int>(weights.size()) != m)
    throw InvalidArgument("SegmentGrid: inconsistent sizes");
  if (nodes[m - 1] != 0.0) throw InvalidArgument("SegmentGrid: last node must be 0");
  if (nodes[0] < -d) throw InvalidArgument("SegmentGrid: first node below -d");
  double sum = 0.0;
  for (int k = 0; k < m; ++k) {
    if (k > 0 && !(nodes[k] > nodes[k - 1]))
      throw InvalidArgument("SegmentGrid: nodes must be strictly increasing");
    if (!(weights[k] > 0.0)) throw InvalidArgument("SegmentGrid: weights must be positive");
    sum += weights[k];
  }
  if (std::abs(sum - d) > 1e-12 * d) throw InvalidArgument("SegmentGrid: weights must sum to d");
}

LiftedState LiftedState::zero(int n, int m) {
  return {Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(m, n)};
}

LiftedState LiftedState::constant(const Eigen::VectorXd& value, int m) {
  LiftedState s{value, Eigen::MatrixXd(m, value.size())};
  for (int k = 0; k < m; ++k) s.x1.row(k) = value.transpose();
  return s;
}

Eigen::VectorXd LiftedState::flatten() const {
  const int nn = n(), mm = m();
  Eigen::VectorXd v(nn * (1 + mm));
  v.head(nn) = x0;
  for (int k = 0; k < mm; ++k)
    for (int j = 0; j < nn; ++j) v(nn + k * nn + j) = x1(k, j);
  return v;
}

LiftedState LiftedState::unflatten(const Eigen::VectorXd& v, int n, int m) {
  if (v.size() != n * (1 + m)) throw InvalidArgument("LiftedState::unflatten: size mismatch");
  LiftedState s = zero(n, m);
  s.x0 = v.head(n);
  for (int k = 0; k < m; ++k)
    for (int j = 0; j < n; ++j) s.x1(k, j) = v(n + k * n + j);
  return s;
}

LiftedState LiftedState::operator+(const LiftedState& o) const { return {x0 + o.x0, x1 + o.x1}; }
LiftedState LiftedState::operator-(const LiftedState& o) const { return {x0 - o.x0, x1 - o.x1}; }
LiftedState LiftedState::operator*(double s) const { return {x0 * s, x1 * s}; }

void check_dims(const LiftedState& x, const SegmentGrid& grid) {
  if (x.m() != grid.m || x.x1.cols() != x.x0.size())
    throw InvalidArgument("LiftedState does not match the segment grid");
}

Eigen::VectorXd metric_diagonal(const SegmentGrid& grid, int n) {
  Eigen::VectorXd w(n * (1 + grid.m));
  w.head(n).setOnes();
  for (int k = 0; k < grid.m; ++k) w.segment(n + k * n, n).setConstant(grid.weights[k]);
  return w;
}

OperatorMatrix OperatorMatrix::adjoint() const {
  OperatorMatrix r;
  r.weight_metric = weight_metric;
  r.entries = weight_metric.cwiseInverse().asDiagonal() * entries.transpose() *
              weight_metric.asDiagonal();
  return r;
}

OperatorMatrix OperatorMatrix::operator*(const OperatorMatrix& o) const {
  if (dim() != o.dim()) throw InvalidArgument("OperatorMatrix: dimension mismatch");
  return {entries * o.entries, weight_metric};
}

LiftedState OperatorMatrix::apply(const LiftedState& x) const {
  Eigen::VectorXd v = x.flatten();
  if (v.size() != dim()) throw InvalidArgument("OperatorMatrix::apply: dimension mismatch");
  return LiftedState::unflatten(entries * v, x.n(), x.m());
}

double OperatorMatrix::metric_norm() const {
  Eigen::VectorXd s = weight_metric.cwiseSqrt();
  Eigen::MatrixXd t = s.asDiagonal() * entries * s.cwiseInverse().asDiagonal();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(t);
  return svd.singularValues()(0);
}

double inner_X(const LiftedState& x, const LiftedState& z, const SegmentGrid& grid) {
  check_dims(x, grid);
  check_dims(z, grid);
  if (x.n() != z.n()) throw InvalidArgument("inner_X: dimension mismatch");
  double s = x.x0.dot(z.x0);
  for (int k = 0; k < grid.m; ++k) s += grid.weights[k] * x.x1.row(k).dot(z.x1.row(k));
  return s;
}

double norm_X(const LiftedState& x, const SegmentGrid& grid) {
  return std::sqrt(inner_X(x, x, grid));
}

LiftedState apply_A_inverse(const LiftedState& x, const SegmentGrid& grid) {
  check_dims(x, grid);
  const int m = grid.m;
  LiftedState r = LiftedState::zero(x.n(), m);
  r.x0 = -x.x0;
  Eigen::RowVectorXd tail = Eigen::RowVectorXd::Zero(x.n());  // full cells right of node k
  for (int k = m - 1; k >= 0; --k) {
    Eigen::RowVectorXd running = tail + 0.5 * grid.weights[k] * x.x1.row(k);
    r.x1.row(k) = -x.x0.transpose() - running;
    tail += grid.weights[k] * x.x1.row(k);
  }
  return r;
}

OperatorMatrix a_inverse_matrix(const SegmentGrid& grid, int n) {
  grid.validate();
  const int m = grid.m, N = n * (1 + m);
  OperatorMatrix a;
  a.weight_metric = metric_diagonal(grid, n);
  a.entries = Eigen::MatrixXd::Zero(N, N);
  for (int j = 0; j < n; ++j) a.entries(j, j) = -1.0;
  for (int k = 0; k < m; ++k) {
    for (int j = 0; j < n; ++j) {
      int row = n + k * n + j;
      a.entries(row, j) = -1.0;
      a.entries(row, n + k * n + j) = -0.5 * grid.weights[k];
      for (int l = k + 1; l < m; ++l) a.entries(row, n + l * n + j) = -grid.weights[l];
    }
  }
  return a;
}

OperatorMatrix build_B(const SegmentGrid& grid, int n) {
  for (double w : grid.weights)
    if (!(w > 0.0)) throw InvalidArgument("build_B: quadrature weight must be positive");
  if (n < 1) throw InvalidArgument("build_B: n must be positive");
  OperatorMatrix a = a_inverse_matrix(grid, n);
  return a.adjoint() * a;
}

double norm_minus1(const LiftedState& x, const SegmentGrid& grid) {
  return norm_X(apply_A_inverse(x, grid), grid);
}

double inner_minus1(const LiftedState& x, const LiftedState& z, const SegmentGrid& grid) {
  return inner_X(apply_A_inverse(x, grid), apply_A_inverse(z, grid), grid);
}

OperatorMatrix BSpectrum::projection_P(int N) const {
  if (N < 0 || N > size()) throw InvalidArgument("projection_P: N out of range");
  OperatorMatrix p;
  p.weight_metric = weight_metric;
  const auto& F = eigenvectors_X;
  p.entries = F.leftCols(N) * F.leftCols(N).transpose() * weight_metric.asDiagonal();
  return p;
}

OperatorMatrix BSpectrum::projection_Q(int N) const {
  OperatorMatrix p = projection_P(N);
  p.entries = Eigen::MatrixXd::Identity(p.dim(), p.dim()) - p.entries;
  return p;
}

double BSpectrum::coordinate(const Eigen::VectorXd& flat_x, int i) const {
  if (i < 0 || i >= size()) throw InvalidArgument("BSpectrum::coordinate: index out of range");
  double fx = eigenvectors_X.col(i).dot(weight_metric.cwiseProduct(flat_x));
  return std::sqrt(eigenvalues[i]) * fx;
}

BSpectrum spectrum_B(const OperatorMatrix& B, double tol) {
  const Eigen::VectorXd& w = B.weight_metric;
  if (w.size() != B.dim()) throw InvalidArgument("spectrum_B: metric size mismatch");
  Eigen::VectorXd s = w.cwiseSqrt();
  Eigen::MatrixXd sym = s.asDiagonal() * B.entries * s.cwiseInverse().asDiagonal();
  sym = 0.5 * (sym + sym.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "spectrum_B: eigensolver did not converge (dimension " << B.dim() << ", info "
        << static_cast<int>(es.info()) << ")";
    throw NumericalError(msg.str());
  }
  const int N = B.dim();
  BSpectrum out;
  out.weight_metric = w;
  out.eigenvalues.resize(N);
  out.eigenvectors_X.resize(N, N);
  out.eigenvectors_minus1.resize(N, N);
  for (int i = 0; i < N; ++i) {
    int src = N - 1 - i;  // Eigen sorts ascending
    double lam = es.eigenvalues()(src);
    out.eigenvalues[i] = lam;
    out.eigenvectors_X.col(i) = s.cwiseInverse().asDiagonal() * es.eigenvectors().col(src);
  }
  double scale = std::max(1.0, std::abs(out.eigenvalues.front()));
  if (!(out.eigenvalues.back() > tol * scale)) {
    std::ostringstream msg;
    msg << "spectrum_B: operator is not strictly positive (smallest eigenvalue "
        << out.eigenvalues.back() << ")";
    throw NumericalError(msg.str());
  }
  for (int i = 0; i < N; ++i)
    out.eigenvectors_minus1.col(i) = out.eigenvectors_X.col(i) / std::sqrt(out.eigenvalues[i]);
  return out;
}

WeakBReport check_weak_B(const OperatorMatrix& B, const SegmentGrid& grid, int samples,
                         std::uint64_t seed, double tolerance) {
  const int N = B.dim();
  const int n = N / (1 + grid.m);
  if (n * (1 + grid.m) != N) throw InvalidArgument("check_weak_B: B does not match the grid");
  OperatorMatrix ainv = a_inverse_matrix(grid, n);
  OperatorMatrix a{ainv.entries.inverse(), ainv.weight_metric};
  Eigen::MatrixXd lhs = a.adjoint().entries * B.entries;  // A* B
  const Eigen::VectorXd& w = B.weight_metric;

  WeakBReport rep;
  rep.tolerance = tolerance;
  rep.max_ratio = -std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  for (int s = 0; s < samples; ++s) {
    Eigen::VectorXd x(N);
    for (int i = 0; i < N; ++i) x(i) = normal(rng);
    if (x.norm() == 0.0) continue;  // zero state carries no information
    x /= std::sqrt(x.dot(w.cwiseProduct(x)));
    Eigen::VectorXd ax = ainv.entries * x;
    double denom = ax.dot(w.cwiseProduct(ax));
    double num = (lhs * x).dot(w.cwiseProduct(x));
    double ratio = num / denom;
    ++rep.samples;
    if (ratio > rep.max_ratio) {
      rep.max_ratio = ratio;
      rep.worst_sample = s;
    }
  }
  rep.pass = rep.samples > 0 && rep.max_ratio <= tolerance;
  return rep;
}

void dump_operator_csv(const OperatorMatrix& op, std::ostream& out) {
  out << "i,j,value\n";
  out.precision(17);
  for (int i = 0; i < op.dim(); ++i)
    for (int j = 0; j < op.dim(); ++j) out << i << ',' << j << ',' << op.entries(i, j) << '\n';
}

LiftedState random_state(int n, const SegmentGrid& grid, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  LiftedState s = LiftedState::zero(n, grid.m);
  for (int j = 0; j < n; ++j) s.x0(j) = normal(rng);
  for (int k = 0; k < grid.m; ++k)
    for (int j = 0; j < n; ++j) s.x1(k, j) = normal(rng);
  return s;
}

OperatorAudit audit_operators(const SegmentGrid& grid, int n, int samples, std::uint64_t seed, double identity_tol,
                              double weak_tol) {
  OperatorAudit a;
  a.samples = samples;
  OperatorMatrix B = build_B(grid, n);
  std::mt19937_64 rng(seed);
  for (int s = 0; s < samples; ++s) {
    LiftedState x = random_state(n, grid, rng);
    double w = norm_minus1(x, grid);
    double w2 = w * w;
    double bx = inner_X(B.apply(x), x, grid);
    a.identity_rel_error = std::max(a.identity_rel_error, std::abs(w2 - bx) / w2);
    a.present_ratio = std::max(a.present_ratio, x.x0.norm() / w);
  }
  a.weak_B = check_weak_B(B, grid, samples, seed + 1, weak_tol);
  a.pass = a.identity_rel_error <= identity_tol && a.present_ratio <= 1.0 + 1e-12 && a.weak_B.pass;
  return a;
}

}  // namespace delay_hjb
