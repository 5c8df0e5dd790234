#include "delay_hjb/regularization.hpp"

#include <boost/math/tools/minima.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <ostream>
#include <random>

#include "delay_hjb/errors.hpp"
#include "delay_hjb/parallel.hpp"

namespace delay_hjb {

namespace {

struct Minimizer {
  const LagFunction& f;
  const LagSpace& space;
  const Eigen::MatrixXd& G;
  std::vector<Eigen::VectorXd> directions;
  double epsilon;
  EnvelopeSearch search;

  double objective(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
    Eigen::VectorXd v = x - y;
    return f(y) + v.dot(G * v) / (2.0 * epsilon);
  }

  // Parameter range keeping y + t dir inside the box.
  std::pair<double, double> range(const Eigen::VectorXd& y, const Eigen::VectorXd& dir) const {
    double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
    for (int d = 0; d < y.size(); ++d) {
      if (std::abs(dir(d)) < 1e-15) continue;
      double a = (space.lo(d) - y(d)) / dir(d), b = (space.hi(d) - y(d)) / dir(d);
      lo = std::max(lo, std::min(a, b));
      hi = std::min(hi, std::max(a, b));
    }
    return {std::min(lo, 0.0), std::max(hi, 0.0)};
  }

  void minimize(const Eigen::VectorXd& x, double& value, Eigen::VectorXd& argmin) const {
    const int D = space.dims();
    Eigen::VectorXd best = x.cwiseMax(space.lo).cwiseMin(space.hi);
    double best_val = objective(x, best);
    // coarse scan
    const int P = std::max(2, search.scan_points);
    std::vector<int> idx(D, 0);
    while (true) {
      Eigen::VectorXd y(D);
      for (int d = 0; d < D; ++d) y(d) = space.lo(d) + (space.hi(d) - space.lo(d)) * idx[d] / (P - 1);
      double val = objective(x, y);
      if (val < best_val) {
        best_val = val;
        best = y;
      }
      int d = 0;
      while (d < D && ++idx[d] == P) idx[d++] = 0;
      if (d == D) break;
    }
    // coordinate descent with Brent line searches
    for (int sweep = 0; sweep < search.max_sweeps; ++sweep) {
      const double start = best_val;
      for (const auto& dir : directions) {
        auto [lo, hi] = range(best, dir);
        if (!(hi > lo)) continue;
        auto line = [&](double t) { return objective(x, best + t * dir); };
        auto [t, val] = boost::math::tools::brent_find_minima(line, lo, hi, std::numeric_limits<double>::digits);
        if (val < best_val) {
          best_val = val;
          best = (best + t * dir).cwiseMax(space.lo).cwiseMin(space.hi);
        }
      }
      if (start - best_val <= search.tolerance * 1e-4 * (1.0 + std::abs(best_val))) break;
    }
    value = best_val;
    argmin = best;
  }
};

Minimizer make_minimizer(const LagFunction& f, const LagSpace& space, const Eigen::MatrixXd& G, double epsilon,
                         const EnvelopeSearch& search) {
  if (!(epsilon > 0.0)) throw InvalidArgument("envelope: epsilon must be positive");
  if (space.lo.size() != space.dims() || space.hi.size() != space.dims())
    throw InvalidArgument("envelope: search box does not match the lag dimension");
  Minimizer m{f, space, G, {}, epsilon, search};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  for (int i = 0; i < G.rows(); ++i) m.directions.push_back(es.eigenvectors().col(i));
  for (int i = 0; i < G.rows(); ++i) m.directions.push_back(Eigen::VectorXd::Unit(G.rows(), i));
  return m;
}

bool on_boundary(const LagSpace& space, const Eigen::VectorXd& y) {
  for (int d = 0; d < y.size(); ++d) {
    double tol = 1e-9 * (space.hi(d) - space.lo(d));
    if (y(d) <= space.lo(d) + tol || y(d) >= space.hi(d) - tol) return true;
  }
  return false;
}

}  // namespace

EnvelopeResult inf_convolution(const LagFunction& f, const LagSpace& space, double epsilon,
                               const std::vector<Eigen::VectorXd>& queries, const EnvelopeSearch& search) {
  Eigen::MatrixXd G = space.gram();
  Minimizer m = make_minimizer(f, space, G, epsilon, search);
  EnvelopeResult r;
  r.epsilon = epsilon;
  const std::size_t Q = queries.size();
  r.values.resize(Q);
  r.argmins.resize(Q);
  r.gaps.resize(Q);
  std::vector<char> boundary(Q, 0);
  parallel_for(Q, [&](std::size_t q) {
    m.minimize(queries[q], r.values[q], r.argmins[q]);
    r.gaps[q] = f(queries[q]) - r.values[q];
    boundary[q] = on_boundary(space, r.argmins[q]) && !on_boundary(space, queries[q]);
  });
  r.boundary_argmin.assign(boundary.begin(), boundary.end());
  for (std::size_t q = 0; q < Q; ++q)
    if (r.boundary_argmin[q])
      spdlog::warn("inf_convolution: argmin for query {} lies on the search box boundary; envelope may be "
                   "underestimated",
                   q);
  return r;
}

EnvelopeResult sup_convolution(const LagFunction& f, const LagSpace& space, double epsilon,
                               const std::vector<Eigen::VectorXd>& queries, const EnvelopeSearch& search) {
  LagFunction neg = [&f](const Eigen::VectorXd& s) { return -f(s); };
  EnvelopeResult r = inf_convolution(neg, space, epsilon, queries, search);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    r.values[q] = -r.values[q];
    r.gaps[q] = -r.gaps[q];
  }
  return r;
}

LagFunction envelope_function(const LagFunction& f, const LagSpace& space, double epsilon,
                              const EnvelopeSearch& search) {
  auto G = std::make_shared<Eigen::MatrixXd>(space.gram());
  auto m = std::make_shared<Minimizer>(make_minimizer(f, space, *G, epsilon, search));
  return [G, m](const Eigen::VectorXd& x) {
    double v;
    Eigen::VectorXd y;
    m->minimize(x, v, y);
    return v;
  };
}

LagSpace central_region(const LagSpace& space, double share) {
  if (!(share > 0.0 && share <= 1.0)) throw InvalidArgument("central_region: share must lie in (0, 1]");
  LagSpace c = space;
  Eigen::VectorXd mid = 0.5 * (space.lo + space.hi), half = 0.5 * share * (space.hi - space.lo);
  c.lo = mid - half;
  c.hi = mid + half;
  return c;
}

SemiconvexityReport semiconvexity_probe(const LagFunction& f, const LagSpace& space, double C, int samples,
                                        std::uint64_t seed, double slack) {
  if (C < 0.0) throw InvalidArgument("semiconvexity_probe: C must be nonnegative");
  Eigen::MatrixXd G = space.gram();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto draw = [&]() {
    Eigen::VectorXd s(space.dims());
    for (int d = 0; d < space.dims(); ++d) s(d) = space.lo(d) + (space.hi(d) - space.lo(d)) * unif(rng);
    return s;
  };
  SemiconvexityReport rep;
  rep.constant = C;
  rep.worst_margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < samples; ++i) {
    Eigen::VectorXd x = draw(), y = draw();
    double lam = unif(rng);
    double fx = f(x), fy = f(y), fm = f(lam * x + (1.0 - lam) * y);
    Eigen::VectorXd v = x - y;
    double modulus = C * lam * (1.0 - lam) * v.dot(G * v);
    double scale = std::abs(fx) + std::abs(fy) + std::abs(fm);
    double margin = lam * fx + (1.0 - lam) * fy - fm + modulus + slack * (1.0 + scale);
    rep.worst_margin = std::min(rep.worst_margin, margin);
    if (margin < 0.0) ++rep.violations;
    ++rep.samples;
  }
  return rep;
}

EnvelopeAudit envelope_convergence_audit(const LagFunction& f, const LagSpace& space, double K,
                                         const std::vector<double>& epsilons,
                                         const std::vector<Eigen::VectorXd>& queries, double slack,
                                         const EnvelopeSearch& search) {
  EnvelopeAudit audit;
  audit.pass = true;
  std::vector<double> sorted = epsilons;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  std::vector<double> prev;
  for (double eps : sorted) {
    EnvelopeResult r = inf_convolution(f, space, eps, queries, search);
    double bound = K * K * eps / 2.0 + slack;
    double sup = 0.0;
    for (std::size_t q = 0; q < queries.size(); ++q) {
      AuditRow row{eps, static_cast<int>(q), r.gaps[q], bound, r.gaps[q] >= -1e-10 && r.gaps[q] <= bound};
      audit.pass = audit.pass && row.pass;
      audit.rows.push_back(row);
      sup = std::max(sup, r.gaps[q]);
      if (!prev.empty() && r.gaps[q] > prev[q] + 1e-10) audit.monotone = false;
    }
    audit.sup_gap.push_back(sup);
    prev = r.gaps;
  }
  audit.pass = audit.pass && audit.monotone;
  return audit;
}

void write_audit_csv(const EnvelopeAudit& audit, std::ostream& out) {
  out << "epsilon,query_id,gap,bound,pass\n";
  for (const auto& r : audit.rows)
    out << r.epsilon << ',' << r.query_id << ',' << r.gap << ',' << r.bound << ',' << (r.pass ? "true" : "false")
        << '\n';
}

std::vector<DerivativeRow> envelope_derivative_audit(const LagFunction& f, const LagSpace& space, double epsilon,
                                                     const std::vector<Eigen::VectorXd>& queries, double step,
                                                     const EnvelopeSearch& search) {
  if (!(step > 0.0)) throw InvalidArgument("envelope_derivative_audit: step must be positive");
  LagFunction env = envelope_function(f, space, epsilon, search);
  auto slope = [&](const LagFunction& g, const Eigen::VectorXd& s, double at) {
    Eigen::VectorXd up = s, dn = s;
    up(0) = std::min(at + step, space.hi(0));
    dn(0) = std::max(at - step, space.lo(0));
    return (g(up) - g(dn)) / (up(0) - dn(0));
  };
  std::vector<DerivativeRow> rows(queries.size());
  parallel_for(queries.size(), [&](std::size_t q) {
    const Eigen::VectorXd& s = queries[q];
    DerivativeRow& row = rows[q];
    row.query_id = static_cast<int>(q);
    row.envelope_slope = slope(env, s, s(0));
    row.field_lo = std::numeric_limits<double>::infinity();
    row.field_hi = -std::numeric_limits<double>::infinity();
    for (int j = -2; j <= 2; ++j) {
      double at = std::clamp(s(0) + j * step, space.lo(0), space.hi(0));
      double g = slope(f, s, at);
      row.field_lo = std::min(row.field_lo, g);
      row.field_hi = std::max(row.field_hi, g);
    }
    double tol = 1e-6 * (1.0 + std::abs(row.envelope_slope));
    row.pass = row.envelope_slope >= row.field_lo - tol && row.envelope_slope <= row.field_hi + tol;
  });
  return rows;
}

// ---------------------------------------------------------------- mollification

void gauss_legendre(int order, std::vector<double>& nodes, std::vector<double>& weights) {
  if (order < 1) throw InvalidArgument("gauss_legendre: order must be positive");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) J(k, k - 1) = J(k - 1, k) = k / std::sqrt(4.0 * k * k - 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  nodes.resize(order);
  weights.resize(order);
  for (int i = 0; i < order; ++i) {
    nodes[i] = es.eigenvalues()(i);
    weights[i] = 2.0 * es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
  }
  // exact symmetry, so odd moments cancel to rounding
  for (int i = 0; i < order / 2; ++i) {
    double a = 0.5 * (nodes[order - 1 - i] - nodes[i]);
    double w = 0.5 * (weights[i] + weights[order - 1 - i]);
    nodes[i] = -a;
    nodes[order - 1 - i] = a;
    weights[i] = weights[order - 1 - i] = w;
  }
  if (order % 2 == 1) nodes[order / 2] = 0.0;
}

MollifiedField::MollifiedField(StateFunction base, const BSpectrum& spectrum, const SegmentGrid& grid, int n,
                               double eta, int k, int order)
    : base_(std::move(base)), grid_(grid), n_(n), eta_(eta), k_(k) {
  if (!(eta > 0.0)) throw InvalidArgument("partial_mollify: eta must be positive");
  if (k < 0 || k > spectrum.size())
    throw InvalidArgument("partial_mollify: k exceeds the number of available eigencoordinates");
  for (int i = 1; i <= k; ++i) {
    widths_.push_back(eta * std::sqrt(spectrum.eigenvalues[i - 1]) / std::ldexp(1.0, i));
    directions_.push_back(spectrum.eigenvectors_minus1.col(i - 1));
  }
  std::vector<double> gl_nodes, gl_weights;
  gauss_legendre(order, gl_nodes, gl_weights);
  double total = 0.0;
  for (int j = 0; j < order; ++j) {
    double t = gl_nodes[j];
    double w = gl_weights[j] * std::exp(-1.0 / (1.0 - t * t));
    nodes_.push_back(t);
    weights_.push_back(w);
    total += w;
  }
  for (double& w : weights_) w /= total;
}

double MollifiedField::width_sum() const {
  double s = 0.0;
  for (double w : widths_) s += w;
  return s;
}

double MollifiedField::operator()(const LiftedState& x) const {
  if (k_ == 0) return base_(x);
  const Eigen::VectorXd flat = x.flatten();
  const int Q = static_cast<int>(nodes_.size());
  std::vector<int> idx(k_, 0);
  double acc = 0.0;
  while (true) {
    Eigen::VectorXd y = flat;
    double w = 1.0;
    for (int i = 0; i < k_; ++i) {
      y += widths_[i] * nodes_[idx[i]] * directions_[i];
      w *= weights_[idx[i]];
    }
    acc += w * base_(LiftedState::unflatten(y, n_, grid_.m));
    int i = 0;
    while (i < k_ && ++idx[i] == Q) idx[i++] = 0;
    if (i == k_) break;
  }
  return acc;
}

MollifiedField partial_mollify(StateFunction base, const BSpectrum& spectrum, const SegmentGrid& grid, int n,
                               double eta, int k, int order) {
  return MollifiedField(std::move(base), spectrum, grid, n, eta, k, order);
}

}  // namespace delay_hjb
