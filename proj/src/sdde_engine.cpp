#include "delay_hjb/sdde_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

#include "delay_hjb/errors.hpp"
#include "delay_hjb/parallel.hpp"

namespace delay_hjb {

// ---------------------------------------------------------------- kernels

KernelSpec KernelSpec::zero(int h, int n, const SegmentGrid& grid) {
  KernelSpec k;
  k.h = h;
  k.n = n;
  k.values.assign(grid.m, Eigen::MatrixXd::Zero(h, n));
  return k;
}

KernelSpec KernelSpec::sample(const SegmentGrid& grid, int h, int n,
                              const std::function<Eigen::MatrixXd(double)>& a) {
  KernelSpec k;
  k.h = h;
  k.n = n;
  k.values.reserve(grid.m);
  for (int i = 0; i < grid.m; ++i) {
    Eigen::MatrixXd v = a(grid.nodes[i]);
    if (v.rows() != h || v.cols() != n) throw InvalidArgument("KernelSpec: kernel value has wrong shape");
    k.values.push_back(v);
  }
  // a(-d) = 0 is part of the model; remove rounding from evaluating at -d.
  if (std::abs(grid.nodes[0] + grid.d) <= 1e-14 * grid.d && k.values[0].cwiseAbs().maxCoeff() < 1e-13)
    k.values[0].setZero();
  return k;
}

void KernelSpec::validate(const SegmentGrid& grid) const {
  if (static_cast<int>(values.size()) != grid.m) throw InvalidArgument("KernelSpec: node count mismatch");
  for (const auto& v : values)
    if (v.rows() != h || v.cols() != n) throw InvalidArgument("KernelSpec: inconsistent shapes");
  if (!values.empty() && values[0].cwiseAbs().maxCoeff() != 0.0)
    throw InvalidArgument("KernelSpec: kernel must vanish at -d");
}

double KernelSpec::derivative_norm(const SegmentGrid& grid) const {
  double s = 0.0;
  for (int i = 0; i + 1 < grid.m; ++i) {
    double dx = grid.nodes[i + 1] - grid.nodes[i];
    s += (values[i + 1] - values[i]).squaredNorm() / dx;
  }
  return std::sqrt(s);
}

bool KernelSpec::nonnegative() const {
  for (const auto& v : values)
    if (v.minCoeff() < 0.0) return false;
  return true;
}

bool KernelSpec::nonpositive() const {
  for (const auto& v : values)
    if (v.maxCoeff() > 0.0) return false;
  return true;
}

bool KernelSpec::is_zero() const {
  for (const auto& v : values)
    if (v.cwiseAbs().maxCoeff() != 0.0) return false;
  return true;
}

Eigen::VectorXd KernelSpec::integrate(const SegmentGrid& grid, const Eigen::MatrixXd& seg) const {
  if (seg.rows() != grid.m || seg.cols() != n) throw InvalidArgument("KernelSpec::integrate: shape mismatch");
  Eigen::VectorXd z = Eigen::VectorXd::Zero(h);
  for (int i = 0; i < grid.m; ++i) z.noalias() += grid.weights[i] * (values[i] * seg.row(i).transpose());
  return z;
}

// ---------------------------------------------------------------- controls

ControlSet ControlSet::box(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, bool upper_open) {
  if (lo.size() != hi.size() || lo.size() == 0) throw InvalidArgument("ControlSet::box: bad bounds");
  for (int j = 0; j < lo.size(); ++j)
    if (!(lo(j) <= hi(j))) throw InvalidArgument("ControlSet::box: lo > hi");
  ControlSet c;
  c.kind = Kind::Box;
  c.lo = lo;
  c.hi = hi;
  c.upper_open = upper_open;
  return c;
}

ControlSet ControlSet::finite(std::vector<Eigen::VectorXd> points) {
  if (points.empty()) throw InvalidArgument("ControlSet::finite: empty set");
  ControlSet c;
  c.kind = Kind::Finite;
  std::sort(points.begin(), points.end(), [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
  });
  c.points = std::move(points);
  return c;
}

int ControlSet::dim() const {
  return kind == Kind::Box ? static_cast<int>(lo.size()) : static_cast<int>(points.front().size());
}

double ControlSet::cell_width(int per_dim, int axis) const {
  if (kind != Kind::Box) return 0.0;
  double span = hi(axis) - lo(axis);
  if (upper_open) return span / per_dim;
  return per_dim > 1 ? span / (per_dim - 1) : span;
}

std::vector<Eigen::VectorXd> ControlSet::mesh(int per_dim) const {
  if (kind == Kind::Finite) return points;
  if (per_dim < 1) throw InvalidArgument("ControlSet::mesh: need at least one point per axis");
  const int p = dim();
  std::vector<std::vector<double>> axes(p);
  for (int j = 0; j < p; ++j) {
    double w = cell_width(per_dim, j);
    for (int i = 0; i < per_dim; ++i) axes[j].push_back(lo(j) + w * i);
    if (!upper_open && per_dim > 1) axes[j].back() = hi(j);
  }
  std::vector<Eigen::VectorXd> out;
  std::vector<int> idx(p, 0);
  while (true) {
    Eigen::VectorXd u(p);
    for (int j = 0; j < p; ++j) u(j) = axes[j][idx[j]];
    out.push_back(u);
    int j = p - 1;
    while (j >= 0 && ++idx[j] == per_dim) idx[j--] = 0;
    if (j < 0) break;
  }
  return out;
}

bool ControlSet::contains(const Eigen::VectorXd& u) const {
  if (u.size() != dim()) return false;
  if (kind == Kind::Finite) {
    for (const auto& pt : points)
      if ((pt - u).cwiseAbs().maxCoeff() == 0.0) return true;
    return false;
  }
  for (int j = 0; j < u.size(); ++j) {
    if (u(j) < lo(j)) return false;
    if (upper_open ? !(u(j) < hi(j)) : u(j) > hi(j)) return false;
  }
  return true;
}

// ---------------------------------------------------------------- problem

void ProblemSpec::check_dims() const {
  if (n < 1 || h < 1 || q < 1 || p < 1) throw InvalidArgument("ProblemSpec: dimensions must be positive");
  grid.validate();
  if (!drift || !diffusion || !cost) throw InvalidArgument("ProblemSpec: drift, diffusion and cost are required");
  if (a1.h != h || a1.n != n || a2.h != h || a2.n != n)
    throw InvalidArgument("ProblemSpec: kernel shapes must be h x n");
  a1.validate(grid);
  a2.validate(grid);
  if (!(rho > 0.0)) throw InvalidArgument("ProblemSpec: rho must be positive");
  if (controls.dim() != p) throw InvalidArgument("ProblemSpec: control set dimension must equal p");
}

double rho0_threshold(double C, double B_norm) {
  return std::max(C + C * C / 2.0, C + C * C * B_norm / 2.0);
}

SpecDiagnostics validate_spec(const ProblemSpec& spec, std::uint64_t seed, int probes) {
  spec.check_dims();
  SpecDiagnostics diag;
  OperatorMatrix B = build_B(spec.grid, spec.n);
  diag.B_norm = B.metric_norm();
  diag.rho0 = rho0_threshold(spec.lipschitz_C, diag.B_norm);
  if (!(spec.rho > diag.rho0)) {
    std::ostringstream msg;
    msg << "rho = " << spec.rho << " does not exceed rho_0 = " << diag.rho0
        << " computed from the declared constant C = " << spec.lipschitz_C;
    if (spec.strict_rho) throw ConfigError(msg.str());
    diag.warnings.push_back(msg.str());
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  auto mesh = spec.controls.mesh(std::min(spec.control_mesh, 5));
  std::uniform_int_distribution<std::size_t> pick(0, mesh.size() - 1);
  Eigen::VectorXd bx(spec.n), by(spec.n);
  Eigen::MatrixXd sx(spec.n, spec.q), sy(spec.n, spec.q);
  for (int s = 0; s < probes; ++s) {
    LiftedState x = random_state(spec.n, spec.grid, rng);
    LiftedState y = random_state(spec.n, spec.grid, rng);
    const Eigen::VectorXd& u = mesh[pick(rng)];
    LiftedState diff = x - y;
    double dist2 = inner_minus1(diff, diff, spec.grid);
    if (!(dist2 > 0.0)) continue;
    spec.drift(x.x0, spec.a1.integrate(spec.grid, x.x1), u, bx);
    spec.drift(y.x0, spec.a1.integrate(spec.grid, y.x1), u, by);
    // lifted drift: (b0 + x0, 0)
    LiftedState db = LiftedState::zero(spec.n, spec.grid.m);
    db.x0 = (bx + x.x0) - (by + y.x0);
    diag.probed_drift_C = std::max(diag.probed_drift_C, inner_minus1(db, diff, spec.grid) / dist2);
    spec.diffusion(x.x0, spec.a2.integrate(spec.grid, x.x1), sx);
    spec.diffusion(y.x0, spec.a2.integrate(spec.grid, y.x1), sy);
    diag.probed_diffusion_C = std::max(diag.probed_diffusion_C, (sx - sy).norm() / std::sqrt(dist2));
  }
  double probed = std::max(diag.probed_drift_C, diag.probed_diffusion_C);
  if (probed > spec.lipschitz_C * (1.0 + 1e-9)) {
    std::ostringstream msg;
    msg << "declared C = " << spec.lipschitz_C << " is below the probed constant " << probed;
    diag.warnings.push_back(msg.str());
  }
  return diag;
}

// ---------------------------------------------------------------- control sources

ControlSource ControlSource::constant(const Eigen::VectorXd& u) {
  ControlSource c;
  c.schedule = [u](double, Eigen::VectorXd& out) { out = u; };
  return c;
}

ControlSource ControlSource::piecewise(std::vector<Eigen::VectorXd> levels, double T) {
  if (levels.empty() || !(T > 0.0)) throw InvalidArgument("ControlSource::piecewise: bad levels or horizon");
  ControlSource c;
  const double width = T / static_cast<double>(levels.size());
  c.schedule = [levels = std::move(levels), width](double t, Eigen::VectorXd& out) {
    // small guard keeps lattice times that sit on a piece boundary in the later piece
    auto i = static_cast<std::size_t>(std::max(0.0, std::floor(t / width + 1e-9)));
    out = levels[std::min(i, levels.size() - 1)];
  };
  return c;
}

ControlSource ControlSource::open_loop(Schedule s) {
  ControlSource c;
  c.schedule = std::move(s);
  return c;
}

ControlSource ControlSource::policy(Feedback f) {
  ControlSource c;
  c.feedback = std::move(f);
  return c;
}

// ---------------------------------------------------------------- integration

double Path::noise_checksum() const {
  double s = 0.0;
  for (int i = 0; i < noise.rows(); ++i)
    for (int j = 0; j < noise.cols(); ++j) s += noise(i, j) * (1.0 + 1e-3 * ((i * 31 + j) % 97));
  return s;
}

namespace {

int lattice_ratio(const SegmentGrid& grid, double dt) {
  if (!(dt > 0.0)) throw InvalidArgument("integrate: dt must be positive");
  double r = grid.spacing() / dt;
  double rr = std::round(r);
  if (rr < 1.0 || std::abs(r - rr) > 1e-9 * r)
    throw InvalidArgument("integrate: dt must divide the segment node spacing");
  return static_cast<int>(rr);
}

int lattice_steps(double T, double dt) {
  if (!(T > 0.0)) throw InvalidArgument("integrate: horizon must be positive");
  double s = T / dt;
  double ss = std::round(s);
  if (std::abs(s - ss) > 1e-9 * std::max(1.0, s)) throw InvalidArgument("integrate: T must be a multiple of dt");
  return static_cast<int>(ss);
}

// Initial segment at lattice offset -j (time -j dt), linear between nodes.
Eigen::RowVectorXd initial_at_offset(const LiftedState& x, int j, int ratio) {
  const int m = x.m();
  int cell = j / ratio, rem = j % ratio;
  int node = m - 1 - cell;
  if (rem == 0) return x.x1.row(node);
  double frac = static_cast<double>(rem) / ratio;  // toward node - 1
  return (1.0 - frac) * x.x1.row(node) + frac * x.x1.row(node - 1);
}

}  // namespace

Path integrate(const ProblemSpec& spec, const LiftedState& x, const ControlSource& control, double T,
               double dt, std::uint64_t seed, std::uint64_t path_id, const IntegrateOptions& options) {
  const SegmentGrid& grid = spec.grid;
  check_dims(x, grid);
  if (x.n() != spec.n) throw InvalidArgument("integrate: state dimension mismatch");
  if (!control.schedule && !control.feedback) throw InvalidArgument("integrate: empty control source");
  const int r = lattice_ratio(grid, dt);
  const int steps = lattice_steps(T, dt);
  const int n = spec.n, m = grid.m;
  const int H = (m - 1) * r + 1;

  std::vector<Eigen::MatrixXd> G1(m), G2(m);
  bool use_a1 = !spec.a1.is_zero(), use_a2 = !spec.a2.is_zero();
  for (int i = 0; i < m; ++i) {
    G1[i] = grid.weights[i] * spec.a1.values[i];
    G2[i] = grid.weights[i] * spec.a2.values[i];
  }

  Path path;
  path.dt = dt;
  path.ratio = r;
  path.initial = x;
  path.present.resize(steps + 1, n);
  path.controls.resize(steps, spec.p);
  if (options.keep_noise) path.noise.resize(steps, spec.q);

  Eigen::MatrixXd ring(H, n);
  int head = 0;
  auto slot = [&](int j) { return (head - j + H) % H; };
  // fill so that slot(j) holds lattice offset -j
  for (int j = 0; j < H; ++j) ring.row((H - j) % H) = initial_at_offset(x, j, r);

  auto segment = [&](Eigen::MatrixXd& seg) {
    for (int i = 0; i < m; ++i) seg.row(i) = ring.row(slot((m - 1 - i) * r));
  };

  std::mt19937_64 rng(stream_seed(seed, path_id));
  std::normal_distribution<double> normal;
  const double sdt = std::sqrt(dt);
  const bool need_state = control.is_feedback() || static_cast<bool>(options.observer);

  Eigen::VectorXd y = x.x0, u(spec.p), b(n), z1(spec.h), z2(spec.h), dW(spec.q), y_next(n);
  Eigen::MatrixXd sig(n, spec.q);
  LiftedState Y = LiftedState::zero(n, m);
  Eigen::MatrixXd snap(m, n);
  path.present.row(0) = y.transpose();
  if (options.record_every > 0) {
    segment(snap);
    path.segment_snapshots.emplace_back(0, snap);
  }

  int done = steps;
  for (int k = 0; k <= steps; ++k) {
    const double t = k * dt;
    if (need_state) {
      Y.x0 = y;
      segment(Y.x1);
    }
    if (k == steps) {
      if (options.observer) options.observer(k, t, Y, u);
      break;
    }
    if (control.is_feedback()) {
      try {
        control.feedback(Y, t, u);
      } catch (const std::exception& e) {
        std::ostringstream msg;
        msg << "integrate: policy evaluation failed at step " << k << ": " << e.what();
        throw NumericalError(msg.str());
      }
    } else
      control.schedule(t, u);
    if (u.size() != spec.p) throw InvalidArgument("integrate: control has wrong dimension");
    if (options.observer && !options.observer(k, t, Y, u)) {
      done = k;
      break;
    }
    z1.setZero();
    z2.setZero();
    for (int i = 0; i < m; ++i) {
      const auto row = ring.row(slot((m - 1 - i) * r)).transpose();
      if (use_a1) z1.noalias() += G1[i] * row;
      if (use_a2) z2.noalias() += G2[i] * row;
    }
    spec.drift(y, z1, u, b);
    spec.diffusion(y, z2, sig);
    if (!b.allFinite() || !sig.allFinite()) {
      std::ostringstream msg;
      msg << "integrate: non-finite drift or diffusion at step " << k;
      throw NumericalError(msg.str());
    }
    for (int j = 0; j < spec.q; ++j) dW(j) = sdt * normal(rng);
    y_next = y + b * dt + sig * dW;
    if (!y_next.allFinite()) {
      std::ostringstream msg;
      msg << "integrate: state became non-finite at step " << k;
      throw NumericalError(msg.str());
    }
    path.controls.row(k) = u.transpose();
    if (options.keep_noise) path.noise.row(k) = dW.transpose();
    // the newest slot held the segment value at t_k; from now on it is the path value
    ring.row(head) = y.transpose();
    head = (head + 1) % H;
    ring.row(head) = y_next.transpose();
    y = y_next;
    path.present.row(k + 1) = y.transpose();
    if (options.record_every > 0 && (k + 1) % options.record_every == 0) {
      segment(snap);
      path.segment_snapshots.emplace_back(k + 1, snap);
    }
  }

  if (done < steps) {
    path.present.conservativeResize(done + 1, n);
    path.controls.conservativeResize(done, spec.p);
    if (options.keep_noise) path.noise.conservativeResize(done, spec.q);
  }
  path.steps = done;
  path.times.resize(done + 1);
  for (int k = 0; k <= done; ++k) path.times[k] = k * dt;
  path.history.resize(H, n);
  for (int j = 0; j < H; ++j) path.history.row(H - 1 - j) = ring.row(slot(j));
  return path;
}

LiftedState lift_trajectory(const Path& path, double t, const SegmentGrid& grid) {
  check_dims(path.initial, grid);
  double s = t / path.dt;
  double ks = std::round(s);
  if (t < 0.0 || std::abs(s - ks) > 1e-9 * std::max(1.0, s) || ks > path.steps)
    throw InvalidArgument("lift_trajectory: t is not a lattice time of the path");
  const int k = static_cast<int>(ks);
  const int m = grid.m, r = path.ratio;
  LiftedState Y = LiftedState::zero(path.initial.n(), m);
  Y.x0 = path.present.row(k).transpose();
  if (k == 0) return path.initial;
  for (int i = 0; i < m; ++i) {
    int tau = k - (m - 1 - i) * r;  // lattice index of t + node
    if (tau >= 0)
      Y.x1.row(i) = path.present.row(tau);
    else
      Y.x1.row(i) = initial_at_offset(path.initial, -tau, r);
  }
  return Y;
}

double discounted_cost(const ProblemSpec& spec, const Path& path) {
  double total = 0.0;
  Eigen::VectorXd ya, yb, u;
  for (int k = 0; k < path.steps; ++k) {
    ya = path.present.row(k).transpose();
    yb = path.present.row(k + 1).transpose();
    u = path.controls.row(k).transpose();
    double ta = path.times[k], tb = path.times[k + 1];
    total += 0.5 * path.dt * (std::exp(-spec.rho * ta) * spec.cost(ya, u) + std::exp(-spec.rho * tb) * spec.cost(yb, u));
  }
  return total;
}

void write_path_csv(const Path& path, std::ostream& out) {
  const int n = static_cast<int>(path.present.cols());
  const int p = static_cast<int>(path.controls.cols());
  out << "t";
  for (int j = 0; j < n; ++j) out << ",y_" << j + 1;
  for (int j = 0; j < p; ++j) out << ",u_" << j + 1;
  out << '\n';
  out.precision(12);
  for (int k = 0; k <= path.steps; ++k) {
    out << path.times[k];
    for (int j = 0; j < n; ++j) out << ',' << path.present(k, j);
    int kc = std::min(k, path.steps - 1);
    for (int j = 0; j < p; ++j) out << ',' << (kc >= 0 ? path.controls(kc, j) : 0.0);
    out << '\n';
  }
}

// ---------------------------------------------------------------- comparison

MonotonicityWitness probe_comparison_hypotheses(const ProblemSpec& spec, int probes, std::uint64_t seed) {
  spec.check_dims();
  MonotonicityWitness w;
  std::ostringstream msg;
  msg.precision(6);
  for (int k = 0; k < spec.grid.m; ++k) {
    if (spec.a1.values[k].minCoeff() < 0.0) {
      msg << "kernel a1 is negative at node " << k << " (xi = " << spec.grid.nodes[k] << ")";
      return {true, msg.str()};
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  auto mesh = spec.controls.mesh(std::min(spec.control_mesh, 5));
  std::uniform_int_distribution<std::size_t> pick(0, mesh.size() - 1);
  const int n = spec.n, h = spec.h;
  auto rand_vec = [&](int len, double scale) {
    Eigen::VectorXd v(len);
    for (int i = 0; i < len; ++i) v(i) = scale * normal(rng);
    return v;
  };
  Eigen::VectorXd bx(n), by(n);
  Eigen::MatrixXd s0(n, spec.q), s1(n, spec.q);
  spec.diffusion(Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(h), s0);
  const double C = spec.lipschitz_C;
  for (int s = 0; s < probes; ++s) {
    const Eigen::VectorXd& u = mesh[pick(rng)];
    Eigen::VectorXd x = rand_vec(n, 2.0), z = rand_vec(h, 2.0);
    spec.diffusion(x, z, s1);
    if ((s1 - s0).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + s0.cwiseAbs().maxCoeff())) {
      msg << "diffusion is not constant: sigma(" << x.transpose() << ") differs from sigma(0)";
      return {true, msg.str()};
    }
    // drift nondecreasing in z
    Eigen::VectorXd z2 = z + rand_vec(h, 1.0).cwiseAbs();
    spec.drift(x, z, u, bx);
    spec.drift(x, z2, u, by);
    for (int i = 0; i < n; ++i) {
      if (bx(i) > by(i) + 1e-10 * (1.0 + std::abs(by(i)))) {
        msg << "drift component " << i << " decreases in z: z = " << z.transpose() << " -> "
            << z2.transpose() << " at x = " << x.transpose();
        return {true, msg.str()};
      }
    }
    // one-sided bound, random pair and a pair differing in one other component
    for (int mode = 0; mode < 2; ++mode) {
      Eigen::VectorXd y = x + rand_vec(n, 1.0);
      int i_only = -1;
      if (mode == 1) {
        if (n < 2) break;
        y = x;
        int j = static_cast<int>(s % n);
        y(j) += std::abs(normal(rng)) + 0.1;
        i_only = (j + 1) % n;
      }
      spec.drift(x, z, u, bx);
      spec.drift(y, z, u, by);
      Eigen::VectorXd dpos = (x - y).cwiseMax(0.0);
      for (int i = 0; i < n; ++i) {
        if (i_only >= 0 && i != i_only) continue;
        double lhs = bx(i) - by(i);
        double rhs = C * (dpos.norm() + std::abs(x(i) - y(i)));
        if (lhs > rhs + 1e-10 * (1.0 + std::abs(lhs))) {
          msg << "one-sided drift bound fails for component " << i << ": x = " << x.transpose()
              << ", y = " << y.transpose() << ", lhs = " << lhs << " > " << rhs;
          return {true, msg.str()};
        }
      }
    }
  }
  return w;
}

ComparisonReport compare_paths(const ProblemSpec& spec, const LiftedState& x_low, const LiftedState& x_high,
                               const ControlSource& control, double T, double dt, int paths,
                               std::uint64_t seed) {
  MonotonicityWitness wit = probe_comparison_hypotheses(spec, 400, seed ^ 0x5eedULL);
  if (wit.found) throw PreconditionError("compare_paths: " + wit.description);
  if ((x_low.x0 - x_high.x0).maxCoeff() > 0.0 || (x_low.x1 - x_high.x1).maxCoeff() > 0.0)
    throw InvalidArgument("compare_paths: x_low must be componentwise <= x_high");
  if (paths < 1) throw InvalidArgument("compare_paths: need at least one path");

  std::vector<double> worst(paths, -std::numeric_limits<double>::infinity());
  std::vector<char> same_noise(paths, 1);
  parallel_for(static_cast<std::size_t>(paths), [&](std::size_t i) {
    Path lo = integrate(spec, x_low, control, T, dt, seed, i);
    Path hi = integrate(spec, x_high, control, T, dt, seed, i);
    same_noise[i] = (lo.noise.rows() == hi.noise.rows() && lo.noise_checksum() == hi.noise_checksum()) ? 1 : 0;
    worst[i] = (lo.present - hi.present).maxCoeff();
  });
  ComparisonReport rep;
  rep.paths = paths;
  rep.slack = 5.0 * dt * spec.lipschitz_C;
  rep.max_violation = *std::max_element(worst.begin(), worst.end());
  rep.coupled = std::all_of(same_noise.begin(), same_noise.end(), [](char c) { return c != 0; });
  rep.pass = rep.coupled && rep.max_violation <= rep.slack;
  return rep;
}

// ---------------------------------------------------------------- Dynkin

SmoothTestFunction constant_test_function(double c, int n, const SegmentGrid& grid) {
  SmoothTestFunction f;
  f.name = "constant";
  const int m = grid.m;
  f.value = [c](const LiftedState&) { return c; };
  f.gradient = [n, m](const LiftedState&) { return LiftedState::zero(n, m); };
  f.astar_gradient = f.gradient;
  f.hessian_x0 = [n](const LiftedState&) { return Eigen::MatrixXd::Zero(n, n); };
  return f;
}

SmoothTestFunction present_test_function(int component, int n, const SegmentGrid& grid) {
  if (component < 0 || component >= n) throw InvalidArgument("present_test_function: bad component");
  SmoothTestFunction f;
  f.name = "present";
  const int m = grid.m;
  f.value = [component](const LiftedState& x) { return x.x0(component); };
  f.gradient = [=](const LiftedState&) {
    LiftedState g = LiftedState::zero(n, m);
    g.x0(component) = 1.0;
    return g;
  };
  // D_{x1} phi = 0, so A* D phi = (0 - e_c, 0)
  f.astar_gradient = [=](const LiftedState&) {
    LiftedState g = LiftedState::zero(n, m);
    g.x0(component) = -1.0;
    return g;
  };
  f.hessian_x0 = [n](const LiftedState&) { return Eigen::MatrixXd::Zero(n, n); };
  return f;
}

SmoothTestFunction moment_test_function(std::string name, int component, int n, const SegmentGrid& grid,
                                        std::vector<SegmentWeight> weights, MomentFunction psi) {
  if (component < 0 || component >= n) throw InvalidArgument("moment_test_function: bad component");
  const int m = grid.m;
  const int J = static_cast<int>(weights.size());
  Eigen::MatrixXd g(m, J), dg(m, J);
  Eigen::VectorXd g_end(J);
  for (int j = 0; j < J; ++j) {
    if (std::abs(weights[j].g(-grid.d)) > 1e-12)
      throw InvalidArgument("moment_test_function: weight must vanish at -d");
    for (int k = 0; k < m; ++k) {
      g(k, j) = weights[j].g(grid.nodes[k]);
      dg(k, j) = weights[j].dg(grid.nodes[k]);
    }
    g_end(j) = weights[j].g(0.0);
  }
  Eigen::VectorXd w(m);
  for (int k = 0; k < m; ++k) w(k) = grid.weights[k];

  auto args = [=](const LiftedState& x) {
    Eigen::VectorXd v(J + 1);
    v(0) = x.x0(component);
    for (int j = 0; j < J; ++j) v(j + 1) = (w.array() * g.col(j).array() * x.x1.col(component).array()).sum();
    return v;
  };
  SmoothTestFunction f;
  f.name = std::move(name);
  f.value = [=](const LiftedState& x) { return psi.value(args(x)); };
  f.gradient = [=](const LiftedState& x) {
    Eigen::VectorXd dpsi = psi.gradient(args(x));
    LiftedState out = LiftedState::zero(n, m);
    out.x0(component) = dpsi(0);
    out.x1.col(component) = g * dpsi.tail(J);
    return out;
  };
  f.astar_gradient = [=](const LiftedState& x) {
    Eigen::VectorXd dpsi = psi.gradient(args(x));
    LiftedState out = LiftedState::zero(n, m);
    out.x0(component) = g_end.dot(dpsi.tail(J)) - dpsi(0);
    out.x1.col(component) = -(dg * dpsi.tail(J));
    return out;
  };
  f.hessian_x0 = [=](const LiftedState& x) {
    Eigen::MatrixXd hs = Eigen::MatrixXd::Zero(n, n);
    hs(component, component) = psi.d2_present(args(x));
    return hs;
  };
  return f;
}

std::vector<DynkinResult> dynkin_residuals(const ProblemSpec& spec, const std::vector<SmoothTestFunction>& phis,
                                           const LiftedState& x, const ControlSource& control, double t,
                                           double R, double dt, int paths, std::uint64_t seed) {
  if (paths < 2) throw InvalidArgument("dynkin_residual: need at least two paths");
  if (!(R > 0.0)) throw InvalidArgument("dynkin_residual: radius must be positive");
  const int F = static_cast<int>(phis.size());
  const SegmentGrid& grid = spec.grid;
  std::vector<double> phi0(F);
  for (int f = 0; f < F; ++f) phi0[f] = phis[f].value(x);

  Eigen::MatrixXd defects(paths, F);
  std::vector<char> stopped(paths, 0);
  parallel_for(static_cast<std::size_t>(paths), [&](std::size_t pi) {
    std::vector<double> integral(F, 0.0), terminal(F, 0.0);
    bool hit = false;
    Eigen::VectorXd b(spec.n);
    Eigen::MatrixXd sig(spec.n, spec.q);
    IntegrateOptions opt;
    opt.keep_noise = false;
    opt.observer = [&](int k, double tk, const LiftedState& Y, const Eigen::VectorXd& u) {
      const double disc = std::exp(-spec.rho * tk);
      const bool last = (k == static_cast<int>(std::lround(t / dt)));
      if (last || norm_X(Y, grid) > R) {
        for (int f = 0; f < F; ++f) terminal[f] = disc * phis[f].value(Y);
        hit = !last;
        return false;
      }
      spec.drift(Y.x0, spec.a1.integrate(grid, Y.x1), u, b);
      spec.diffusion(Y.x0, spec.a2.integrate(grid, Y.x1), sig);
      Eigen::MatrixXd cov = sig * sig.transpose();
      for (int f = 0; f < F; ++f) {
        const auto& phi = phis[f];
        LiftedState grad = phi.gradient(Y);
        double gen = -spec.rho * phi.value(Y) + inner_X(Y, phi.astar_gradient(Y), grid) +
                     (b + Y.x0).dot(grad.x0) + 0.5 * (cov.cwiseProduct(phi.hessian_x0(Y))).sum();
        if (!std::isfinite(gen)) throw NumericalError("dynkin_residual: non-finite generator value");
        integral[f] += disc * gen * dt;
      }
      return true;
    };
    integrate(spec, x, control, t, dt, seed, pi, opt);
    for (int f = 0; f < F; ++f) defects(pi, f) = terminal[f] - phi0[f] - integral[f];
    stopped[pi] = hit ? 1 : 0;
  });

  std::vector<DynkinResult> out(F);
  double stop_frac = 0.0;
  for (char s : stopped) stop_frac += s;
  stop_frac /= paths;
  for (int f = 0; f < F; ++f) {
    double mean = 0.0;
    for (int i = 0; i < paths; ++i) mean += defects(i, f);
    mean /= paths;
    double var = 0.0;
    for (int i = 0; i < paths; ++i) var += (defects(i, f) - mean) * (defects(i, f) - mean);
    var /= (paths - 1);
    out[f].mean_defect = mean;
    out[f].residual = std::abs(mean);
    out[f].std_error = std::sqrt(var / paths);
    out[f].paths = paths;
    out[f].stopped_fraction = stop_frac;
  }
  return out;
}

DynkinResult dynkin_residual(const ProblemSpec& spec, const SmoothTestFunction& phi, const LiftedState& x,
                             const ControlSource& control, double t, double R, double dt, int paths,
                             std::uint64_t seed) {
  return dynkin_residuals(spec, {phi}, x, control, t, R, dt, paths, seed).front();
}

}  // namespace delay_hjb
