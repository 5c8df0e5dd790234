#include "delay_hjb/value_solver.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "delay_hjb/errors.hpp"
#include "delay_hjb/parallel.hpp"

namespace delay_hjb {

// ---------------------------------------------------------------- lag space

LiftedState LagSpace::embed(const Eigen::VectorXd& s) const {
  if (s.size() != dims()) throw InvalidArgument("LagSpace::embed: wrong lag vector length");
  LiftedState x = LiftedState::zero(1, grid.m);
  x.x0(0) = s(0);
  for (int i = 0; i < grid.m; ++i) {
    double pos = -grid.nodes[i] / delta;
    int k = std::min(static_cast<int>(std::floor(pos)), lags - 1);
    k = std::max(k, 0);
    double frac = pos - k;
    x.x1(i, 0) = (1.0 - frac) * s(k) + frac * s(k + 1);
  }
  return x;
}

Eigen::VectorXd LagSpace::project(const LiftedState& x) const {
  check_dims(x, grid);
  if (x.n() != 1) throw InvalidArgument("LagSpace::project: scalar state required");
  Eigen::VectorXd s(dims());
  s(0) = x.x0(0);
  const double hs = grid.spacing();
  for (int k = 1; k <= lags; ++k) {
    double xi = -k * delta;
    double pos = (xi + grid.d) / hs;
    int i = std::clamp(static_cast<int>(std::floor(pos)), 0, grid.m - 2);
    double frac = std::clamp(pos - i, 0.0, 1.0);
    s(k) = (1.0 - frac) * x.x1(i, 0) + frac * x.x1(i + 1, 0);
  }
  return s;
}

Eigen::MatrixXd LagSpace::gram() const {
  const int D = dims();
  std::vector<LiftedState> img;
  for (int i = 0; i < D; ++i) img.push_back(apply_A_inverse(embed(Eigen::VectorXd::Unit(D, i)), grid));
  Eigen::MatrixXd G(D, D);
  for (int i = 0; i < D; ++i)
    for (int j = 0; j <= i; ++j) G(i, j) = G(j, i) = inner_X(img[i], img[j], grid);
  return G;
}

// ---------------------------------------------------------------- MDP

std::size_t LagChainMDP::node_count() const {
  std::size_t c = 1;
  for (int i = 0; i < dims(); ++i) c *= static_cast<std::size_t>(axis.nodes);
  return c;
}

Eigen::VectorXd LagChainMDP::node_state(std::size_t index) const {
  Eigen::VectorXd s(dims());
  for (int d = 0; d < dims(); ++d) {
    s(d) = axis.node(static_cast<int>(index % axis.nodes));
    index /= axis.nodes;
  }
  return s;
}

LagSpace LagChainMDP::lag_space() const {
  LagSpace ls;
  ls.lags = lags;
  ls.delta = delta;
  ls.grid = grid;
  ls.lo = Eigen::VectorXd::Constant(dims(), axis.lo);
  ls.hi = Eigen::VectorXd::Constant(dims(), axis.hi);
  return ls;
}

void gauss_hermite_normal(int order, std::vector<double>& nodes, std::vector<double>& weights) {
  if (order < 1) throw InvalidArgument("gauss_hermite_normal: order must be positive");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  nodes.resize(order);
  weights.resize(order);
  double sum = 0.0;
  for (int i = 0; i < order; ++i) {
    nodes[i] = es.eigenvalues()(i);
    weights[i] = es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
    sum += weights[i];
  }
  for (double& w : weights) w /= sum;
  if (order % 2 == 1) nodes[order / 2] = 0.0;
}

namespace {

std::vector<Eigen::VectorXd> lag_kernel(const KernelSpec& a, const LagSpace& space) {
  std::vector<Eigen::VectorXd> out;
  for (int k = 0; k < space.dims(); ++k)
    out.push_back(a.integrate(space.grid, space.embed(Eigen::VectorXd::Unit(space.dims(), k)).x1));
  return out;
}

Eigen::VectorXd kernel_sum(const std::vector<Eigen::VectorXd>& c, const Eigen::VectorXd& s) {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(c.front().size());
  for (std::size_t k = 0; k < c.size(); ++k) z += c[k] * s(static_cast<int>(k));
  return z;
}

}  // namespace

void lag_transition(const LagChainMDP& mdp, const ProblemSpec& spec, const Eigen::VectorXd& s,
                    const Eigen::VectorXd& u, double& mean, double& sd) {
  Eigen::VectorXd y = s.head(1), b(1);
  Eigen::MatrixXd sig(1, spec.q);
  spec.drift(y, kernel_sum(mdp.lag_kernel_a1, s), u, b);
  spec.diffusion(y, kernel_sum(mdp.lag_kernel_a2, s), sig);
  mean = s(0) + mdp.delta * b(0);
  sd = std::sqrt(mdp.delta) * sig.norm();
}

LagChainMDP build_lag_mdp(const ProblemSpec& spec, int L, const GridConfig& gc, int control_mesh, int gh_order,
                          StageRule stage_rule) {
  spec.check_dims();
  if (spec.n != 1) throw InvalidArgument("build_lag_mdp: the lag-chain solver supports a scalar state");
  if (L < 1) throw InvalidArgument("build_lag_mdp: need at least one lag");
  if (gc.nodes < 3) throw InvalidArgument("build_lag_mdp: need at least 3 nodes per coordinate");
  LagChainMDP mdp;
  mdp.lags = L;
  mdp.delta = spec.grid.d / L;
  mdp.grid = spec.grid;
  mdp.stage_rule = stage_rule;
  mdp.control_mesh = spec.controls.mesh(control_mesh);
  mdp.control_cell = spec.controls.cell_width(control_mesh, 0);
  gauss_hermite_normal(gh_order, mdp.gh_nodes, mdp.gh_weights);
  mdp.discount = std::exp(-spec.rho * mdp.delta);
  if (!(mdp.discount < 1.0)) throw InvalidArgument("build_lag_mdp: discount factor must be below 1");
  mdp.axis.nodes = gc.nodes;

  LagSpace probe_space = mdp.lag_space();
  mdp.lag_kernel_a1 = lag_kernel(spec.a1, probe_space);
  mdp.lag_kernel_a2 = lag_kernel(spec.a2, probe_space);

  LiftedState x0 = gc.calibration_state.x0.size() == 0 ? LiftedState::zero(1, spec.grid.m) : gc.calibration_state;
  std::vector<Eigen::VectorXd> cal_controls = {mdp.control_mesh.front(),
                                               mdp.control_mesh[mdp.control_mesh.size() / 2],
                                               mdp.control_mesh.back()};
  if (gc.auto_box) {
    double dt = gc.calibration_dt > 0.0 ? gc.calibration_dt : spec.grid.spacing();
    double lo = std::min(x0.x0(0), x0.x1.minCoeff()), hi = std::max(x0.x0(0), x0.x1.maxCoeff());
    for (const auto& u : cal_controls) {
      double T = std::round(gc.calibration_T / dt) * dt;
      std::vector<Eigen::VectorXd> traces(gc.calibration_paths);
      parallel_for(static_cast<std::size_t>(gc.calibration_paths), [&](std::size_t i) {
        IntegrateOptions opt;
        opt.keep_noise = false;
        traces[i] = integrate(spec, x0, ControlSource::constant(u), T, dt, gc.seed, i, opt).present.col(0);
      });
      const int steps = static_cast<int>(traces.front().size());
      for (int k = 0; k < steps; ++k) {
        double mean = 0.0, sq = 0.0;
        for (const auto& tr : traces) mean += tr(k);
        mean /= gc.calibration_paths;
        for (const auto& tr : traces) sq += (tr(k) - mean) * (tr(k) - mean);
        double sd = std::sqrt(sq / std::max(1, gc.calibration_paths - 1));
        lo = std::min(lo, mean - gc.sd_multiplier * sd);
        hi = std::max(hi, mean + gc.sd_multiplier * sd);
      }
    }
    if (!(hi > lo)) {
      lo -= 1.0;
      hi += 1.0;
    }
    mdp.axis.lo = lo;
    mdp.axis.hi = hi;
  } else {
    if (!(gc.hi > gc.lo)) throw ConfigError("build_lag_mdp: grid box needs lo < hi");
    mdp.axis.lo = gc.lo;
    mdp.axis.hi = gc.hi;
  }

  // calibration rollout of the chain itself, counting clamped successors
  {
    LagSpace space = mdp.lag_space();
    Eigen::VectorXd s0 = space.project(x0);
    int steps = std::max(1, static_cast<int>(std::round(gc.calibration_T / mdp.delta)));
    std::mt19937_64 rng(stream_seed(gc.seed, 0xca11b));
    std::normal_distribution<double> normal;
    long clamped = 0, total = 0;
    for (const auto& u : cal_controls) {
      for (int pth = 0; pth < gc.calibration_paths; ++pth) {
        Eigen::VectorXd s = s0.cwiseMax(mdp.axis.lo).cwiseMin(mdp.axis.hi);
        for (int k = 0; k < steps; ++k) {
          double mean, sd;
          lag_transition(mdp, spec, s, u, mean, sd);
          double next = mean + sd * normal(rng);
          ++total;
          if (next < mdp.axis.lo || next > mdp.axis.hi) {
            ++clamped;
            next = std::clamp(next, mdp.axis.lo, mdp.axis.hi);
          }
          for (int j = L; j > 0; --j) s(j) = s(j - 1);
          s(0) = next;
        }
      }
    }
    mdp.calibration_clamp_rate = total > 0 ? static_cast<double>(clamped) / total : 0.0;
    if (mdp.calibration_clamp_rate > 0.2) {
      std::ostringstream msg;
      msg << "build_lag_mdp: clamp rate " << mdp.calibration_clamp_rate
          << " exceeds 20% in the calibration rollout; enlarge the grid box";
      throw ConfigError(msg.str());
    }
  }
  return mdp;
}

// ---------------------------------------------------------------- Bellman

namespace {

class BellmanKernel {
 public:
  BellmanKernel(const LagChainMDP& mdp, const ProblemSpec& spec) : mdp_(mdp), spec_(spec) {
    nodes_ = mdp.node_count();
    controls_ = mdp.control_mesh.size();
    tail_ = nodes_ / static_cast<std::size_t>(mdp.axis.nodes);
    cached_ = nodes_ * controls_ <= kCacheLimit;
    sd_.resize(nodes_);
    if (cached_) {
      mean_.resize(nodes_ * controls_);
      stage_.resize(nodes_ * controls_);
    }
    parallel_for(nodes_, [&](std::size_t i) {
      Eigen::VectorXd s = mdp_.node_state(i);
      double mean, sd;
      for (std::size_t c = 0; c < controls_; ++c) {
        lag_transition(mdp_, spec_, s, mdp_.control_mesh[c], mean, sd);
        if (c == 0) sd_[i] = sd;
        if (cached_) {
          mean_[i * controls_ + c] = mean;
          stage_[i * controls_ + c] = stage(s, mdp_.control_mesh[c], mean, sd);
        }
      }
    });
  }

  void apply(const std::vector<double>& v, std::vector<double>& out, std::vector<int>* argmin,
             double* clamp_rate) const {
    if (v.size() != nodes_) throw InvalidArgument("bellman_apply: value array has wrong size");
    out.assign(nodes_, 0.0);
    if (argmin) argmin->assign(nodes_, 0);
    std::vector<long> clamps(nodes_, 0);
    const int G = static_cast<int>(mdp_.gh_nodes.size());
    const double beta = mdp_.discount;
    parallel_for(nodes_, [&](std::size_t i) {
      const std::size_t base = (i % tail_) * static_cast<std::size_t>(mdp_.axis.nodes);
      Eigen::VectorXd s;
      if (!cached_) s = mdp_.node_state(i);
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      long clamped = 0;
      for (std::size_t c = 0; c < controls_; ++c) {
        double mean, sd = sd_[i], st;
        if (cached_) {
          mean = mean_[i * controls_ + c];
          st = stage_[i * controls_ + c];
        } else {
          lag_transition(mdp_, spec_, s, mdp_.control_mesh[c], mean, sd);
          st = stage(s, mdp_.control_mesh[c], mean, sd);
        }
        double ev = 0.0;
        if (sd == 0.0) {
          ev = interp(v, base, mean, clamped);
        } else {
          for (int j = 0; j < G; ++j) ev += mdp_.gh_weights[j] * interp(v, base, mean + sd * mdp_.gh_nodes[j], clamped);
        }
        double val = st + beta * ev;
        if (val < best) {
          best = val;
          best_c = static_cast<int>(c);
        }
      }
      out[i] = best;
      if (argmin) (*argmin)[i] = best_c;
      clamps[i] = clamped;
    });
    if (clamp_rate) {
      long total = std::accumulate(clamps.begin(), clamps.end(), 0L);
      double evaluated = static_cast<double>(nodes_) * controls_ * mdp_.gh_nodes.size();
      *clamp_rate = total / evaluated;
    }
  }

 private:
  static constexpr std::size_t kCacheLimit = 12000000;

  double stage(const Eigen::VectorXd& s, const Eigen::VectorXd& u, double mean, double sd) const {
    Eigen::VectorXd y = s.head(1);
    double here = spec_.cost(y, u);
    if (mdp_.stage_rule == StageRule::LeftPoint) return here * mdp_.delta;
    double next = 0.0;
    if (sd == 0.0) {
      y(0) = mean;
      next = spec_.cost(y, u);
    } else {
      for (std::size_t j = 0; j < mdp_.gh_nodes.size(); ++j) {
        y(0) = mean + sd * mdp_.gh_nodes[j];
        next += mdp_.gh_weights[j] * spec_.cost(y, u);
      }
    }
    return 0.5 * mdp_.delta * (here + mdp_.discount * next);
  }

  double interp(const std::vector<double>& v, std::size_t base, double y, long& clamped) const {
    const LagAxis& ax = mdp_.axis;
    double pos = (y - ax.lo) / ax.spacing();
    if (pos < 0.0) {
      ++clamped;
      return v[base];
    }
    if (pos > ax.nodes - 1) {
      ++clamped;
      return v[base + ax.nodes - 1];
    }
    int c = std::min(static_cast<int>(pos), ax.nodes - 2);
    double f = pos - c;
    return (1.0 - f) * v[base + c] + f * v[base + c + 1];
  }

  const LagChainMDP& mdp_;
  const ProblemSpec& spec_;
  std::size_t nodes_ = 0, controls_ = 0, tail_ = 0;
  bool cached_ = false;
  std::vector<double> sd_, mean_, stage_;
};

}  // namespace

void bellman_apply(const LagChainMDP& mdp, const ProblemSpec& spec, const std::vector<double>& v,
                   std::vector<double>& out, std::vector<int>* argmin, double* clamp_rate) {
  BellmanKernel(mdp, spec).apply(v, out, argmin, clamp_rate);
}

ValueField value_iteration(const LagChainMDP& mdp, const ProblemSpec& spec, double tol, int max_iter) {
  if (!(tol > 0.0)) throw InvalidArgument("value_iteration: tol must be positive");
  if (!(mdp.discount < 1.0)) throw InvalidArgument("value_iteration: discount must be below 1");
  BellmanKernel kernel(mdp, spec);
  ValueField field;
  field.mdp = mdp;
  std::vector<double> v(mdp.node_count(), 0.0), next;
  int increases = 0;
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= max_iter; ++it) {
    kernel.apply(v, next, nullptr, &field.clamp_rate);
    double res = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) res = std::max(res, std::abs(next[i] - v[i]));
    if (!std::isfinite(res)) throw NumericalError("value_iteration: non-finite Bellman residual");
    field.residual_history.push_back(res);
    v.swap(next);
    increases = res > prev ? increases + 1 : 0;
    if (increases >= 3) throw NumericalError("value_iteration: residual increased for 3 consecutive sweeps");
    prev = res;
    if (res <= tol) {
      field.values = std::move(v);
      field.iterations = it;
      field.residual = res;
      spdlog::debug("value_iteration: {} sweeps, residual {:.3e}, clamp rate {:.4f}", it, res, field.clamp_rate);
      return field;
    }
  }
  std::ostringstream msg;
  msg << "value_iteration: no convergence within " << max_iter << " sweeps (residual " << prev << ")";
  throw NumericalError(msg.str());
}

// ---------------------------------------------------------------- field access

bool ValueField::inside(const Eigen::VectorXd& s) const {
  const double eps = 1e-12 * std::max(1.0, mdp.axis.hi - mdp.axis.lo);
  for (int d = 0; d < s.size(); ++d)
    if (s(d) < mdp.axis.lo - eps || s(d) > mdp.axis.hi + eps) return false;
  return true;
}

double ValueField::evaluate(const Eigen::VectorXd& s, bool clamp) const {
  const int D = mdp.dims();
  if (s.size() != D) throw InvalidArgument("ValueField::evaluate: wrong lag vector length");
  if (!clamp && !inside(s)) throw InvalidArgument("ValueField::evaluate: point outside the grid box");
  const LagAxis& ax = mdp.axis;
  int cell[16];
  double frac[16];
  for (int d = 0; d < D; ++d) {
    double pos = std::clamp((s(d) - ax.lo) / ax.spacing(), 0.0, static_cast<double>(ax.nodes - 1));
    cell[d] = std::min(static_cast<int>(pos), ax.nodes - 2);
    frac[d] = pos - cell[d];
  }
  double acc = 0.0;
  for (int corner = 0; corner < (1 << D); ++corner) {
    double w = 1.0;
    std::size_t idx = 0, stride = 1;
    for (int d = 0; d < D; ++d) {
      int bit = (corner >> d) & 1;
      w *= bit ? frac[d] : 1.0 - frac[d];
      idx += static_cast<std::size_t>(cell[d] + bit) * stride;
      stride *= static_cast<std::size_t>(ax.nodes);
    }
    if (w != 0.0) acc += w * values[idx];
  }
  return acc;
}

double ValueField::evaluate(const LiftedState& x, bool clamp) const {
  return evaluate(lag_space().project(x), clamp);
}

double ValueField::interpolation_error_estimate() const {
  const int D = mdp.dims(), N = mdp.axis.nodes;
  double worst = 0.0;
  std::size_t stride = 1;
  for (int d = 0; d < D; ++d) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      int coord = static_cast<int>((i / stride) % N);
      if (coord == 0 || coord == N - 1) continue;
      double dd = values[i + stride] - 2.0 * values[i] + values[i - stride];
      worst = std::max(worst, std::abs(dd) / 8.0);
    }
    stride *= N;
  }
  return worst;
}

Eigen::VectorXd gradient_x0(const ValueField& field, const Eigen::VectorXd& s) {
  const LagAxis& ax = field.mdp.axis;
  const double h = ax.spacing();
  if (!field.inside(s)) throw InvalidArgument("gradient_x0: point outside the grid box");
  Eigen::VectorXd up = s, dn = s;
  up(0) += h;
  dn(0) -= h;
  double lo_room = s(0) - ax.lo, hi_room = ax.hi - s(0);
  Eigen::VectorXd g(1);
  if (lo_room >= h - 1e-12 * h && hi_room >= h - 1e-12 * h) {
    up(0) = std::min(up(0), ax.hi);
    dn(0) = std::max(dn(0), ax.lo);
    g(0) = (field.evaluate(up, true) - field.evaluate(dn, true)) / (up(0) - dn(0));
    return g;
  }
  spdlog::warn("gradient_x0: point within one cell of the boundary, using a one-sided difference");
  if (hi_room >= h) {
    g(0) = (field.evaluate(up, true) - field.evaluate(s, true)) / h;
  } else {
    dn(0) = std::max(dn(0), ax.lo);
    g(0) = (field.evaluate(s, true) - field.evaluate(dn, true)) / std::max(s(0) - dn(0), 1e-300);
  }
  return g;
}

Eigen::VectorXd gradient_x0(const ValueField& field, const LiftedState& x) {
  return gradient_x0(field, field.lag_space().project(x));
}

// ---------------------------------------------------------------- Hamiltonian

namespace {
double hamiltonian_term(const ProblemSpec& spec, const Eigen::VectorXd& x0, const Eigen::VectorXd& z1,
                        const Eigen::VectorXd& u, const Eigen::VectorXd& p0, Eigen::VectorXd& b) {
  spec.drift(x0, z1, u, b);
  return -b.dot(p0) - spec.cost(x0, u);
}
}  // namespace

HamiltonianResult hamiltonian_mesh(const LiftedState& x, const Eigen::VectorXd& p0, const ProblemSpec& spec,
                                   const std::vector<Eigen::VectorXd>& mesh) {
  check_dims(x, spec.grid);
  if (mesh.empty()) throw InvalidArgument("hamiltonian: empty control mesh");
  Eigen::VectorXd z1 = spec.a1.integrate(spec.grid, x.x1), b(spec.n);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t c = 0; c < mesh.size(); ++c) {
    double val = hamiltonian_term(spec, x.x0, z1, mesh[c], p0, b);
    if (val > best) {
      best = val;
      arg = c;
    }
  }
  return {-x.x0.dot(p0) + best, mesh[arg]};
}

HamiltonianResult hamiltonian(const LiftedState& x, const Eigen::VectorXd& p0, const ProblemSpec& spec) {
  check_dims(x, spec.grid);
  if (p0.size() != spec.n) throw InvalidArgument("hamiltonian: p0 has wrong length");
  if (spec.closed_form_maximizer) {
    Eigen::VectorXd z1 = spec.a1.integrate(spec.grid, x.x1), b(spec.n);
    Eigen::VectorXd u = spec.closed_form_maximizer(x.x0, z1, p0);
    return {-x.x0.dot(p0) + hamiltonian_term(spec, x.x0, z1, u, p0, b), u};
  }
  return hamiltonian_mesh(x, p0, spec, spec.controls.mesh(spec.control_mesh));
}

// ---------------------------------------------------------------- Monte Carlo

double tail_bound(const ProblemSpec& spec, const LiftedState& x, double T) {
  double gap = spec.rho - spec.moment_rate;
  if (!(gap > 0.0)) return std::numeric_limits<double>::infinity();
  double cbar = spec.cost_growth * (1.0 + spec.moment_constant);
  return cbar * (1.0 + norm_X(x, spec.grid)) * std::exp(-gap * T) / gap;
}

double minimal_horizon(const ProblemSpec& spec, const LiftedState& x, double tol) {
  double gap = spec.rho - spec.moment_rate;
  if (!(gap > 0.0)) return std::numeric_limits<double>::infinity();
  double cbar = spec.cost_growth * (1.0 + spec.moment_constant);
  return std::max(0.0, std::log(cbar * (1.0 + norm_X(x, spec.grid)) / (gap * tol)) / gap);
}

CostEstimate mc_cost(const ProblemSpec& spec, const LiftedState& x, const ControlSource& control, double T,
                     double dt, int paths, std::uint64_t seed, double tail_tolerance) {
  if (paths < 1) throw InvalidArgument("mc_cost: need at least one path");
  CostEstimate est;
  est.paths = paths;
  est.horizon = T;
  est.tail_bound = tail_bound(spec, x, T);
  if (tail_tolerance > 0.0 && est.tail_bound > tail_tolerance) {
    std::ostringstream msg;
    msg << "mc_cost: tail bound " << est.tail_bound << " exceeds " << tail_tolerance
        << "; use a horizon of at least " << minimal_horizon(spec, x, tail_tolerance);
    throw ConfigError(msg.str());
  }
  est.samples.assign(paths, 0.0);
  parallel_for(static_cast<std::size_t>(paths), [&](std::size_t i) {
    IntegrateOptions opt;
    opt.keep_noise = false;
    est.samples[i] = discounted_cost(spec, integrate(spec, x, control, T, dt, seed, i, opt));
  });
  double mean = 0.0;
  for (double s : est.samples) mean += s;
  mean /= paths;
  double var = 0.0;
  for (double s : est.samples) var += (s - mean) * (s - mean);
  est.mean = mean;
  est.std_error = paths > 1 ? std::sqrt(var / (paths - 1) / paths) : 0.0;
  return est;
}

MomentFit fit_moment_growth(const ProblemSpec& spec, const LiftedState& x, const ControlSource& control,
                            double T, double dt, int paths, std::uint64_t seed) {
  const int stride = std::max(1, static_cast<int>(std::lround(spec.grid.spacing() / dt)));
  const int samples = static_cast<int>(std::lround(T / dt)) / stride + 1;
  Eigen::MatrixXd norms = Eigen::MatrixXd::Zero(paths, samples);
  parallel_for(static_cast<std::size_t>(paths), [&](std::size_t i) {
    IntegrateOptions opt;
    opt.keep_noise = false;
    opt.observer = [&](int k, double, const LiftedState& Y, const Eigen::VectorXd&) {
      if (k % stride == 0 && k / stride < samples) norms(static_cast<int>(i), k / stride) = norm_X(Y, spec.grid);
      return true;
    };
    integrate(spec, x, control, T, dt, seed, i, opt);
  });
  MomentFit fit;
  const double base = 1.0 + norm_X(x, spec.grid);
  Eigen::VectorXd lt(samples), ly(samples);
  for (int s = 0; s < samples; ++s) {
    fit.times.push_back(s * stride * dt);
    fit.mean_norm.push_back(norms.col(s).mean());
    lt(s) = fit.times.back();
    ly(s) = std::log(std::max(fit.mean_norm.back(), 1e-300) / base);
  }
  // growth rate from the second half of the window; the constant absorbs the transient
  const int h0 = samples / 2, hn = samples - h0;
  Eigen::VectorXd t2 = lt.tail(hn), y2 = ly.tail(hn);
  double tm = t2.mean(), ym = y2.mean();
  double sxx = (t2.array() - tm).square().sum();
  double slope = sxx > 0.0 ? ((t2.array() - tm) * (y2.array() - ym)).sum() / sxx : 0.0;
  fit.rate = std::max(0.0, slope);
  for (int s = 0; s < samples; ++s)
    fit.constant = std::max(fit.constant, fit.mean_norm[s] / (base * std::exp(fit.rate * fit.times[s])));
  return fit;
}

OracleResult open_loop_oracle(const ProblemSpec& spec, const LiftedState& x, const OracleConfig& cfg) {
  if (cfg.levels.empty() || cfg.pieces < 1) throw InvalidArgument("open_loop_oracle: need levels and pieces");
  const std::size_t L = cfg.levels.size();
  double combos_d = std::pow(static_cast<double>(L), cfg.pieces);
  std::vector<std::vector<int>> plans;
  if (cfg.random_search) {
    if (cfg.random_samples < 1) throw ConfigError("open_loop_oracle: random search needs a sample count");
    std::mt19937_64 rng(stream_seed(cfg.seed, 0x0ac1e));
    std::uniform_int_distribution<std::size_t> pick(0, L - 1);
    for (int i = 0; i < cfg.random_samples; ++i) {
      std::vector<int> plan(cfg.pieces);
      for (int& v : plan) v = static_cast<int>(pick(rng));
      plans.push_back(plan);
    }
  } else {
    if (combos_d > static_cast<double>(cfg.max_combinations)) {
      std::ostringstream msg;
      msg << "open_loop_oracle: " << combos_d << " combinations exceed the limit " << cfg.max_combinations
          << "; enable random-search mode";
      throw ConfigError(msg.str());
    }
    std::size_t combos = static_cast<std::size_t>(std::llround(combos_d));
    for (std::size_t c = 0; c < combos; ++c) {
      std::vector<int> plan(cfg.pieces);
      std::size_t rem = c;
      for (int k = 0; k < cfg.pieces; ++k) {
        plan[k] = static_cast<int>(rem % L);
        rem /= L;
      }
      plans.push_back(plan);
    }
  }
  auto levels_of = [&](const std::vector<int>& plan) {
    std::vector<Eigen::VectorXd> lv;
    for (int i : plan) lv.push_back(cfg.levels[i]);
    return lv;
  };
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    CostEstimate e = mc_cost(spec, x, ControlSource::piecewise(levels_of(plans[i]), cfg.T), cfg.T, cfg.dt,
                             cfg.paths, cfg.seed);
    if (e.mean < best) {
      best = e.mean;
      best_i = i;
    }
  }
  OracleResult res;
  res.evaluated = plans.size();
  res.best_levels = levels_of(plans[best_i]);
  // fresh noise for the reported value, so selection does not bias it low
  res.estimate = mc_cost(spec, x, ControlSource::piecewise(res.best_levels, cfg.T), cfg.T, cfg.dt, cfg.paths,
                         stream_seed(cfg.seed, 0x7e57));
  res.value = res.estimate.mean + res.estimate.tail_bound;
  return res;
}

// ---------------------------------------------------------------- probes

namespace {

Eigen::VectorXd uniform_in_box(const LagSpace& space, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd s(space.dims());
  for (int d = 0; d < space.dims(); ++d) s(d) = space.lo(d) + (space.hi(d) - space.lo(d)) * unif(rng);
  return s;
}

double probe_once(const LagFunction& f, const LagSpace& space, const Eigen::MatrixXd& G,
                  const Eigen::LDLT<Eigen::MatrixXd>& Gsolve, int samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int D = space.dims();
  auto dist = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    Eigen::VectorXd v = a - b;
    return std::sqrt(std::max(0.0, v.dot(G * v)));
  };
  auto clip = [&](Eigen::VectorXd s) { return s.cwiseMax(space.lo).cwiseMin(space.hi); };
  double K = 0.0;
  Eigen::VectorXd width = space.hi - space.lo;
  for (int i = 0; i < samples; ++i) {
    Eigen::VectorXd x = uniform_in_box(space, rng);
    Eigen::VectorXd y = uniform_in_box(space, rng);
    double dxy = dist(x, y);
    if (dxy > 0.0) K = std::max(K, std::abs(f(x) - f(y)) / dxy);
    // steepest pair: direction G^-1 grad f, which attains the dual norm locally
    Eigen::VectorXd g(D);
    for (int d = 0; d < D; ++d) {
      double hstep = 1e-3 * width(d);
      Eigen::VectorXd up = x, dn = x;
      up(d) = std::min(x(d) + hstep, space.hi(d));
      dn(d) = std::max(x(d) - hstep, space.lo(d));
      g(d) = up(d) > dn(d) ? (f(up) - f(dn)) / (up(d) - dn(d)) : 0.0;
    }
    Eigen::VectorXd v = Gsolve.solve(g);
    double vmax = v.cwiseAbs().cwiseQuotient(width).maxCoeff();
    if (!(vmax > 0.0) || !std::isfinite(vmax)) continue;
    v *= 1e-2 / vmax;
    for (double sign : {1.0, -1.0}) {
      Eigen::VectorXd z = clip(x + sign * v);
      double dxz = dist(x, z);
      if (dxz > 1e-14) K = std::max(K, std::abs(f(x) - f(z)) / dxz);
    }
  }
  return K;
}

}  // namespace

std::vector<Eigen::VectorXd> probe_lag_states(const LagSpace& space, int count, std::uint64_t seed, double shrink) {
  if (!(shrink > 0.0 && shrink <= 1.0)) throw InvalidArgument("probe_lag_states: shrink must lie in (0, 1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-0.5 * shrink, 0.5 * shrink);
  std::vector<Eigen::VectorXd> out;
  for (int i = 0; i < count; ++i) {
    Eigen::VectorXd s(space.dims());
    for (int d = 0; d < space.dims(); ++d)
      s(d) = 0.5 * (space.lo(d) + space.hi(d)) + (space.hi(d) - space.lo(d)) * unif(rng);
    out.push_back(s);
  }
  return out;
}

LipschitzProbe lipschitz_minus1_probe(const LagFunction& f, const LagSpace& space, int samples,
                                      std::uint64_t seed) {
  Eigen::MatrixXd G = space.gram();
  Eigen::LDLT<Eigen::MatrixXd> solve(G);
  LipschitzProbe p;
  p.K = probe_once(f, space, G, solve, samples, seed);
  p.K_second = probe_once(f, space, G, solve, samples, stream_seed(seed, 2));
  double hi = std::max(p.K, p.K_second), lo = std::min(p.K, p.K_second);
  p.pass = std::isfinite(hi) && (hi == 0.0 || hi <= 2.0 * lo);
  p.K = hi;
  return p;
}

ConvexityReport convexity_probe(const LagFunction& f, const LagSpace& space, int samples, std::uint64_t seed,
                                double slack) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ConvexityReport rep;
  rep.slack = slack;
  rep.worst_margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < samples; ++i) {
    Eigen::VectorXd x = uniform_in_box(space, rng), y = uniform_in_box(space, rng);
    double lam = unif(rng);
    double lhs = f(lam * x + (1.0 - lam) * y);
    double rhs = lam * f(x) + (1.0 - lam) * f(y);
    double margin = rhs + slack - lhs;
    rep.worst_margin = std::min(rep.worst_margin, margin);
    if (margin < 0.0) ++rep.violations;
    ++rep.samples;
  }
  rep.satisfied_fraction = rep.samples > 0 ? 1.0 - static_cast<double>(rep.violations) / rep.samples : 0.0;
  return rep;
}

ConvexityHypotheses check_convexity_hypotheses(const ProblemSpec& spec, int probes, std::uint64_t seed) {
  spec.check_dims();
  ConvexityHypotheses h{true, true, true};
  if (spec.controls.kind != ControlSet::Kind::Box) h.cost_convex = false;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto vec = [&](int len) {
    Eigen::VectorXd v(len);
    for (int i = 0; i < len; ++i) v(i) = normal(rng);
    return v;
  };
  auto control = [&]() {
    Eigen::VectorXd u(spec.p);
    for (int j = 0; j < spec.p; ++j) {
      double hi = spec.controls.upper_open ? spec.controls.hi(j) - spec.controls.cell_width(spec.control_mesh, j)
                                           : spec.controls.hi(j);
      u(j) = spec.controls.lo(j) + (hi - spec.controls.lo(j)) * unif(rng);
    }
    return u;
  };
  Eigen::VectorXd ba(spec.n), bb(spec.n), bm(spec.n);
  Eigen::MatrixXd sa(spec.n, spec.q), sb(spec.n, spec.q);
  for (int i = 0; i < probes && spec.controls.kind == ControlSet::Kind::Box; ++i) {
    Eigen::VectorXd ya = vec(spec.n), yb = vec(spec.n), za = vec(spec.h), zb = vec(spec.h);
    Eigen::VectorXd ua = control(), ub = control();
    double lam = unif(rng);
    Eigen::VectorXd ym = lam * ya + (1 - lam) * yb, zm = lam * za + (1 - lam) * zb, um = lam * ua + (1 - lam) * ub;
    spec.drift(ya, za, ua, ba);
    spec.drift(yb, zb, ub, bb);
    spec.drift(ym, zm, um, bm);
    Eigen::VectorXd avg = lam * ba + (1 - lam) * bb;
    if ((bm - avg).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + avg.cwiseAbs().maxCoeff())) h.drift_affine = false;
    spec.diffusion(ya, za, sa);
    spec.diffusion(yb, zb, sb);
    if ((sa - sb).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + sa.cwiseAbs().maxCoeff())) h.diffusion_constant = false;
    double la = spec.cost(ya, ua), lb = spec.cost(yb, ub), lm = spec.cost(ym, um);
    double lavg = lam * la + (1 - lam) * lb;
    if (lm > lavg + 1e-10 * (1.0 + std::abs(lavg))) h.cost_convex = false;
  }
  return h;
}

}  // namespace delay_hjb
