#include "delay_hjb/advertising.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "delay_hjb/errors.hpp"
#include "delay_hjb/value_solver.hpp"

namespace delay_hjb {

double default_h(double u, double kappa, double u_bar) {
  if (!(kappa > 0.0) || !(u_bar > 0.0)) throw InvalidArgument("default_h: kappa and u_bar must be positive");
  if (!(u >= 0.0) || !(u < u_bar)) throw DomainError("default_h: u must lie in [0, u_bar)");
  double r = u / u_bar;
  return kappa * (1.0 / (1.0 - r) - 1.0 - r);
}

double default_h_prime(double u, double kappa, double u_bar) {
  if (!(kappa > 0.0) || !(u_bar > 0.0)) throw InvalidArgument("default_h_prime: kappa and u_bar must be positive");
  if (!(u >= 0.0) || !(u < u_bar)) throw DomainError("default_h_prime: u must lie in [0, u_bar)");
  double s = 1.0 - u / u_bar;
  return kappa / u_bar * (1.0 / (s * s) - 1.0);
}

double default_h_prime_inverse(double r, double kappa, double u_bar) {
  if (!(kappa > 0.0) || !(u_bar > 0.0))
    throw InvalidArgument("default_h_prime_inverse: kappa and u_bar must be positive");
  if (!(r >= 0.0)) throw DomainError("default_h_prime_inverse: r must be nonnegative");
  return u_bar * (1.0 - 1.0 / std::sqrt(1.0 + r * u_bar / kappa));
}

double AdvertisingConfig::h(double u) const {
  if (cost == CostShape::Barrier) return default_h(u, kappa, u_bar);
  if (!(u >= 0.0) || u > u_bar) throw DomainError("h: u must lie in [0, u_bar]");
  return kappa * std::pow(u / u_bar, cost_exponent);
}

double AdvertisingConfig::g(double y) const {
  if (utility == UtilityShape::Linear) return gamma * y;
  return gamma * y - 0.5 * curvature * y * y;
}

SegmentGrid AdvertisingConfig::grid() const { return SegmentGrid::uniform(d, segment_nodes); }

KernelSpec AdvertisingConfig::kernel_spec() const {
  SegmentGrid gr = grid();
  switch (kernel) {
    case KernelShape::Zero:
      return KernelSpec::zero(1, 1, gr);
    case KernelShape::Linear: {
      const double a = alpha, dd = d;
      return KernelSpec::sample(gr, 1, 1, [a, dd](double xi) { return Eigen::MatrixXd::Constant(1, 1, -a * (xi + dd)); });
    }
    case KernelShape::Nodes: {
      if (static_cast<int>(kernel_values.size()) != gr.m)
        throw ConfigError("kernel values must have one entry per segment node");
      KernelSpec k = KernelSpec::zero(1, 1, gr);
      for (int i = 0; i < gr.m; ++i) k.values[i](0, 0) = kernel_values[i];
      return k;
    }
  }
  throw ConfigError("unknown kernel shape");
}

LiftedState AdvertisingConfig::initial_state() const {
  SegmentGrid gr = grid();
  LiftedState x = LiftedState::constant(Eigen::VectorXd::Constant(1, history_value), gr.m);
  x.x0(0) = x0;
  if (!history.empty()) {
    if (static_cast<int>(history.size()) != gr.m) throw ConfigError("history must have one entry per segment node");
    for (int i = 0; i < gr.m; ++i) x.x1(i, 0) = history[i];
  }
  return x;
}

std::vector<std::string> AdvertisingConfig::violations() const {
  std::vector<std::string> v;
  auto bad = [&](bool cond, const std::string& what) {
    if (cond) v.push_back(what);
  };
  bad(!(a0 <= 0.0), "a0 must be <= 0");
  bad(!(c0 > 0.0), "c0 must be > 0");
  bad(!(sigma0 > 0.0), "sigma0 must be > 0");
  bad(!(rho > 0.0), "rho must be > 0");
  bad(!(u_bar > 0.0), "u_bar must be > 0");
  bad(!(d > 0.0), "d must be > 0");
  bad(segment_nodes < 2, "segment_nodes must be >= 2");
  bad(control_mesh < 2, "control_mesh must be >= 2");
  bad(!(kappa > 0.0), "cost kappa must be > 0");
  if (!v.empty()) return v;

  KernelSpec k;
  try {
    k = kernel_spec();
  } catch (const std::exception& e) {
    v.push_back(e.what());
    return v;
  }
  bad(!k.nonpositive(), "kernel a1 must be <= 0 at every node");
  bad(std::abs(k.values.front()(0, 0)) > 1e-14, "kernel a1 must vanish at -d");

  // spending cost: h(0) = 0, h'(0) = 0, convex on (0, u_bar)
  const int probes = 200;
  const double hstep = u_bar / (4.0 * probes);
  bool convex = true;
  for (int i = 1; i < probes - 1; ++i) {
    double u = u_bar * i / probes;
    if (u + hstep >= u_bar) break;
    double dd = h(u + hstep) - 2.0 * h(u) + h(u - hstep);
    if (!(dd > 0.0)) convex = false;
  }
  bad(!convex, "cost h must be strictly convex on (0, u_bar) (second-difference probe)");
  bad(std::abs(h(0.0)) > 1e-14, "cost h must satisfy h(0) = 0");
  double slope0 = (h(1e-6 * u_bar) - h(0.0)) / (1e-6 * u_bar);
  bad(std::abs(slope0) > 1e-4 * std::max(1.0, kappa / u_bar), "cost h must satisfy h'(0) = 0");

  // utility: strictly increasing and concave on a wide probe range
  bool monotone = true, concave = true;
  const double R = 100.0;
  for (int i = 0; i < probes; ++i) {
    double y = -R + 2.0 * R * i / probes, y2 = y + 2.0 * R / probes;
    if (!(g(y2) > g(y))) monotone = false;
    if (g(y) + g(y2 + 2.0 * R / probes) - 2.0 * g(y2) > 1e-9 * (1.0 + std::abs(g(y2)))) concave = false;
  }
  bad(!monotone, "utility g must be strictly increasing (monotone probe)");
  bad(!concave, "utility g must be concave");
  if (utility == UtilityShape::Quadratic) bad(curvature < 0.0, "utility curvature must be >= 0");
  if (!std::isnan(moment_rate)) bad(!(moment_rate < rho), "moment_rate must be below rho");
  return v;
}

void AdvertisingConfig::validate() const {
  auto v = violations();
  if (v.empty()) return;
  std::ostringstream msg;
  msg << "invalid model configuration:";
  for (const auto& s : v) msg << "\n  - " << s;
  throw ConfigError(msg.str());
}

ProblemSpec build_advertising_spec(const AdvertisingConfig& cfg, std::uint64_t seed) {
  ProblemSpec spec;
  spec.n = spec.h = spec.q = spec.p = 1;
  spec.grid = cfg.grid();
  spec.a1 = cfg.kernel_spec();
  spec.a2 = KernelSpec::zero(1, 1, spec.grid);
  spec.rho = cfg.rho;
  spec.control_mesh = cfg.control_mesh;
  const bool barrier = cfg.cost == AdvertisingConfig::CostShape::Barrier;
  spec.controls = ControlSet::box(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, cfg.u_bar), barrier);

  const double a0 = cfg.a0, c0 = cfg.c0, sigma0 = cfg.sigma0;
  spec.drift = [a0, c0](const Eigen::VectorXd& y, const Eigen::VectorXd& z1, const Eigen::VectorXd& u,
                        Eigen::VectorXd& out) {
    out.resize(1);
    out(0) = a0 * y(0) + z1(0) + c0 * u(0);
  };
  spec.diffusion = [sigma0](const Eigen::VectorXd&, const Eigen::VectorXd&, Eigen::MatrixXd& out) {
    out.resize(1, 1);
    out(0, 0) = sigma0;
  };
  AdvertisingConfig model = cfg;
  spec.cost = [model](const Eigen::VectorXd& y, const Eigen::VectorXd& u) { return model.h(u(0)) - model.g(y(0)); };
  if (barrier) {
    const double kappa = cfg.kappa, u_bar = cfg.u_bar;
    // u-part of -b0 p0 - l is -c0 u p0 - h(u); stationary where h'(u) = -c0 p0
    spec.closed_form_maximizer = [c0, kappa, u_bar](const Eigen::VectorXd&, const Eigen::VectorXd&,
                                                    const Eigen::VectorXd& p0) {
      return Eigen::VectorXd::Constant(1, default_h_prime_inverse(std::max(0.0, -c0 * p0(0)), kappa, u_bar));
    };
  }
  spec.strict_rho = cfg.strict_rho;

  const auto mesh = spec.controls.mesh(spec.control_mesh);
  const double u_max = mesh.back()(0);
  spec.cost_growth = std::isnan(cfg.cost_growth) ? std::max(cfg.h(u_max), std::abs(cfg.gamma)) : cfg.cost_growth;

  if (std::isnan(cfg.lipschitz_C)) {
    spec.lipschitz_C = 0.0;
    SpecDiagnostics diag = validate_spec(spec, seed);
    // sampled sup is a lower estimate; 10% headroom as for the moment envelope
    spec.lipschitz_C = 1.1 * std::max(diag.probed_drift_C, diag.probed_diffusion_C);
  } else {
    spec.lipschitz_C = cfg.lipschitz_C;
  }

  spec.moment_constant = std::isnan(cfg.moment_constant) ? 0.0 : cfg.moment_constant;
  spec.moment_rate = std::isnan(cfg.moment_rate) ? 0.0 : cfg.moment_rate;
  if (std::isnan(cfg.moment_constant) || std::isnan(cfg.moment_rate)) {
    double dt = spec.grid.spacing() / std::max(1, static_cast<int>(std::ceil(spec.grid.spacing() / 0.01)));
    double T = std::round(10.0 / cfg.rho / dt) * dt;
    double constant = 0.0, rate = 0.0;
    for (const LiftedState& x : {LiftedState::zero(1, spec.grid.m), cfg.initial_state()}) {
      MomentFit fit = fit_moment_growth(spec, x, ControlSource::constant(mesh.back()), T, dt, 200, seed);
      constant = std::max(constant, fit.constant);
      rate = std::max(rate, fit.rate);
    }
    // 10% headroom over the fitted envelope
    if (std::isnan(cfg.moment_constant)) spec.moment_constant = 1.1 * constant;
    if (std::isnan(cfg.moment_rate)) spec.moment_rate = rate;
  }
  return spec;
}

}  // namespace delay_hjb
