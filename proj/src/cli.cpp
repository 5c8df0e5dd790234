#include "delay_hjb/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "delay_hjb/advertising.hpp"
#include "delay_hjb/errors.hpp"
#include "delay_hjb/parallel.hpp"
#include "delay_hjb/regularization.hpp"
#include "delay_hjb/svg.hpp"

namespace delay_hjb {

namespace fs = std::filesystem;

GridConfig grid_config(const RunConfig& cfg, const ProblemSpec&) {
  GridConfig g;
  g.nodes = cfg.solve.nodes;
  g.auto_box = cfg.solve.auto_box;
  g.lo = cfg.solve.box_lo;
  g.hi = cfg.solve.box_hi;
  g.sd_multiplier = cfg.solve.sd_multiplier;
  g.calibration_T = cfg.solve.calibration_T;
  g.calibration_paths = cfg.solve.calibration_paths;
  g.seed = cfg.solve.seed;
  g.calibration_state = cfg.model.initial_state();
  return g;
}

ValueField solve_value_field(const RunConfig& cfg, const ProblemSpec& spec, StageRule rule) {
  LagChainMDP mdp =
      build_lag_mdp(spec, cfg.solve.lags, grid_config(cfg, spec), cfg.model.control_mesh, cfg.solve.gh_order, rule);
  spdlog::info("lag chain: {} lags, {} nodes per axis on [{:.4f}, {:.4f}], {} controls, calibration clamp rate {:.4f}",
               mdp.lags, mdp.axis.nodes, mdp.axis.lo, mdp.axis.hi, mdp.control_mesh.size(),
               mdp.calibration_clamp_rate);
  return value_iteration(mdp, spec, cfg.solve.tol, cfg.solve.max_iter);
}

ValueField companion_field(const RunConfig& cfg, const ProblemSpec& spec, double& factor) {
  RunConfig c = cfg;
  if (cfg.solve.lags >= 2) {
    c.solve.lags = cfg.solve.lags - 1;
    factor = cfg.solve.lags - 1;
    return solve_value_field(c, spec, cfg.solve.stage_rule);
  }
  factor = 1.0;
  StageRule other = cfg.solve.stage_rule == StageRule::Trapezoid ? StageRule::LeftPoint : StageRule::Trapezoid;
  return solve_value_field(c, spec, other);
}

double verification_horizon(const ProblemSpec& spec, const std::vector<LiftedState>& states, double tolerance,
                            double base, double dt) {
  double T = base;
  for (const auto& x : states) T = std::max(T, minimal_horizon(spec, x, tolerance));
  if (!std::isfinite(T)) throw ConfigError("verification horizon is unbounded: moment_rate must be below rho");
  return dt * std::ceil(T / dt - 1e-9);
}

namespace {

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.solve.seed = seed;
  cfg.simulate.seed = seed;
  cfg.verify.seed = seed;
  cfg.regularize.seed = seed;
}

ProblemSpec make_spec(const RunConfig& cfg) {
  ProblemSpec spec = build_advertising_spec(cfg.model);
  SpecDiagnostics diag = validate_spec(spec);
  for (const auto& w : diag.warnings) spdlog::warn("{}", w);
  return spec;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << std::setprecision(12);
  return out;
}

void write_path_svg(const Path& path, const ProblemSpec& spec, const fs::path& file, const std::string& title) {
  std::vector<double> t(path.times.begin(), path.times.end() - 1), y, u, cost;
  for (int k = 0; k < path.steps; ++k) {
    Eigen::VectorXd yk = path.present.row(k).transpose(), uk = path.controls.row(k).transpose();
    y.push_back(yk(0));
    u.push_back(uk(0));
    cost.push_back(spec.cost(yk, uk));
  }
  write_svg_chart(file.string(), title, t, {{"goodwill y", y}, {"control u", u}, {"running cost", cost}});
}

nlohmann::json estimate_json(const CostEstimate& e) {
  return {{"mean", e.mean}, {"std_error", e.std_error}, {"paths", e.paths}, {"horizon", e.horizon},
          {"tail_bound", e.tail_bound}};
}

ValueField load_or_solve(const RunConfig& cfg, const ProblemSpec& spec, const fs::path& out) {
  fs::path header = out / "value_field.json";
  if (fs::exists(header)) {
    try {
      ValueField f = load_value_field(header.string());
      spdlog::info("reusing {}", header.string());
      return f;
    } catch (const std::exception& e) {
      spdlog::warn("ignoring stored value field: {}", e.what());
    }
  }
  ValueField f = solve_value_field(cfg, spec, cfg.solve.stage_rule);
  save_value_field(f, header.string(), (out / "value_field.csv").string());
  return f;
}

FeedbackPolicy make_policy(const ProblemSpec& spec, const ValueField& field) {
  auto shared = std::make_shared<const ValueField>(field);
  return spec.closed_form_maximizer ? FeedbackPolicy::closed_form(shared, spec)
                                    : FeedbackPolicy::tabulated(shared, spec);
}

int cmd_simulate(const RunConfig& cfg, const fs::path& out) {
  ProblemSpec spec = make_spec(cfg);
  const auto& s = cfg.simulate;
  Eigen::VectorXd u = Eigen::VectorXd::Constant(1, s.control);
  if (!spec.controls.contains(u)) throw ConfigError("simulate.control lies outside the control set");
  LiftedState x = cfg.model.initial_state();
  ControlSource src = ControlSource::constant(u);
  CostEstimate est = mc_cost(spec, x, src, s.T, s.dt, s.paths, s.seed);
  for (int i = 0; i < std::min(s.export_paths, s.paths); ++i) {
    Path p = integrate(spec, x, src, s.T, s.dt, s.seed, static_cast<std::uint64_t>(i));
    std::ostringstream name;
    name << "path_" << std::setw(3) << std::setfill('0') << i;
    auto f = open_out(out / (name.str() + ".csv"));
    write_path_csv(p, f);
    if (s.svg) write_path_svg(p, spec, out / (name.str() + ".svg"), "simulated path " + std::to_string(i));
  }
  auto f = open_out(out / "simulate_summary.json");
  f << nlohmann::json{{"cost", estimate_json(est)}, {"control", s.control}}.dump(2) << '\n';
  std::cout << "discounted cost " << est.mean << " +- " << est.std_error << " (tail bound " << est.tail_bound
            << ")\n";
  return kExitPass;
}

int cmd_solve(const RunConfig& cfg, const fs::path& out) {
  ProblemSpec spec = make_spec(cfg);
  ValueField f = solve_value_field(cfg, spec, cfg.solve.stage_rule);
  save_value_field(f, (out / "value_field.json").string(), (out / "value_field.csv").string());
  auto r = open_out(out / "solve_summary.json");
  r << nlohmann::json{{"iterations", f.iterations},
                      {"residual", f.residual},
                      {"clamp_rate", f.clamp_rate},
                      {"calibration_clamp_rate", f.mdp.calibration_clamp_rate},
                      {"interpolation_error", f.interpolation_error_estimate()},
                      {"box", {f.mdp.axis.lo, f.mdp.axis.hi}}}
           .dump(2)
    << '\n';
  Eigen::VectorXd s = f.lag_space().project(cfg.model.initial_state());
  std::cout << "value iteration converged in " << f.iterations << " sweeps (residual " << f.residual << ")\n";
  if (f.inside(s)) std::cout << "V(initial state) = " << f.evaluate(s) << '\n';
  return kExitPass;
}

int cmd_synthesize(const RunConfig& cfg, const fs::path& out) {
  ProblemSpec spec = make_spec(cfg);
  ValueField field = load_or_solve(cfg, spec, out);
  FeedbackPolicy policy = make_policy(spec, field);
  const auto& s = cfg.simulate;
  ClosedLoopResult r = closed_loop_simulate(spec, policy, cfg.model.initial_state(), s.T, s.dt, s.paths, s.seed);
  {
    auto f = open_out(out / "closed_loop.csv");
    write_path_csv(r.sample, f);
  }
  {
    auto f = open_out(out / "control_trace.csv");
    f << "t,u_1\n";
    for (int k = 0; k < r.sample.steps; ++k) f << r.sample.times[k] << ',' << r.sample.controls(k, 0) << '\n';
  }
  if (s.svg) write_path_svg(r.sample, spec, out / "closed_loop.svg", "closed-loop path");
  auto f = open_out(out / "synthesize_summary.json");
  f << nlohmann::json{{"cost", estimate_json(r.cost)}, {"clamped_evaluations", r.clamped_evaluations}}.dump(2)
    << '\n';
  std::cout << "closed-loop cost " << r.cost.mean << " +- " << r.cost.std_error << '\n';
  return kExitPass;
}

int cmd_verify(const RunConfig& cfg, const fs::path& out) {
  ProblemSpec spec = make_spec(cfg);
  ValueField field = load_or_solve(cfg, spec, out);
  double factor = 1.0;
  ValueField companion = companion_field(cfg, spec, factor);
  FeedbackPolicy policy = make_policy(spec, field);
  const auto& v = cfg.verify;
  LagSpace space = field.lag_space();
  auto lags = probe_lag_states(space, v.probes, v.seed, v.probe_shrink);
  std::vector<LiftedState> states;
  for (const auto& s : lags) states.push_back(space.embed(s));

  VerificationConfig vc;
  vc.T = verification_horizon(spec, states, v.tail_tolerance, v.T, v.dt);
  vc.dt = v.dt;
  vc.paths = v.paths;
  vc.seed = v.seed;
  vc.random_challengers = v.random_challengers;
  vc.random_pieces = v.random_pieces;
  vc.constant_challengers = v.constant_challengers;
  vc.include_oracle = v.include_oracle;
  vc.oracle.T = vc.T;
  vc.oracle.dt = v.dt;
  vc.oracle.pieces = v.oracle_pieces;
  vc.oracle.paths = v.oracle_paths;
  vc.oracle.seed = stream_seed(v.seed, 0x0ac);
  auto mesh = spec.controls.mesh(spec.control_mesh);
  for (int i = 0; i < v.oracle_levels; ++i) {
    std::size_t idx = v.oracle_levels == 1 ? 0 : std::lround(i * (mesh.size() - 1.0) / (v.oracle_levels - 1));
    vc.oracle.levels.push_back(mesh[idx]);
  }
  std::vector<VerificationReport> reports;
  for (std::size_t i = 0; i < states.size(); ++i) {
    vc.grid_budget = grid_error_budget(field, &companion, states[i], factor);
    reports.push_back(verify_optimality(spec, policy, field, states[i], vc, static_cast<int>(i)));
  }
  auto f = open_out(out / "verification.json");
  write_report_json(reports, f);
  print_report_table(reports, std::cout);
  bool ok = std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.pass(); });
  return ok ? kExitPass : kExitFailed;
}

int cmd_regularize(const RunConfig& cfg, const fs::path& out) {
  ProblemSpec spec = make_spec(cfg);
  ValueField field = load_or_solve(cfg, spec, out);
  const auto& rg = cfg.regularize;
  LagSpace space = field.lag_space();
  LagFunction f = [&field](const Eigen::VectorXd& s) { return field.evaluate(s, true); };
  LipschitzProbe lp = lipschitz_minus1_probe(f, space, rg.lipschitz_samples, rg.seed);
  // 5% headroom for the sampled constant
  const double K = 1.05 * lp.K;
  auto queries = probe_lag_states(space, rg.queries, stream_seed(rg.seed, 1), 0.5);
  EnvelopeAudit audit = envelope_convergence_audit(f, space, K, rg.epsilons, queries);
  {
    auto o = open_out(out / "envelope_audit.csv");
    write_audit_csv(audit, o);
  }
  // two stored values enter each midpoint test, each off the fixed point by at most fixed_point_error
  SemiconvexityReport sc = semiconvexity_probe(f, central_region(space, 0.5), 0.0, 2000, stream_seed(rg.seed, 2),
                                               2.0 * field.fixed_point_error());

  // mollification along the leading B eigenvectors, telescoping check
  OperatorMatrix B = build_B(spec.grid, 1);
  BSpectrum spectrum = spectrum_B(B);
  StateFunction base = [&field](const LiftedState& x) { return field.evaluate(x, true); };
  Eigen::MatrixXd G = space.gram();
  bool moll_ok = true;
  {
    auto o = open_out(out / "mollification_audit.csv");
    o << "eta,k,query_id,delta,bound,pass\n";
    const int kmax = std::min(rg.k, spectrum.size());
    std::vector<MollifiedField> levels;
    for (int k = 0; k <= kmax; ++k)
      levels.push_back(partial_mollify(base, spectrum, spec.grid, 1, rg.eta, k, rg.quadrature_order));
    for (int k = 1; k <= kmax; ++k) {
      // Lipschitz constant of the field along e_k: K times the lag-space length of e_k
      LiftedState e = LiftedState::unflatten(spectrum.eigenvectors_minus1.col(k - 1), 1, spec.grid.m);
      Eigen::VectorXd pe = space.project(e);
      double Ck = K * std::sqrt(std::max(0.0, pe.dot(G * pe)));
      double bound = Ck * levels[k].widths()[k - 1] + 1e-9;
      for (std::size_t q = 0; q < queries.size(); ++q) {
        LiftedState x = space.embed(queries[q]);
        double delta = std::abs(levels[k](x) - levels[k - 1](x));
        bool pass = delta <= bound;
        moll_ok = moll_ok && pass;
        o << rg.eta << ',' << k << ',' << q << ',' << delta << ',' << bound << ',' << (pass ? "true" : "false")
          << '\n';
      }
    }
  }
  auto o = open_out(out / "regularize_summary.json");
  o << nlohmann::json{{"lipschitz", {{"K", lp.K}, {"K_second", lp.K_second}, {"stable", lp.pass}}},
                      {"envelope", {{"pass", audit.pass}, {"monotone", audit.monotone}, {"sup_gap", audit.sup_gap}}},
                      {"semiconvexity", {{"C", 0.0}, {"violations", sc.violations}, {"samples", sc.samples}}},
                      {"mollification", {{"pass", moll_ok}}}}
           .dump(2)
    << '\n';
  std::cout << "Lipschitz K = " << lp.K << ", envelope audit " << (audit.pass ? "PASS" : "FAIL")
            << ", semiconvexity (C=0) violations " << sc.violations << "/" << sc.samples << ", mollification "
            << (moll_ok ? "PASS" : "FAIL") << '\n';
  bool ok = audit.pass && lp.pass && sc.pass() && moll_ok;
  return ok ? kExitPass : kExitFailed;
}

int cmd_audit_operators(const RunConfig& cfg, const fs::path& out, bool dump, std::uint64_t seed) {
  SegmentGrid grid = cfg.model.grid();
  OperatorAudit a = audit_operators(grid, 1, 1000, seed);
  auto o = open_out(out / "operator_audit.json");
  o << nlohmann::json{{"segment_nodes", grid.m},
                      {"samples", a.samples},
                      {"identity_rel_error", a.identity_rel_error},
                      {"present_ratio", a.present_ratio},
                      {"weak_B_max_ratio", a.weak_B.max_ratio},
                      {"weak_B_pass", a.weak_B.pass},
                      {"pass", a.pass}}
           .dump(2)
    << '\n';
  if (dump) {
    auto ai = open_out(out / "a_inverse.csv");
    dump_operator_csv(a_inverse_matrix(grid, 1), ai);
    auto b = open_out(out / "B.csv");
    dump_operator_csv(build_B(grid, 1), b);
  }
  std::cout << "identity rel. error " << a.identity_rel_error << ", max |x0|/|x|_-1 " << a.present_ratio
            << ", weak-B max ratio " << a.weak_B.max_ratio << " -> " << (a.pass ? "PASS" : "FAIL") << '\n';
  return a.pass ? kExitPass : kExitFailed;
}

}  // namespace

int run_command(const CliOptions& opt) {
  try {
    if (opt.threads > 0) set_thread_count(opt.threads);
    RunConfig cfg = load_config(opt.config);
    if (opt.seed) apply_seed(cfg, *opt.seed);
    fs::path out(opt.out);
    fs::create_directories(out);
    if (opt.command == "simulate") return cmd_simulate(cfg, out);
    if (opt.command == "solve") return cmd_solve(cfg, out);
    if (opt.command == "synthesize") return cmd_synthesize(cfg, out);
    if (opt.command == "verify") return cmd_verify(cfg, out);
    if (opt.command == "regularize") return cmd_regularize(cfg, out);
    if (opt.command == "audit-operators")
      return cmd_audit_operators(cfg, out, opt.dump_operators, opt.seed.value_or(cfg.solve.seed));
    throw ConfigError("unknown command " + opt.command);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitFailed;
  }
}

int run_cli(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("delay-hjb"));
  CLI::App app{"Optimal control of stochastic delay equations: simulate, solve, synthesize, verify"};
  app.require_subcommand(1);
  CliOptions opt;
  std::uint64_t seed = 0;
  const char* names[] = {"simulate", "solve", "synthesize", "verify", "regularize", "audit-operators"};
  const char* help[] = {"simulate paths under a constant control",
                        "solve the lag-chain Bellman equation and store the value field",
                        "simulate the closed loop under the argmax feedback",
                        "compare the feedback against open-loop challengers",
                        "envelope, semiconvexity and mollification audits",
                        "check the weak-norm operator identities"};
  for (int i = 0; i < 6; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", opt.config, "TOML or JSON configuration")->required();
    sub->add_option("--seed", seed, "override every seed in the configuration");
    sub->add_option("--threads", opt.threads, "worker threads (default DELAY_HJB_THREADS or all cores)");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_flag("--dump-operators", opt.dump_operators, "write A^-1 and B as CSV (audit-operators)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitPass : kExitConfig;
  }
  for (auto* sub : app.get_subcommands()) {
    opt.command = sub->get_name();
    if (sub->count("--seed") > 0) opt.seed = seed;
  }
  return run_command(opt);
}

}  // namespace delay_hjb
