#include "delay_hjb/feedback_synthesis.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

#include "delay_hjb/errors.hpp"
#include "delay_hjb/parallel.hpp"

namespace delay_hjb {

Eigen::VectorXd psi_select(const LiftedState& x, const ValueField& field, const ProblemSpec& spec) {
  Eigen::VectorXd s = field.lag_space().project(x);
  if (!field.inside(s)) throw DomainError("psi_select: state lies outside the grid box (extrapolation)");
  return hamiltonian(x, gradient_x0(field, s), spec).argmax;
}

FeedbackPolicy FeedbackPolicy::tabulated(std::shared_ptr<const ValueField> field, const ProblemSpec& spec) {
  if (!field) throw InvalidArgument("FeedbackPolicy: missing value field");
  FeedbackPolicy p;
  p.mode_ = Mode::Tabulated;
  p.field_ = std::move(field);
  p.spec_ = std::make_shared<const ProblemSpec>(spec);
  p.mesh_ = spec.controls.mesh(spec.control_mesh);
  return p;
}

FeedbackPolicy FeedbackPolicy::closed_form(std::shared_ptr<const ValueField> field, const ProblemSpec& spec) {
  if (!field) throw InvalidArgument("FeedbackPolicy: missing value field");
  if (!spec.closed_form_maximizer) throw InvalidArgument("FeedbackPolicy: no closed-form maximizer registered");
  FeedbackPolicy p;
  p.mode_ = Mode::ClosedForm;
  p.field_ = std::move(field);
  p.spec_ = std::make_shared<const ProblemSpec>(spec);
  return p;
}

FeedbackPolicy FeedbackPolicy::constant(const Eigen::VectorXd& u) {
  FeedbackPolicy p;
  p.mode_ = Mode::Constant;
  p.fixed_ = u;
  return p;
}

Eigen::VectorXd FeedbackPolicy::select(const LiftedState& x) const {
  if (mode_ == Mode::Constant) return fixed_;
  const ValueField& f = *field_;
  Eigen::VectorXd s = f.lag_space().project(x);
  if (!f.inside(s)) {
    if (!clamp_to_box_) throw DomainError("FeedbackPolicy: state lies outside the grid box (extrapolation)");
    clamped_->fetch_add(1, std::memory_order_relaxed);
    s = s.cwiseMax(f.mdp.axis.lo).cwiseMin(f.mdp.axis.hi);
  }
  Eigen::VectorXd p0 = gradient_x0(f, s);
  if (mode_ == Mode::ClosedForm) return hamiltonian(x, p0, *spec_).argmax;
  return hamiltonian_mesh(x, p0, *spec_, mesh_).argmax;
}

ControlSource FeedbackPolicy::source() const {
  FeedbackPolicy self = *this;
  return ControlSource::policy([self](const LiftedState& Y, double, Eigen::VectorXd& u) { u = self.select(Y); });
}

ClosedLoopResult closed_loop_simulate(const ProblemSpec& spec, const FeedbackPolicy& policy, const LiftedState& x,
                                      double T, double dt, int paths, std::uint64_t seed) {
  ClosedLoopResult r;
  long before = policy.clamped_evaluations();
  ControlSource src = policy.source();
  r.cost = mc_cost(spec, x, src, T, dt, paths, seed);
  r.sample = integrate(spec, x, src, T, dt, seed, 0);
  r.clamped_evaluations = policy.clamped_evaluations() - before;
  return r;
}

namespace {

double paired_se(const CostEstimate& a, const CostEstimate& b) {
  const std::size_t P = a.samples.size();
  if (P != b.samples.size() || P < 2) return std::numeric_limits<double>::infinity();
  double mean = 0.0;
  for (std::size_t i = 0; i < P; ++i) mean += a.samples[i] - b.samples[i];
  mean /= P;
  double var = 0.0;
  for (std::size_t i = 0; i < P; ++i) {
    double d = a.samples[i] - b.samples[i] - mean;
    var += d * d;
  }
  return std::sqrt(var / (P - 1) / P);
}

}  // namespace

double grid_error_budget(const ValueField& field, const ValueField* companion, const LiftedState& x,
                         double factor) {
  double budget = field.interpolation_error_estimate() / (1.0 - field.mdp.discount);
  if (companion) budget += factor * std::abs(field.evaluate(x, true) - companion->evaluate(x, true));
  return budget;
}

VerificationReport verify_optimality(const ProblemSpec& spec, const FeedbackPolicy& policy, const ValueField& field,
                                     const LiftedState& x, const VerificationConfig& cfg, int probe_id) {
  VerificationReport rep;
  rep.probe_id = probe_id;
  rep.lag_state = field.lag_space().project(x);
  rep.value_hat = field.evaluate(rep.lag_state, false);

  std::vector<std::pair<std::string, ControlSource>> arms;
  const auto mesh = spec.controls.mesh(spec.control_mesh);
  const int C = std::min<int>(cfg.constant_challengers, static_cast<int>(mesh.size()));
  for (int i = 0; i < C; ++i) {
    std::size_t idx = C == 1 ? 0 : static_cast<std::size_t>(std::lround(i * (mesh.size() - 1.0) / (C - 1)));
    std::ostringstream name;
    name << "constant[" << mesh[idx].transpose() << "]";
    arms.emplace_back(name.str(), ControlSource::constant(mesh[idx]));
  }
  std::mt19937_64 rng(stream_seed(cfg.seed, 0xc4a1));
  std::uniform_int_distribution<std::size_t> pick(0, mesh.size() - 1);
  for (int i = 0; i < cfg.random_challengers; ++i) {
    std::vector<Eigen::VectorXd> levels;
    for (int k = 0; k < cfg.random_pieces; ++k) levels.push_back(mesh[pick(rng)]);
    arms.emplace_back("random_piecewise[" + std::to_string(i) + "]", ControlSource::piecewise(levels, cfg.T));
  }
  if (cfg.include_oracle) {
    OracleResult oracle = open_loop_oracle(spec, x, cfg.oracle);
    arms.emplace_back("oracle_minimizer",
                      ControlSource::piecewise(oracle.best_levels, cfg.oracle.T));
  }

  ControlSource fb = policy.source();
  if (cfg.target_se > 0.0 && !arms.empty()) {
    CostEstimate a = mc_cost(spec, x, fb, cfg.T, cfg.dt, cfg.pilot_paths, cfg.seed);
    double worst = 0.0;
    for (const auto& arm : arms) {
      CostEstimate b = mc_cost(spec, x, arm.second, cfg.T, cfg.dt, cfg.pilot_paths, cfg.seed);
      worst = std::max(worst, paired_se(a, b) * std::sqrt(static_cast<double>(cfg.pilot_paths)));
    }
    double required = std::ceil(worst * worst / (cfg.target_se * cfg.target_se));
    if (required > cfg.paths) {
      std::ostringstream msg;
      msg << "verify_optimality: " << cfg.paths << " paths cannot reach standard error " << cfg.target_se
          << "; at least " << static_cast<long>(required) << " paths are required";
      throw ConfigError(msg.str());
    }
  }

  long before = policy.clamped_evaluations();
  rep.feedback = mc_cost(spec, x, fb, cfg.T, cfg.dt, cfg.paths, cfg.seed);
  rep.clamped_evaluations = policy.clamped_evaluations() - before;
  rep.dominance_pass = true;
  rep.margin = std::numeric_limits<double>::infinity();
  for (const auto& arm : arms) {
    ChallengerResult c;
    c.name = arm.first;
    c.cost = mc_cost(spec, x, arm.second, cfg.T, cfg.dt, cfg.paths, cfg.seed);
    c.joint_se = paired_se(rep.feedback, c.cost);
    c.margin = c.cost.mean - rep.feedback.mean;
    c.pass = rep.feedback.mean <= c.cost.mean + cfg.z * c.joint_se;
    rep.dominance_pass = rep.dominance_pass && c.pass;
    rep.margin = std::min(rep.margin, c.margin);
    rep.challengers.push_back(std::move(c));
  }
  rep.grid_budget = cfg.grid_budget;
  rep.tail_budget = rep.feedback.tail_bound;
  rep.mc_budget = cfg.mc_z * rep.feedback.std_error;
  rep.value_gap = std::abs(rep.feedback.mean - rep.value_hat);
  rep.value_pass = rep.value_gap <= rep.grid_budget + rep.tail_budget + rep.mc_budget;
  if (rep.clamped_evaluations > 0)
    spdlog::info("verify_optimality: probe {} clamped {} policy evaluations to the grid box", probe_id,
                 rep.clamped_evaluations);
  return rep;
}

void write_report_json(const std::vector<VerificationReport>& reports, std::ostream& out) {
  auto est = [](const CostEstimate& e) {
    return nlohmann::json{{"mean", e.mean},   {"std_error", e.std_error},   {"paths", e.paths},
                          {"horizon", e.horizon}, {"tail_bound", e.tail_bound}};
  };
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json ch = nlohmann::json::array();
    for (const auto& c : r.challengers)
      ch.push_back({{"name", c.name}, {"cost", est(c.cost)}, {"joint_se", c.joint_se}, {"margin", c.margin},
                    {"pass", c.pass}});
    probes.push_back({{"probe_id", r.probe_id},
                      {"lag_state", std::vector<double>(r.lag_state.data(), r.lag_state.data() + r.lag_state.size())},
                      {"value_hat", r.value_hat},
                      {"feedback", est(r.feedback)},
                      {"clamped_evaluations", r.clamped_evaluations},
                      {"challengers", ch},
                      {"margin", r.margin},
                      {"budget", {{"grid", r.grid_budget}, {"tail", r.tail_budget}, {"mc", r.mc_budget}}},
                      {"value_gap", r.value_gap},
                      {"dominance_pass", r.dominance_pass},
                      {"value_pass", r.value_pass},
                      {"pass", r.pass()}});
  }
  bool all = std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.pass(); });
  nlohmann::json j{{"schema", "v1"}, {"pass", all}, {"probes", probes}};
  out << j.dump(2) << '\n';
}

void print_report_table(const std::vector<VerificationReport>& reports, std::ostream& out) {
  out << std::left << std::setw(6) << "probe" << std::setw(12) << "V_hat" << std::setw(12) << "J_fb"
      << std::setw(10) << "SE" << std::setw(12) << "min_margin" << std::setw(10) << "gap" << std::setw(10)
      << "budget" << "result\n";
  out << std::setprecision(5);
  for (const auto& r : reports) {
    out << std::setw(6) << r.probe_id << std::setw(12) << r.value_hat << std::setw(12) << r.feedback.mean
        << std::setw(10) << r.feedback.std_error << std::setw(12) << r.margin << std::setw(10) << r.value_gap
        << std::setw(10) << (r.grid_budget + r.tail_budget + r.mc_budget) << (r.pass() ? "PASS" : "FAIL") << '\n';
  }
}

}  // namespace delay_hjb
