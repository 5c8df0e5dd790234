#pragma once

// Argmax feedback built from a solved value field, closed-loop simulation and
// a Monte-Carlo optimality check against open-loop challengers.

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "delay_hjb/hilbert_lift.hpp"
#include "delay_hjb/sdde_engine.hpp"
#include "delay_hjb/value_solver.hpp"

namespace delay_hjb {

// Hamiltonian argmax at (x, gradient_x0(field, x)). Throws DomainError when
// x projects outside the grid box.
Eigen::VectorXd psi_select(const LiftedState& x, const ValueField& field, const ProblemSpec& spec);

class FeedbackPolicy {
 public:
  enum class Mode {
    Tabulated,   // scan of the control mesh
    ClosedForm,  // registered maximizer
    Constant,
  };

  static FeedbackPolicy tabulated(std::shared_ptr<const ValueField> field, const ProblemSpec& spec);
  static FeedbackPolicy closed_form(std::shared_ptr<const ValueField> field, const ProblemSpec& spec);
  static FeedbackPolicy constant(const Eigen::VectorXd& u);

  Mode mode() const { return mode_; }
  // Out-of-box states are clamped to the box when clamp_to_box is set
  // (the default for closed-loop runs); otherwise they raise DomainError.
  void set_clamp_to_box(bool on) { clamp_to_box_ = on; }
  Eigen::VectorXd select(const LiftedState& x) const;
  ControlSource source() const;
  long clamped_evaluations() const { return clamped_->load(); }

 private:
  Mode mode_ = Mode::Constant;
  std::shared_ptr<const ValueField> field_;
  std::shared_ptr<const ProblemSpec> spec_;
  std::vector<Eigen::VectorXd> mesh_;
  Eigen::VectorXd fixed_;
  bool clamp_to_box_ = true;
  std::shared_ptr<std::atomic<long>> clamped_ = std::make_shared<std::atomic<long>>(0);
};

struct ClosedLoopResult {
  CostEstimate cost;
  Path sample;  // path 0, noise kept
  long clamped_evaluations = 0;
};

ClosedLoopResult closed_loop_simulate(const ProblemSpec& spec, const FeedbackPolicy& policy, const LiftedState& x,
                                      double T, double dt, int paths, std::uint64_t seed);

struct VerificationConfig {
  double T = 10.0;
  double dt = 0.01;
  int paths = 1000;
  std::uint64_t seed = 17;
  int random_challengers = 50;
  int random_pieces = 4;
  int constant_challengers = 5;
  bool include_oracle = true;
  OracleConfig oracle;  // T, dt and seed are taken from this config
  double z = 2.0;       // dominance multiplier on the paired standard error
  double mc_z = 3.0;    // value check multiplier on the feedback standard error
  double grid_budget = 0.0;
  // Largest acceptable paired standard error; 0 disables the pilot check.
  double target_se = 0.0;
  int pilot_paths = 100;
};

struct ChallengerResult {
  std::string name;
  CostEstimate cost;
  double joint_se = 0.0;  // standard error of the paired difference
  double margin = 0.0;    // challenger mean - feedback mean
  bool pass = false;
};

struct VerificationReport {
  int probe_id = 0;
  Eigen::VectorXd lag_state;
  double value_hat = 0.0;
  CostEstimate feedback;
  long clamped_evaluations = 0;
  std::vector<ChallengerResult> challengers;
  double margin = 0.0;  // min over challengers of (challenger mean - feedback mean)
  double grid_budget = 0.0, tail_budget = 0.0, mc_budget = 0.0;
  double value_gap = 0.0;  // |J_feedback - value_hat|
  bool dominance_pass = false;
  bool value_pass = false;
  bool pass() const { return dominance_pass && value_pass; }
};

VerificationReport verify_optimality(const ProblemSpec& spec, const FeedbackPolicy& policy, const ValueField& field,
                                     const LiftedState& x, const VerificationConfig& config, int probe_id = 0);

// Grid part of the error budget at a state: interpolation error carried
// through the discounted recursion, plus factor * |V - V_companion| where the
// companion is a coarser discretization (first-order Richardson estimate).
double grid_error_budget(const ValueField& field, const ValueField* companion, const LiftedState& x,
                         double factor = 1.0);

void write_report_json(const std::vector<VerificationReport>& reports, std::ostream& out);
void print_report_table(const std::vector<VerificationReport>& reports, std::ostream& out);

}  // namespace delay_hjb
