#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "delay_hjb/config.hpp"
#include "delay_hjb/feedback_synthesis.hpp"
#include "delay_hjb/sdde_engine.hpp"
#include "delay_hjb/value_solver.hpp"

namespace delay_hjb {

enum ExitCode : int { kExitPass = 0, kExitConfig = 1, kExitFailed = 2 };

struct CliOptions {
  std::string command;
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  int threads = 0;
  bool dump_operators = false;
};

int run_cli(int argc, char** argv);
int run_command(const CliOptions& options);

// Pipeline pieces shared by the commands.
GridConfig grid_config(const RunConfig& cfg, const ProblemSpec& spec);
ValueField solve_value_field(const RunConfig& cfg, const ProblemSpec& spec, StageRule rule);
// Coarser companion solve for the grid error budget: L-1 lags when L >= 2
// (Richardson factor L-1), otherwise the other stage rule (factor 1).
ValueField companion_field(const RunConfig& cfg, const ProblemSpec& spec, double& factor);
// Smallest lattice-aligned horizon >= base whose tail bound meets tolerance at every state.
double verification_horizon(const ProblemSpec& spec, const std::vector<LiftedState>& states, double tolerance,
                            double base, double dt);

}  // namespace delay_hjb
