#pragma once

// Run configuration: TOML, with JSON accepted as a fallback. Unknown keys are
// rejected. serialize_config writes every field, so parse(serialize(c)) == c.

#include <cstdint>
#include <string>
#include <vector>

#include "delay_hjb/advertising.hpp"
#include "delay_hjb/value_solver.hpp"

namespace delay_hjb {

struct SolveSettings {
  int lags = 3;
  int nodes = 21;
  int gh_order = 7;
  double tol = 1e-6;
  int max_iter = 2000;
  StageRule stage_rule = StageRule::Trapezoid;
  bool auto_box = true;
  double box_lo = 0.0, box_hi = 0.0;
  double sd_multiplier = 4.0;
  double calibration_T = 10.0;
  int calibration_paths = 64;
  std::uint64_t seed = 11;
};

struct SimulateSettings {
  double T = 10.0;
  double dt = 0.01;
  int paths = 1000;
  int export_paths = 3;
  double control = 0.0;  // constant control for the simulate command
  std::uint64_t seed = 1;
  bool svg = true;
};

struct VerifySettings {
  int probes = 5;
  double T = 10.0;
  double dt = 0.01;
  int paths = 1000;
  std::uint64_t seed = 17;
  int random_challengers = 50;
  int random_pieces = 4;
  int constant_challengers = 5;
  bool include_oracle = true;
  int oracle_pieces = 2;
  int oracle_levels = 11;
  int oracle_paths = 200;
  double tail_tolerance = 0.05;
  double probe_shrink = 0.5;  // probes drawn from this central share of the box
};

struct RegularizeSettings {
  std::vector<double> epsilons = {0.1, 0.05, 0.01};
  int queries = 20;
  int lipschitz_samples = 200;
  double eta = 0.1;
  int k = 2;
  int quadrature_order = 9;
  std::uint64_t seed = 23;
};

struct RunConfig {
  AdvertisingConfig model;
  SolveSettings solve;
  SimulateSettings simulate;
  VerifySettings verify;
  RegularizeSettings regularize;
};

// Format is picked from the extension (.json) or by trying TOML first.
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& text, bool json = false);
std::string serialize_config(const RunConfig& cfg);

}  // namespace delay_hjb
