#include "delay_hjb/config.hpp"

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "delay_hjb/errors.hpp"

namespace delay_hjb {

namespace {

toml::array json_array(const nlohmann::json& j, const std::string& where) {
  toml::array a;
  for (const auto& e : j) {
    if (e.is_object()) throw ConfigError("config: arrays of tables are not supported at " + where);
    if (e.is_array()) a.push_back(json_array(e, where));
    else if (e.is_boolean()) a.push_back(e.get<bool>());
    else if (e.is_number_integer()) a.push_back(e.get<std::int64_t>());
    else if (e.is_number()) a.push_back(e.get<double>());
    else if (e.is_string()) a.push_back(e.get<std::string>());
    else throw ConfigError("config: null value at " + where);
  }
  return a;
}

toml::table json_table(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: expected an object at " + (where.empty() ? "top level" : where));
  toml::table t;
  for (const auto& [key, val] : j.items()) {
    std::string path = where.empty() ? key : where + "." + key;
    if (val.is_object()) t.insert(key, json_table(val, path));
    else if (val.is_array()) t.insert(key, json_array(val, path));
    else if (val.is_boolean()) t.insert(key, val.get<bool>());
    else if (val.is_number_integer()) t.insert(key, val.get<std::int64_t>());
    else if (val.is_number()) t.insert(key, val.get<double>());
    else if (val.is_string()) t.insert(key, val.get<std::string>());
    else throw ConfigError("config: null value at " + path);
  }
  return t;
}

class Reader {
 public:
  explicit Reader(const toml::table& root) : root_(root) {}

  const toml::node* find(const std::string& path) {
    used_.insert(path);
    return root_.at_path(path).node();
  }

  void number(const std::string& path, double& out) {
    if (const auto* n = find(path)) {
      auto v = n->value<double>();
      if (!v || !(n->is_integer() || n->is_floating_point())) throw ConfigError("config: " + path + " must be a number");
      out = *v;
    }
  }

  template <typename Int>
  void integer(const std::string& path, Int& out) {
    if (const auto* n = find(path)) {
      if (!n->is_integer()) throw ConfigError("config: " + path + " must be an integer");
      std::int64_t v = *n->value<std::int64_t>();
      if (std::is_unsigned_v<Int> && v < 0) throw ConfigError("config: " + path + " must be nonnegative");
      out = static_cast<Int>(v);
    }
  }

  void boolean(const std::string& path, bool& out) {
    if (const auto* n = find(path)) {
      if (!n->is_boolean()) throw ConfigError("config: " + path + " must be true or false");
      out = *n->value<bool>();
    }
  }

  bool string(const std::string& path, std::string& out) {
    if (const auto* n = find(path)) {
      if (!n->is_string()) throw ConfigError("config: " + path + " must be a string");
      out = *n->value<std::string>();
      return true;
    }
    return false;
  }

  void numbers(const std::string& path, std::vector<double>& out) {
    if (const auto* n = find(path)) {
      const auto* arr = n->as_array();
      if (!arr) throw ConfigError("config: " + path + " must be an array of numbers");
      out.clear();
      for (const auto& e : *arr) {
        auto v = e.value<double>();
        if (!v) throw ConfigError("config: " + path + " must be an array of numbers");
        out.push_back(*v);
      }
    }
  }

  // number or array of numbers
  void scalar_or_list(const std::string& path, double& scalar, std::vector<double>& list) {
    if (const auto* n = root_.at_path(path).node()) {
      if (n->is_array()) numbers(path, list);
      else number(path, scalar);
    }
    used_.insert(path);
  }

  std::vector<std::string> unknown() const {
    std::vector<std::string> out;
    collect(root_, "", out);
    return out;
  }

 private:
  void collect(const toml::table& t, const std::string& prefix, std::vector<std::string>& out) const {
    for (const auto& [k, v] : t) {
      std::string path = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
      if (used_.count(path)) continue;
      if (const auto* sub = v.as_table()) {
        bool any = false;
        for (const auto& u : used_)
          if (u.rfind(path + ".", 0) == 0) any = true;
        if (!any) {
          out.push_back(path);
          continue;
        }
        collect(*sub, path, out);
      } else {
        out.push_back(path);
      }
    }
  }

  const toml::table& root_;
  std::set<std::string> used_;
};

RunConfig from_table(const toml::table& root) {
  Reader r(root);
  RunConfig c;
  AdvertisingConfig& m = c.model;
  r.number("model.a0", m.a0);
  r.number("model.c0", m.c0);
  r.number("model.sigma0", m.sigma0);
  r.number("model.rho", m.rho);
  r.number("model.u_bar", m.u_bar);
  r.number("model.d", m.d);
  r.integer("model.segment_nodes", m.segment_nodes);
  r.integer("model.control_mesh", m.control_mesh);

  std::string s;
  if (r.string("model.kernel.shape", s)) {
    if (s == "zero") m.kernel = AdvertisingConfig::KernelShape::Zero;
    else if (s == "linear") m.kernel = AdvertisingConfig::KernelShape::Linear;
    else if (s == "nodes") m.kernel = AdvertisingConfig::KernelShape::Nodes;
    else throw ConfigError("config: model.kernel.shape must be zero, linear or nodes");
  }
  r.number("model.kernel.alpha", m.alpha);
  r.numbers("model.kernel.values", m.kernel_values);

  if (r.string("model.cost.shape", s)) {
    if (s == "barrier") m.cost = AdvertisingConfig::CostShape::Barrier;
    else if (s == "power") m.cost = AdvertisingConfig::CostShape::Power;
    else throw ConfigError("config: model.cost.shape must be barrier or power");
  }
  r.number("model.cost.kappa", m.kappa);
  r.number("model.cost.exponent", m.cost_exponent);

  if (r.string("model.utility.shape", s)) {
    if (s == "linear") m.utility = AdvertisingConfig::UtilityShape::Linear;
    else if (s == "quadratic") m.utility = AdvertisingConfig::UtilityShape::Quadratic;
    else throw ConfigError("config: model.utility.shape must be linear or quadratic");
  }
  r.number("model.utility.gamma", m.gamma);
  r.number("model.utility.curvature", m.curvature);

  r.number("model.initial.x0", m.x0);
  r.scalar_or_list("model.initial.history", m.history_value, m.history);

  r.number("model.constants.lipschitz_C", m.lipschitz_C);
  r.number("model.constants.cost_growth", m.cost_growth);
  r.number("model.constants.moment_constant", m.moment_constant);
  r.number("model.constants.moment_rate", m.moment_rate);
  r.boolean("model.constants.strict_rho", m.strict_rho);

  SolveSettings& sv = c.solve;
  r.integer("solve.lags", sv.lags);
  r.integer("solve.nodes", sv.nodes);
  r.integer("solve.gh_order", sv.gh_order);
  r.number("solve.tol", sv.tol);
  r.integer("solve.max_iter", sv.max_iter);
  if (r.string("solve.stage_rule", s)) {
    if (s == "trapezoid") sv.stage_rule = StageRule::Trapezoid;
    else if (s == "left") sv.stage_rule = StageRule::LeftPoint;
    else throw ConfigError("config: solve.stage_rule must be trapezoid or left");
  }
  r.boolean("solve.auto_box", sv.auto_box);
  r.number("solve.box_lo", sv.box_lo);
  r.number("solve.box_hi", sv.box_hi);
  r.number("solve.sd_multiplier", sv.sd_multiplier);
  r.number("solve.calibration_T", sv.calibration_T);
  r.integer("solve.calibration_paths", sv.calibration_paths);
  r.integer("solve.seed", sv.seed);

  SimulateSettings& sim = c.simulate;
  r.number("simulate.T", sim.T);
  r.number("simulate.dt", sim.dt);
  r.integer("simulate.paths", sim.paths);
  r.integer("simulate.export_paths", sim.export_paths);
  r.number("simulate.control", sim.control);
  r.integer("simulate.seed", sim.seed);
  r.boolean("simulate.svg", sim.svg);

  VerifySettings& v = c.verify;
  r.integer("verify.probes", v.probes);
  r.number("verify.T", v.T);
  r.number("verify.dt", v.dt);
  r.integer("verify.paths", v.paths);
  r.integer("verify.seed", v.seed);
  r.integer("verify.random_challengers", v.random_challengers);
  r.integer("verify.random_pieces", v.random_pieces);
  r.integer("verify.constant_challengers", v.constant_challengers);
  r.boolean("verify.include_oracle", v.include_oracle);
  r.integer("verify.oracle_pieces", v.oracle_pieces);
  r.integer("verify.oracle_levels", v.oracle_levels);
  r.integer("verify.oracle_paths", v.oracle_paths);
  r.number("verify.tail_tolerance", v.tail_tolerance);
  r.number("verify.probe_shrink", v.probe_shrink);

  RegularizeSettings& rg = c.regularize;
  r.numbers("regularize.epsilons", rg.epsilons);
  r.integer("regularize.queries", rg.queries);
  r.integer("regularize.lipschitz_samples", rg.lipschitz_samples);
  r.number("regularize.eta", rg.eta);
  r.integer("regularize.k", rg.k);
  r.integer("regularize.quadrature_order", rg.quadrature_order);
  r.integer("regularize.seed", rg.seed);

  auto unknown = r.unknown();
  if (!unknown.empty()) {
    std::ostringstream msg;
    msg << "config: unknown keys:";
    for (const auto& k : unknown) msg << ' ' << k;
    throw ConfigError(msg.str());
  }

  // numeric settings outside the model
  std::vector<std::string> bad;
  if (sv.lags < 1) bad.push_back("solve.lags must be >= 1");
  if (sv.nodes < 3) bad.push_back("solve.nodes must be >= 3");
  if (sv.gh_order < 1) bad.push_back("solve.gh_order must be >= 1");
  if (!(sv.tol > 0.0)) bad.push_back("solve.tol must be > 0");
  if (!sv.auto_box && !(sv.box_hi > sv.box_lo)) bad.push_back("solve.box_lo must be below solve.box_hi");
  if (!(sim.T > 0.0) || !(sim.dt > 0.0) || sim.paths < 1) bad.push_back("simulate needs T > 0, dt > 0, paths >= 1");
  if (!(v.T > 0.0) || !(v.dt > 0.0) || v.paths < 2 || v.probes < 1)
    bad.push_back("verify needs T > 0, dt > 0, paths >= 2, probes >= 1");
  if (rg.epsilons.empty()) bad.push_back("regularize.epsilons must not be empty");
  for (double e : rg.epsilons)
    if (!(e > 0.0)) bad.push_back("regularize.epsilons must be positive");
  if (!(rg.eta > 0.0) || rg.k < 0) bad.push_back("regularize needs eta > 0 and k >= 0");
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << "invalid settings:";
    for (const auto& b : bad) msg << "\n  - " << b;
    throw ConfigError(msg.str());
  }
  m.validate();
  return c;
}

toml::array to_array(const std::vector<double>& v) {
  toml::array a;
  for (double x : v) a.push_back(x);
  return a;
}

}  // namespace

RunConfig parse_config(const std::string& text, bool json) {
  if (json) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: JSON parse error: ") + e.what());
    }
    return from_table(json_table(j, ""));
  }
  toml::table t;
  try {
    t = toml::parse(text);
  } catch (const toml::parse_error& e) {
    // fall back to JSON when the text looks like it
    auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') return parse_config(text, true);
    std::ostringstream msg;
    msg << "config: TOML parse error: " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(msg.str());
  }
  return from_table(t);
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  bool json = path.size() >= 5 && path.substr(path.size() - 5) == ".json";
  return parse_config(buf.str(), json);
}

std::string serialize_config(const RunConfig& c) {
  const AdvertisingConfig& m = c.model;
  const char* kernel = m.kernel == AdvertisingConfig::KernelShape::Zero     ? "zero"
                       : m.kernel == AdvertisingConfig::KernelShape::Linear ? "linear"
                                                                            : "nodes";
  toml::table kern{{"shape", kernel}, {"alpha", m.alpha}};
  if (!m.kernel_values.empty()) kern.insert("values", to_array(m.kernel_values));
  toml::table initial{{"x0", m.x0}};
  if (m.history.empty()) initial.insert("history", m.history_value);
  else initial.insert("history", to_array(m.history));
  toml::table constants{{"strict_rho", m.strict_rho}};
  if (!std::isnan(m.lipschitz_C)) constants.insert("lipschitz_C", m.lipschitz_C);
  if (!std::isnan(m.cost_growth)) constants.insert("cost_growth", m.cost_growth);
  if (!std::isnan(m.moment_constant)) constants.insert("moment_constant", m.moment_constant);
  if (!std::isnan(m.moment_rate)) constants.insert("moment_rate", m.moment_rate);

  toml::table model{
      {"a0", m.a0},
      {"c0", m.c0},
      {"sigma0", m.sigma0},
      {"rho", m.rho},
      {"u_bar", m.u_bar},
      {"d", m.d},
      {"segment_nodes", m.segment_nodes},
      {"control_mesh", m.control_mesh},
      {"kernel", kern},
      {"cost",
       toml::table{{"shape", m.cost == AdvertisingConfig::CostShape::Barrier ? "barrier" : "power"},
                   {"kappa", m.kappa},
                   {"exponent", m.cost_exponent}}},
      {"utility",
       toml::table{{"shape", m.utility == AdvertisingConfig::UtilityShape::Linear ? "linear" : "quadratic"},
                   {"gamma", m.gamma},
                   {"curvature", m.curvature}}},
      {"initial", initial},
      {"constants", constants},
  };
  const SolveSettings& sv = c.solve;
  toml::table solve{{"lags", sv.lags},
                    {"nodes", sv.nodes},
                    {"gh_order", sv.gh_order},
                    {"tol", sv.tol},
                    {"max_iter", sv.max_iter},
                    {"stage_rule", sv.stage_rule == StageRule::Trapezoid ? "trapezoid" : "left"},
                    {"auto_box", sv.auto_box},
                    {"box_lo", sv.box_lo},
                    {"box_hi", sv.box_hi},
                    {"sd_multiplier", sv.sd_multiplier},
                    {"calibration_T", sv.calibration_T},
                    {"calibration_paths", sv.calibration_paths},
                    {"seed", static_cast<std::int64_t>(sv.seed)}};
  const SimulateSettings& sim = c.simulate;
  toml::table simulate{{"T", sim.T},       {"dt", sim.dt},
                       {"paths", sim.paths}, {"export_paths", sim.export_paths}, {"control", sim.control},
                       {"seed", static_cast<std::int64_t>(sim.seed)}, {"svg", sim.svg}};
  const VerifySettings& v = c.verify;
  toml::table verify{{"probes", v.probes},
                     {"T", v.T},
                     {"dt", v.dt},
                     {"paths", v.paths},
                     {"seed", static_cast<std::int64_t>(v.seed)},
                     {"random_challengers", v.random_challengers},
                     {"random_pieces", v.random_pieces},
                     {"constant_challengers", v.constant_challengers},
                     {"include_oracle", v.include_oracle},
                     {"oracle_pieces", v.oracle_pieces},
                     {"oracle_levels", v.oracle_levels},
                     {"oracle_paths", v.oracle_paths},
                     {"tail_tolerance", v.tail_tolerance},
                     {"probe_shrink", v.probe_shrink}};
  const RegularizeSettings& rg = c.regularize;
  toml::table regularize{{"epsilons", to_array(rg.epsilons)},
                         {"queries", rg.queries},
                         {"lipschitz_samples", rg.lipschitz_samples},
                         {"eta", rg.eta},
                         {"k", rg.k},
                         {"quadrature_order", rg.quadrature_order},
                         {"seed", static_cast<std::int64_t>(rg.seed)}};
  toml::table root{{"model", model},
                   {"solve", solve},
                   {"simulate", simulate},
                   {"verify", verify},
                   {"regularize", regularize}};
  std::ostringstream out;
  out << root << '\n';
  return out.str();
}

}  // namespace delay_hjb
