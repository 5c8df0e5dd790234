#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "delay_hjb/errors.hpp"
#include "delay_hjb/value_solver.hpp"

namespace delay_hjb {

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

nlohmann::json vec_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd json_vec(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void save_value_field(const ValueField& field, const std::string& header_path, const std::string& body_path) {
  if (field.values.size() != field.mdp.node_count())
    throw InvalidArgument("save_value_field: value array does not match the grid");
  std::ostringstream body;
  body << "node,value\n" << std::setprecision(17);
  for (std::size_t i = 0; i < field.values.size(); ++i) body << i << ',' << field.values[i] << '\n';
  const std::string text = body.str();

  const LagChainMDP& m = field.mdp;
  nlohmann::json j;
  j["format"] = "delay-hjb-value/1";
  j["body"] = std::filesystem::path(body_path).filename().string();
  j["body_fnv1a"] = hex(fnv1a(text));
  j["lags"] = m.lags;
  j["delta"] = m.delta;
  j["axis"] = {{"lo", m.axis.lo}, {"hi", m.axis.hi}, {"nodes", m.axis.nodes}};
  j["segment"] = {{"d", m.grid.d}, {"m", m.grid.m}};
  j["discount"] = m.discount;
  j["stage_rule"] = m.stage_rule == StageRule::Trapezoid ? "trapezoid" : "left";
  j["control_cell"] = m.control_cell;
  nlohmann::json mesh = nlohmann::json::array();
  for (const auto& u : m.control_mesh) mesh.push_back(vec_json(u));
  j["control_mesh"] = mesh;
  j["gh_nodes"] = m.gh_nodes;
  j["gh_weights"] = m.gh_weights;
  nlohmann::json k1 = nlohmann::json::array(), k2 = nlohmann::json::array();
  for (const auto& v : m.lag_kernel_a1) k1.push_back(vec_json(v));
  for (const auto& v : m.lag_kernel_a2) k2.push_back(vec_json(v));
  j["lag_kernel_a1"] = k1;
  j["lag_kernel_a2"] = k2;
  j["iterations"] = field.iterations;
  j["residual"] = field.residual;
  j["clamp_rate"] = field.clamp_rate;
  j["calibration_clamp_rate"] = m.calibration_clamp_rate;

  std::ofstream bout(body_path);
  if (!bout) throw std::runtime_error("save_value_field: cannot write " + body_path);
  bout << text;
  std::ofstream hout(header_path);
  if (!hout) throw std::runtime_error("save_value_field: cannot write " + header_path);
  hout << j.dump(2) << '\n';
}

ValueField load_value_field(const std::string& header_path) {
  std::ifstream hin(header_path);
  if (!hin) throw std::runtime_error("load_value_field: cannot read " + header_path);
  nlohmann::json j;
  try {
    hin >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("load_value_field: malformed header: ") + e.what());
  }
  if (j.value("format", "") != "delay-hjb-value/1") throw ConfigError("load_value_field: unknown format");
  auto body_path = std::filesystem::path(header_path).parent_path() / j.at("body").get<std::string>();
  std::ifstream bin(body_path);
  if (!bin) throw std::runtime_error("load_value_field: cannot read " + body_path.string());
  std::stringstream buf;
  buf << bin.rdbuf();
  const std::string text = buf.str();
  if (hex(fnv1a(text)) != j.at("body_fnv1a").get<std::string>())
    throw ConfigError("load_value_field: body hash mismatch for " + body_path.string());

  ValueField f;
  LagChainMDP& m = f.mdp;
  m.lags = j.at("lags");
  m.delta = j.at("delta");
  m.axis.lo = j.at("axis").at("lo");
  m.axis.hi = j.at("axis").at("hi");
  m.axis.nodes = j.at("axis").at("nodes");
  m.grid = SegmentGrid::uniform(j.at("segment").at("d"), j.at("segment").at("m"));
  m.discount = j.at("discount");
  m.stage_rule = j.at("stage_rule") == "trapezoid" ? StageRule::Trapezoid : StageRule::LeftPoint;
  m.control_cell = j.at("control_cell");
  for (const auto& u : j.at("control_mesh")) m.control_mesh.push_back(json_vec(u));
  m.gh_nodes = j.at("gh_nodes").get<std::vector<double>>();
  m.gh_weights = j.at("gh_weights").get<std::vector<double>>();
  for (const auto& v : j.at("lag_kernel_a1")) m.lag_kernel_a1.push_back(json_vec(v));
  for (const auto& v : j.at("lag_kernel_a2")) m.lag_kernel_a2.push_back(json_vec(v));
  m.calibration_clamp_rate = j.value("calibration_clamp_rate", 0.0);
  f.iterations = j.value("iterations", 0);
  f.residual = j.value("residual", 0.0);
  f.clamp_rate = j.value("clamp_rate", 0.0);

  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);
  if (line != "node,value") throw ConfigError("load_value_field: body header must be node,value");
  f.values.assign(m.node_count(), 0.0);
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    auto comma = line.find(',');
    std::size_t node = std::stoull(line.substr(0, comma));
    if (comma == std::string::npos || node >= f.values.size())
      throw ConfigError("load_value_field: bad body line: " + line);
    f.values[node] = std::stod(line.substr(comma + 1));
    ++count;
  }
  if (count != f.values.size()) throw ConfigError("load_value_field: body node count does not match the grid");
  return f;
}

}  // namespace delay_hjb
