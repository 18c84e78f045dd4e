#pragma once

// JSON scenario documents.
//
// Top-level keys: config, lanes, links, vehicles, controls. Vehicles are
// listed at the top level with a `lane` field naming their micro lane, in
// downstream-first order. Unknown keys are rejected so typos surface early.

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "difftraffic/core.hpp"
#include "difftraffic/errors.hpp"

namespace difftraffic::io {

using nlohmann::json;

namespace detail {

inline void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ScenarioError(path + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ScenarioError(path + ": unknown key '" + key + "'");
  }
}

inline const json& require(const json& j, const std::string& path, const char* key) {
  if (!j.is_object()) throw ScenarioError(path + ": expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw ScenarioError(path + ": missing key '" + key + "'");
  return *it;
}

inline double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ScenarioError(path + ": expected a number");
  return j.get<double>();
}

inline double number_at(const json& j, const std::string& path, const char* key) {
  return number(require(j, path, key), path + "." + key);
}

template <class T>
T integer_at(const json& j, const std::string& path, const char* key) {
  const json& v = require(j, path, key);
  if (!v.is_number_integer()) throw ScenarioError(path + "." + key + ": expected an integer");
  return v.get<T>();
}

inline std::string string_at(const json& j, const std::string& path, const char* key) {
  const json& v = require(j, path, key);
  if (!v.is_string()) throw ScenarioError(path + "." + key + ": expected a string");
  return v.get<std::string>();
}

inline bool bool_or(const json& j, const std::string& path, const char* key, bool def) {
  const auto it = j.find(key);
  if (it == j.end()) return def;
  if (!it->is_boolean()) throw ScenarioError(path + "." + key + ": expected a boolean");
  return it->get<bool>();
}

inline const json& array_at(const json& j, const std::string& path, const char* key) {
  const json& v = require(j, path, key);
  if (!v.is_array()) throw ScenarioError(path + "." + key + ": expected an array");
  return v;
}

}  // namespace detail

inline json to_json(const CellState& c) { return {{"rho", c.rho}, {"y", c.y}}; }

inline CellState cell_from_json(const json& j, const std::string& path) {
  detail::check_keys(j, path, {"rho", "y"});
  return {detail::number_at(j, path, "rho"), detail::number_at(j, path, "y")};
}

inline json to_json(const BoundaryCondition& b) {
  switch (b.kind) {
    case BoundaryCondition::Kind::Inflow:
      return {{"kind", "inflow"}, {"q", to_json(b.q)}};
    case BoundaryCondition::Kind::Outflow:
      return {{"kind", "outflow"}};
    case BoundaryCondition::Kind::Wall:
      break;
  }
  return {{"kind", "wall"}};
}

inline BoundaryCondition boundary_from_json(const json& j, const std::string& path) {
  detail::check_keys(j, path, {"kind", "q"});
  const std::string kind = detail::string_at(j, path, "kind");
  if (kind == "inflow") return BoundaryCondition::inflow(cell_from_json(detail::require(j, path, "q"), path + ".q"));
  if (j.contains("q")) throw ScenarioError(path + ": key 'q' only applies to inflow boundaries");
  if (kind == "outflow") return BoundaryCondition::outflow();
  if (kind == "wall") return BoundaryCondition::wall();
  throw ScenarioError(path + ".kind: expected inflow, outflow or wall");
}

inline json to_json(const IdmParams& p) {
  return {{"s_min", p.s_min},   {"t_pref", p.t_pref}, {"a_max", p.a_max},
          {"a_pref", p.a_pref}, {"v_targ", p.v_targ}, {"length", p.length}};
}

inline IdmParams params_from_json(const json& j, const std::string& path) {
  detail::check_keys(j, path, {"s_min", "t_pref", "a_max", "a_pref", "v_targ", "length"});
  IdmParams p;
  p.s_min = detail::number_at(j, path, "s_min");
  p.t_pref = detail::number_at(j, path, "t_pref");
  p.a_max = detail::number_at(j, path, "a_max");
  p.a_pref = detail::number_at(j, path, "a_pref");
  p.v_targ = detail::number_at(j, path, "v_targ");
  p.length = detail::number_at(j, path, "length");
  return p;
}

inline json to_json(const IdmParamRanges& r) {
  auto pair = [](const std::pair<double, double>& p) { return json::array({p.first, p.second}); };
  return {{"s_min", pair(r.s_min)},   {"t_pref", pair(r.t_pref)}, {"a_max", pair(r.a_max)},
          {"a_pref", pair(r.a_pref)}, {"v_targ", pair(r.v_targ)}, {"length", pair(r.length)}};
}

inline IdmParamRanges ranges_from_json(const json& j, const std::string& path) {
  detail::check_keys(j, path, {"s_min", "t_pref", "a_max", "a_pref", "v_targ", "length"});
  IdmParamRanges r;
  auto pair = [&](const char* key, std::pair<double, double>& dst) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    const std::string p = path + "." + key;
    if (!it->is_array() || it->size() != 2) throw ScenarioError(p + ": expected [lo, hi]");
    dst = {detail::number((*it)[0], p + "[0]"), detail::number((*it)[1], p + "[1]")};
  };
  pair("s_min", r.s_min);
  pair("t_pref", r.t_pref);
  pair("a_max", r.a_max);
  pair("a_pref", r.a_pref);
  pair("v_targ", r.v_targ);
  pair("length", r.length);
  return r;
}

inline json to_json(const SolverConfig& c) {
  json j = {{"dt", c.dt},
            {"gamma", c.gamma},
            {"delta_exponent", c.delta_exponent},
            {"grad_clip", nullptr},
            {"rng_seed", c.rng_seed},
            {"conversion_mode", c.conversion_mode == ConversionMode::Deterministic ? "deterministic" : "stochastic"},
            {"vehicle_length", c.vehicle_length},
            {"gradient_mode", c.gradient_mode == GradientMode::Ancillary ? "ancillary" : "pathwise"}};
  if (c.grad_clip) j["grad_clip"] = *c.grad_clip;
  return j;
}

inline SolverConfig config_from_json(const json& j, const std::string& path) {
  detail::check_keys(j, path, {"dt", "gamma", "delta_exponent", "grad_clip", "rng_seed", "conversion_mode",
                               "vehicle_length", "gradient_mode"});
  SolverConfig c;
  c.dt = detail::number_at(j, path, "dt");
  if (j.contains("gamma")) c.gamma = detail::number_at(j, path, "gamma");
  if (j.contains("delta_exponent")) c.delta_exponent = detail::number_at(j, path, "delta_exponent");
  if (j.contains("grad_clip") && !j["grad_clip"].is_null()) c.grad_clip = detail::number_at(j, path, "grad_clip");
  if (j.contains("rng_seed")) c.rng_seed = detail::integer_at<std::uint64_t>(j, path, "rng_seed");
  if (j.contains("conversion_mode")) {
    const std::string m = detail::string_at(j, path, "conversion_mode");
    if (m == "deterministic") c.conversion_mode = ConversionMode::Deterministic;
    else if (m == "stochastic") c.conversion_mode = ConversionMode::Stochastic;
    else throw ScenarioError(path + ".conversion_mode: expected deterministic or stochastic");
  }
  if (j.contains("vehicle_length")) c.vehicle_length = detail::number_at(j, path, "vehicle_length");
  if (j.contains("gradient_mode")) {
    const std::string m = detail::string_at(j, path, "gradient_mode");
    if (m == "ancillary") c.gradient_mode = GradientMode::Ancillary;
    else if (m == "pathwise") c.gradient_mode = GradientMode::Pathwise;
    else throw ScenarioError(path + ".gradient_mode: expected ancillary or pathwise");
  }
  return c;
}

inline json to_json(const Scenario& scn) {
  json lanes = json::array(), vehicles = json::array(), links = json::array(), controls = json::array();
  for (const auto& l : scn.lanes) {
    json lj = {{"id", l.id}, {"kind", l.kind == LaneKind::Macro ? "macro" : "micro"}};
    if (l.kind == LaneKind::Macro) {
      json cells = json::array();
      for (const auto& c : l.macro.cells) cells.push_back(to_json(c));
      lj["dx"] = l.macro.dx;
      lj["u_max"] = l.macro.u_max;
      lj["cells"] = std::move(cells);
      lj["upstream_boundary"] = to_json(l.macro.upstream_boundary);
      lj["downstream_boundary"] = to_json(l.macro.downstream_boundary);
      lj["inflow_total"] = l.macro.inflow_total;
      lj["outflow_total"] = l.macro.outflow_total;
      lj["differentiate_u_max"] = l.differentiate_u_max;
    } else {
      lj["length"] = l.micro.length;
      const auto& lb = l.micro.lead_boundary;
      lj["lead_boundary"] = lb.kind == LeadBoundary::Kind::Free
                                ? json{{"kind", "free"}}
                                : json{{"kind", "virtual_leader"}, {"p", lb.p}, {"v", lb.v}};
      lj["idm_ranges"] = to_json(l.idm_ranges);
      for (const auto& v : l.micro.vehicles) {
        vehicles.push_back({{"lane", l.id},
                            {"id", v.id},
                            {"p", v.p},
                            {"v", v.v},
                            {"params", to_json(v.params)},
                            {"exiting", v.exiting}});
      }
    }
    lanes.push_back(std::move(lj));
  }
  for (const auto& l : scn.links) {
    json k = {{"from", l.from}, {"to", l.to}};
    if (l.window) k["window"] = *l.window;
    links.push_back(std::move(k));
  }
  for (const auto& c : scn.controls) {
    controls.push_back({{"kind", c.kind == ControlChannel::Kind::LeadAcceleration ? "lead_acceleration" : "outflow_gate"},
                        {"lane", c.lane},
                        {"values", c.values}});
  }
  return {{"config", to_json(scn.config)},
          {"lanes", std::move(lanes)},
          {"links", std::move(links)},
          {"vehicles", std::move(vehicles)},
          {"controls", std::move(controls)}};
}

inline Scenario scenario_from_json(const json& j) {
  detail::check_keys(j, "$", {"config", "lanes", "links", "vehicles", "controls"});
  Scenario scn;
  scn.config = config_from_json(detail::require(j, "$", "config"), "$.config");
  const json& lanes = detail::array_at(j, "$", "lanes");
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    const std::string path = "$.lanes[" + std::to_string(i) + "]";
    const json& lj = lanes[i];
    LaneSpec l;
    l.id = detail::integer_at<LaneId>(lj, path, "id");
    const std::string kind = detail::string_at(lj, path, "kind");
    if (kind == "macro") {
      detail::check_keys(lj, path, {"id", "kind", "dx", "u_max", "cells", "upstream_boundary", "downstream_boundary",
                                    "inflow_total", "outflow_total", "differentiate_u_max"});
      l.kind = LaneKind::Macro;
      l.macro.dx = detail::number_at(lj, path, "dx");
      l.macro.u_max = detail::number_at(lj, path, "u_max");
      const json& cells = detail::array_at(lj, path, "cells");
      for (std::size_t c = 0; c < cells.size(); ++c)
        l.macro.cells.push_back(cell_from_json(cells[c], path + ".cells[" + std::to_string(c) + "]"));
      if (lj.contains("upstream_boundary"))
        l.macro.upstream_boundary = boundary_from_json(lj["upstream_boundary"], path + ".upstream_boundary");
      if (lj.contains("downstream_boundary"))
        l.macro.downstream_boundary = boundary_from_json(lj["downstream_boundary"], path + ".downstream_boundary");
      if (lj.contains("inflow_total")) l.macro.inflow_total = detail::number_at(lj, path, "inflow_total");
      if (lj.contains("outflow_total")) l.macro.outflow_total = detail::number_at(lj, path, "outflow_total");
      l.differentiate_u_max = detail::bool_or(lj, path, "differentiate_u_max", false);
    } else if (kind == "micro") {
      detail::check_keys(lj, path, {"id", "kind", "length", "lead_boundary", "idm_ranges"});
      l.kind = LaneKind::Micro;
      l.micro.length = detail::number_at(lj, path, "length");
      if (lj.contains("lead_boundary")) {
        const json& lb = lj["lead_boundary"];
        const std::string lp = path + ".lead_boundary";
        const std::string lk = detail::string_at(lb, lp, "kind");
        if (lk == "free") {
          detail::check_keys(lb, lp, {"kind"});
        } else if (lk == "virtual_leader") {
          detail::check_keys(lb, lp, {"kind", "p", "v"});
          l.micro.lead_boundary = LeadBoundary::virtual_leader(detail::number_at(lb, lp, "p"), detail::number_at(lb, lp, "v"));
        } else {
          throw ScenarioError(lp + ".kind: expected free or virtual_leader");
        }
      }
      if (lj.contains("idm_ranges")) l.idm_ranges = ranges_from_json(lj["idm_ranges"], path + ".idm_ranges");
    } else {
      throw ScenarioError(path + ".kind: expected macro or micro");
    }
    if (scn.lane_index(l.id) >= 0) throw ScenarioError(path + ".id: duplicate lane id " + std::to_string(l.id));
    scn.lanes.push_back(std::move(l));
  }
  if (j.contains("links")) {
    const json& links = detail::array_at(j, "$", "links");
    for (std::size_t i = 0; i < links.size(); ++i) {
      const std::string path = "$.links[" + std::to_string(i) + "]";
      detail::check_keys(links[i], path, {"from", "to", "window"});
      Link l;
      l.from = detail::integer_at<LaneId>(links[i], path, "from");
      l.to = detail::integer_at<LaneId>(links[i], path, "to");
      if (links[i].contains("window")) l.window = detail::number_at(links[i], path, "window");
      scn.links.push_back(l);
    }
  }
  if (j.contains("vehicles")) {
    const json& vs = detail::array_at(j, "$", "vehicles");
    for (std::size_t i = 0; i < vs.size(); ++i) {
      const std::string path = "$.vehicles[" + std::to_string(i) + "]";
      detail::check_keys(vs[i], path, {"lane", "id", "p", "v", "params", "exiting"});
      const LaneId lane = detail::integer_at<LaneId>(vs[i], path, "lane");
      const int li = scn.lane_index(lane);
      if (li < 0 || scn.lanes[static_cast<std::size_t>(li)].kind != LaneKind::Micro)
        throw ScenarioError(path + ".lane: no micro lane with id " + std::to_string(lane));
      VehicleState v;
      v.id = detail::integer_at<VehicleId>(vs[i], path, "id");
      v.p = detail::number_at(vs[i], path, "p");
      v.v = detail::number_at(vs[i], path, "v");
      if (vs[i].contains("params")) v.params = params_from_json(vs[i]["params"], path + ".params");
      v.exiting = detail::bool_or(vs[i], path, "exiting", false);
      scn.lanes[static_cast<std::size_t>(li)].micro.vehicles.push_back(v);
    }
  }
  if (j.contains("controls")) {
    const json& cs = detail::array_at(j, "$", "controls");
    for (std::size_t i = 0; i < cs.size(); ++i) {
      const std::string path = "$.controls[" + std::to_string(i) + "]";
      detail::check_keys(cs[i], path, {"kind", "lane", "values"});
      ControlChannel c;
      const std::string kind = detail::string_at(cs[i], path, "kind");
      if (kind == "lead_acceleration") c.kind = ControlChannel::Kind::LeadAcceleration;
      else if (kind == "outflow_gate") c.kind = ControlChannel::Kind::OutflowGate;
      else throw ScenarioError(path + ".kind: expected lead_acceleration or outflow_gate");
      c.lane = detail::integer_at<LaneId>(cs[i], path, "lane");
      const json& vals = detail::array_at(cs[i], path, "values");
      for (std::size_t k = 0; k < vals.size(); ++k)
        c.values.push_back(detail::number(vals[k], path + ".values[" + std::to_string(k) + "]"));
      scn.controls.push_back(std::move(c));
    }
  }
  return scn;
}

/// Parses JSON text; syntax errors report line and column.
inline json parse_json_text(const std::string& text, const std::string& source = "<input>") {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::string msg = e.what();
    if (const auto p = msg.find("parse error"); p != std::string::npos) msg = msg.substr(p);
    throw ScenarioError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + msg);
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ScenarioError(path + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Scenario parse_scenario(const std::string& text, const std::string& source = "<input>") {
  const json j = parse_json_text(text, source);
  try {
    return scenario_from_json(j);
  } catch (const ScenarioError& e) {
    throw ScenarioError(source + ": " + e.what());
  }
}

inline Scenario load_scenario(const std::string& path) { return parse_scenario(read_text_file(path), path); }

inline std::string dump_scenario(const Scenario& scn) { return to_json(scn).dump(2) + "\n"; }

inline void save_scenario(const Scenario& scn, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ScenarioError(path + ": cannot write file");
  out << dump_scenario(scn);
}

}  // namespace difftraffic::io
