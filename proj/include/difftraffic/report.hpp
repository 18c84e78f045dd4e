#pragma once

// Run reports, long-format state time series and gradient bundles as files.
//
// State CSV columns, fixed order:
//   step,time,lane,entity,index,rho,y,u,p,v
// `entity` is `cell` (index = cell index; rho, y, u filled) or `vehicle`
// (index = vehicle id; p, v filled). Floats carry 17 significant digits.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "difftraffic/arz.hpp"
#include "difftraffic/engine.hpp"
#include "difftraffic/scenario_io.hpp"

namespace difftraffic::report {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Monotonic stopwatch in seconds.
class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

struct LaneSummary {
  LaneId id = 0;
  LaneKind kind = LaneKind::Macro;
  std::size_t size = 0;  ///< cells or vehicles
  double mass = 0.0;     ///< vehicles
  double mean_speed = 0.0;
  double min_rho = 0.0;
  double max_rho = 0.0;
};

inline std::vector<LaneSummary> summarize(const Scenario& scn, const NetworkState& s) {
  std::vector<LaneSummary> out;
  for (std::size_t i = 0; i < scn.lanes.size(); ++i) {
    const auto& spec = scn.lanes[i];
    LaneSummary ls;
    ls.id = spec.id;
    ls.kind = spec.kind;
    if (spec.kind == LaneKind::Macro) {
      const auto& m = s.lanes[i].macro;
      const arz::Model model{m.u_max, scn.config.gamma};
      ls.size = m.cells.size();
      ls.mass = m.vehicle_mass(scn.config.vehicle_length);
      double flow = 0.0, rho_sum = 0.0;
      for (std::size_t k = 0; k < m.cells.size(); ++k) {
        const auto& c = m.cells[k];
        const double u = arz::velocity_from_state(c, model).u;
        flow += c.rho * u;
        rho_sum += c.rho;
        ls.min_rho = k == 0 ? c.rho : std::min(ls.min_rho, c.rho);
        ls.max_rho = k == 0 ? c.rho : std::max(ls.max_rho, c.rho);
      }
      ls.mean_speed = rho_sum > 0.0 ? flow / rho_sum : m.u_max;
    } else {
      const auto& vs = s.lanes[i].micro.vehicles;
      ls.size = vs.size();
      ls.mass = static_cast<double>(vs.size());
      double sum = 0.0;
      for (const auto& v : vs) sum += v.v;
      ls.mean_speed = vs.empty() ? 0.0 : sum / static_cast<double>(vs.size());
    }
    out.push_back(ls);
  }
  return out;
}

struct RunReport {
  std::size_t steps = 0;
  double forward_seconds = 0.0;
  double backward_seconds = 0.0;  ///< zero when no reverse sweep ran
  std::vector<LaneSummary> lanes;
  Diagnostics diagnostics;
  double mass_audit_total = 0.0;
  std::uint64_t scenario_hash = 0;
  SolverConfig config;

  double steps_per_second() const { return forward_seconds > 0.0 ? static_cast<double>(steps) / forward_seconds : 0.0; }
  std::int64_t warnings() const {
    return diagnostics.clamp_count + diagnostics.deferred + diagnostics.vacuum_warnings;
  }
};

inline RunReport make_report(const Scenario& scn, const SimulationResult& res, std::size_t steps,
                             double forward_seconds) {
  RunReport r;
  r.steps = steps;
  r.forward_seconds = forward_seconds;
  r.lanes = summarize(scn, res.final_state);
  r.diagnostics = res.diagnostics;
  r.mass_audit_total = mass_audit(scn, res.final_state).total();
  r.scenario_hash = hash_scenario(scn);
  r.config = scn.config;
  return r;
}

inline json to_json(const RunReport& r) {
  json lanes = json::array();
  for (const auto& l : r.lanes) {
    lanes.push_back({{"id", l.id},
                     {"kind", l.kind == LaneKind::Macro ? "macro" : "micro"},
                     {"size", l.size},
                     {"mass", l.mass},
                     {"mean_speed", l.mean_speed},
                     {"min_rho", l.min_rho},
                     {"max_rho", l.max_rho}});
  }
  const auto& d = r.diagnostics;
  return {{"schema_version", kSchemaVersion},
          {"steps", r.steps},
          {"forward_seconds", r.forward_seconds},
          {"backward_seconds", r.backward_seconds},
          {"steps_per_second", r.steps_per_second()},
          {"lanes", std::move(lanes)},
          {"counters",
           {{"clamp_count", d.clamp_count},
            {"emitted", d.emitted},
            {"deferred", d.deferred},
            {"exited", d.exited},
            {"near_shock_steps", d.near_shock_steps},
            {"vacuum_warnings", d.vacuum_warnings},
            {"warnings", r.warnings()}}},
          {"max_wave_speed", d.max_wave_speed},
          {"mass_audit_total", r.mass_audit_total},
          {"scenario_hash", r.scenario_hash},
          {"config", io::to_json(r.config)}};
}

inline void write_state_csv_header(std::ostream& os) { os << "step,time,lane,entity,index,rho,y,u,p,v\n"; }

/// Appends the rows of one state. Call with S^0 .. S^T.
inline void write_state_csv_rows(std::ostream& os, const Scenario& scn, const NetworkState& s) {
  const auto old = os.precision(17);
  const double t = static_cast<double>(s.step) * scn.config.dt;
  for (std::size_t i = 0; i < scn.lanes.size(); ++i) {
    const auto& spec = scn.lanes[i];
    if (spec.kind == LaneKind::Macro) {
      const auto& m = s.lanes[i].macro;
      const arz::Model model{m.u_max, scn.config.gamma};
      for (std::size_t k = 0; k < m.cells.size(); ++k) {
        const auto& c = m.cells[k];
        os << s.step << ',' << t << ',' << spec.id << ",cell," << k << ',' << c.rho << ',' << c.y << ','
           << arz::velocity_from_state(c, model).u << ",,\n";
      }
    } else {
      for (const auto& v : s.lanes[i].micro.vehicles) {
        os << s.step << ',' << t << ',' << spec.id << ",vehicle," << v.id << ",,,," << v.p << ',' << v.v << '\n';
      }
    }
  }
  os.precision(old);
}

inline json to_json(const GradientBundle& g) {
  json lanes = json::array();
  for (std::size_t i = 0; i < g.lane_ids.size(); ++i) {
    json cells = json::array(), vehicles = json::array();
    for (const auto& c : g.initial_cells[i]) cells.push_back({{"rho", c[0]}, {"y", c[1]}});
    for (const auto& v : g.initial_vehicles[i]) vehicles.push_back({{"p", v[0]}, {"v", v[1]}});
    lanes.push_back({{"id", g.lane_ids[i]}, {"cells", std::move(cells)}, {"vehicles", std::move(vehicles)}});
  }
  return {{"schema_version", kSchemaVersion},
          {"objective", g.objective},
          {"lanes", std::move(lanes)},
          {"controls", g.controls},
          {"parameters", g.parameters},
          {"vacuum_warnings", g.vacuum_warnings}};
}

}  // namespace difftraffic::report
