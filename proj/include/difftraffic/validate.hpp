#pragma once

// Scenario validation. Reports every violated rule; never throws.

#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "difftraffic/arz.hpp"
#include "difftraffic/core.hpp"

namespace difftraffic {

namespace detail {

inline bool finite_positive(double x) { return std::isfinite(x) && x > 0.0; }

inline void check_cell(std::vector<std::string>& out, const std::string& where, const CellState& c,
                       const arz::Model& m) {
  if (!std::isfinite(c.rho) || !std::isfinite(c.y)) {
    out.push_back(where + ": non-finite state");
    return;
  }
  if (c.rho < 0.0 || c.rho > 1.0) {
    out.push_back(where + ": rho out of [0,1]");
    return;
  }
  if (arz::is_vacuum(c)) return;
  const double u = arz::velocity_from_state(c, m).u;
  const double tol = 1e-9 * m.u_max;
  if (u < -tol || u > m.u_max + tol) out.push_back(where + ": velocity out of [0, u_max]");
}

inline void check_params(std::vector<std::string>& out, const std::string& where, const IdmParams& p) {
  for (double x : {p.s_min, p.t_pref, p.a_max, p.a_pref, p.v_targ, p.length}) {
    if (!finite_positive(x)) {
      out.push_back(where + ": IDM parameters must be positive");
      return;
    }
  }
}

}  // namespace detail

inline std::vector<std::string> validate_scenario(const Scenario& scn) {
  std::vector<std::string> out;
  const auto& c = scn.config;
  if (!detail::finite_positive(c.dt)) out.push_back("dt must be positive");
  if (!(c.gamma > 0.0 && c.gamma < 1.0)) out.push_back("gamma out of (0,1)");
  if (!detail::finite_positive(c.delta_exponent)) out.push_back("delta_exponent must be positive");
  if (!detail::finite_positive(c.vehicle_length)) out.push_back("vehicle_length must be positive");
  if (c.grad_clip && !detail::finite_positive(*c.grad_clip)) out.push_back("grad_clip must be positive");
  const bool gamma_ok = c.gamma > 0.0 && c.gamma < 1.0;

  std::set<LaneId> ids;
  for (const auto& l : scn.lanes) {
    const std::string lane = "lane " + std::to_string(l.id);
    if (!ids.insert(l.id).second) out.push_back(lane + ": duplicate lane id");
    if (l.kind == LaneKind::Macro) {
      const auto& m = l.macro;
      if (m.cells.empty()) out.push_back(lane + ": no cells");
      if (!detail::finite_positive(m.dx)) out.push_back(lane + ": dx must be positive");
      if (!detail::finite_positive(m.u_max)) out.push_back(lane + ": u_max must be positive");
      if (!detail::finite_positive(m.dx) || !detail::finite_positive(m.u_max) || !gamma_ok) continue;
      const arz::Model model{m.u_max, c.gamma};
      for (std::size_t i = 0; i < m.cells.size(); ++i)
        detail::check_cell(out, lane + " cell " + std::to_string(i), m.cells[i], model);
      for (const auto* b : {&m.upstream_boundary, &m.downstream_boundary}) {
        if (b->kind == BoundaryCondition::Kind::Inflow) detail::check_cell(out, lane + " inflow state", b->q, model);
      }
      // Characteristic speeds of admissible states are bounded by u_max.
      if (detail::finite_positive(c.dt) && c.dt * m.u_max > m.dx) out.push_back("CFL violation on " + lane);
    } else {
      const auto& m = l.micro;
      if (!detail::finite_positive(m.length)) out.push_back(lane + ": length must be positive");
      const auto& vs = m.vehicles;
      for (std::size_t i = 0; i < vs.size(); ++i) {
        const std::string veh = lane + " vehicle " + std::to_string(vs[i].id);
        detail::check_params(out, veh, vs[i].params);
        if (!std::isfinite(vs[i].p) || !std::isfinite(vs[i].v)) out.push_back(veh + ": non-finite state");
        if (vs[i].v < 0.0) out.push_back(veh + ": negative velocity");
        if (vs[i].p > m.length && !vs[i].exiting) out.push_back(veh + ": beyond lane end");
        if (i > 0 && !(vs[i - 1].p - vs[i].p - vs[i - 1].params.length > 0.0))
          out.push_back(veh + ": non-positive gap to its leader");
      }
      if (m.lead_boundary.kind == LeadBoundary::Kind::VirtualLeader && !vs.empty() &&
          !(m.lead_boundary.p - vs.front().p > 0.0))
        out.push_back(lane + ": first vehicle overlaps the virtual leader");
      std::set<VehicleId> vids;
      for (const auto& v : vs)
        if (!vids.insert(v.id).second) out.push_back(lane + ": duplicate vehicle id " + std::to_string(v.id));
      const auto& r = l.idm_ranges;
      for (const auto* p : {&r.s_min, &r.t_pref, &r.a_max, &r.a_pref, &r.v_targ, &r.length}) {
        if (!(detail::finite_positive(p->first) && p->second >= p->first && std::isfinite(p->second))) {
          out.push_back(lane + ": invalid idm_ranges");
          break;
        }
      }
    }
  }

  std::vector<int> outs(scn.lanes.size(), 0), ins(scn.lanes.size(), 0);
  for (std::size_t k = 0; k < scn.links.size(); ++k) {
    const auto& L = scn.links[k];
    const std::string link = "link " + std::to_string(k);
    const int a = scn.lane_index(L.from), b = scn.lane_index(L.to);
    if (a < 0 || b < 0) {
      out.push_back(link + ": unknown lane");
      continue;
    }
    const auto& up = scn.lanes[static_cast<std::size_t>(a)];
    const auto& down = scn.lanes[static_cast<std::size_t>(b)];
    if (up.kind == down.kind) out.push_back(link + ": must join a macro lane and a micro lane");
    if (++outs[static_cast<std::size_t>(a)] > 1) out.push_back(link + ": lane " + std::to_string(L.from) + " has two outgoing links");
    if (++ins[static_cast<std::size_t>(b)] > 1) out.push_back(link + ": lane " + std::to_string(L.to) + " has two incoming links");
    if (L.window) {
      if (up.kind != LaneKind::Micro) out.push_back(link + ": window only applies to micro -> macro links");
      else if (!(*L.window > 0.0 && *L.window <= up.micro.length)) out.push_back(link + ": window out of (0, lane length]");
    } else if (up.kind == LaneKind::Micro && down.kind == LaneKind::Macro && down.macro.dx > up.micro.length) {
      out.push_back(link + ": default window longer than the micro lane");
    }
  }
  // One in and one out per lane makes every component a path or a cycle.
  for (std::size_t start = 0; start < scn.lanes.size(); ++start) {
    std::size_t cur = start;
    for (std::size_t hops = 0; hops <= scn.links.size(); ++hops) {
      const Link* next = nullptr;
      for (const auto& L : scn.links)
        if (scn.lane_index(L.from) == static_cast<int>(cur) && scn.lane_index(L.to) >= 0) next = &L;
      if (!next) break;
      cur = static_cast<std::size_t>(scn.lane_index(next->to));
      if (cur == start) {
        out.push_back("links form a cycle through lane " + std::to_string(scn.lanes[start].id));
        break;
      }
    }
  }

  std::set<std::pair<int, LaneId>> channels;
  for (std::size_t k = 0; k < scn.controls.size(); ++k) {
    const auto& ch = scn.controls[k];
    const std::string ctl = "control " + std::to_string(k);
    const int li = scn.lane_index(ch.lane);
    if (li < 0) {
      out.push_back(ctl + ": unknown lane");
      continue;
    }
    const auto kind = scn.lanes[static_cast<std::size_t>(li)].kind;
    if (ch.kind == ControlChannel::Kind::LeadAcceleration && kind != LaneKind::Micro)
      out.push_back(ctl + ": lead_acceleration needs a micro lane");
    if (ch.kind == ControlChannel::Kind::OutflowGate && kind != LaneKind::Macro)
      out.push_back(ctl + ": outflow_gate needs a macro lane");
    if (!channels.insert({static_cast<int>(ch.kind), ch.lane}).second) out.push_back(ctl + ": duplicate channel");
    for (double v : ch.values) {
      if (!std::isfinite(v)) {
        out.push_back(ctl + ": non-finite value");
        break;
      }
      if (ch.kind == ControlChannel::Kind::OutflowGate && (v < 0.0 || v > 1.0)) {
        out.push_back(ctl + ": gate value out of [0,1]");
        break;
      }
    }
  }
  return out;
}

}  // namespace difftraffic
