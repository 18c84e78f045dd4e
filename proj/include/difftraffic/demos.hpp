#pragma once

// Canonical scenarios used by the tools, the bundled scenario files and the tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "difftraffic/arz.hpp"
#include "difftraffic/core.hpp"

namespace difftraffic::demos {

/// Cell with density rho moving at u (y = rho (u - u_eq)).
inline CellState cell_at_speed(double rho, double u, double u_max, double gamma = 0.5) {
  return {rho, arz::relative_flow(rho, u, arz::Model{u_max, gamma})};
}

/// One macro lane with a smooth density bump.
inline Scenario macro_lane(std::size_t cells = 10, double dx = 20.0, double dt = 0.1) {
  Scenario scn;
  scn.config.dt = dt;
  LaneSpec l;
  l.id = 0;
  l.kind = LaneKind::Macro;
  l.macro.dx = dx;
  l.macro.u_max = 30.0;
  for (std::size_t i = 0; i < cells; ++i) {
    const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(cells);
    const double rho = 0.25 + 0.15 * std::sin(2.0 * 3.141592653589793 * x);
    l.macro.cells.push_back(cell_at_speed(rho, 0.9 * arz::u_eq(rho, {l.macro.u_max, 0.5}), l.macro.u_max));
  }
  l.macro.upstream_boundary = BoundaryCondition::outflow();
  l.macro.downstream_boundary = BoundaryCondition::outflow();
  scn.lanes.push_back(l);
  return scn;
}

/// Closed macro lane: nothing enters or leaves.
inline Scenario walled_lane(std::size_t cells = 50, double dx = 20.0, double dt = 0.1) {
  Scenario scn = macro_lane(cells, dx, dt);
  scn.lanes[0].macro.upstream_boundary = BoundaryCondition::wall();
  scn.lanes[0].macro.downstream_boundary = BoundaryCondition::wall();
  return scn;
}

/// Two-cell lane whose inner interface is a shock with zero speed: a free
/// left cell running into a slower, denser right cell.
inline Scenario stationary_shock(double dt = 0.1) {
  Scenario scn;
  scn.config.dt = dt;
  const arz::Model m{30.0, 0.5};
  const CellState ql = cell_at_speed(0.25, 27.0, m.u_max);
  auto speed = [&](double u_r) { return arz::solve_riemann(ql, cell_at_speed(0.5, u_r, m.u_max), m).lambda_s; };
  double lo = 0.5, hi = 26.0;  // lambda_s < 0 at lo, > 0 at hi
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const auto s = speed(mid);
    if (s && *s > 0.0) hi = mid;
    else lo = mid;
  }
  LaneSpec l;
  l.id = 0;
  l.kind = LaneKind::Macro;
  l.macro.dx = 20.0;
  l.macro.u_max = m.u_max;
  l.macro.cells = {ql, cell_at_speed(0.5, hi, m.u_max)};
  scn.lanes.push_back(l);
  return scn;
}

/// Macro lane (id 0) -> micro lane (id 1) -> macro lane (id 2).
///
/// Demand is light enough that emitted vehicles are spaced well beyond the
/// entry clearance and the aggregation window holds at most one vehicle.
inline Scenario hybrid_chain() {
  Scenario scn;
  scn.config.dt = 0.1;
  const double U = 30.0;

  LaneSpec a;
  a.id = 0;
  a.kind = LaneKind::Macro;
  a.macro.dx = 20.0;
  a.macro.u_max = U;
  for (int i = 0; i < 10; ++i) {
    const double rho = 0.1 + 0.02 * std::sin(0.7 * i);
    a.macro.cells.push_back(cell_at_speed(rho, 0.95 * arz::u_eq(rho, {U, 0.5}), U));
  }
  a.macro.upstream_boundary = BoundaryCondition::inflow({0.1, 0.0});
  a.macro.downstream_boundary = BoundaryCondition::outflow();

  LaneSpec b;
  b.id = 1;
  b.kind = LaneKind::Micro;
  b.micro.length = 150.0;
  const double pos[] = {127.0, 79.0, 31.0};
  const double vel[] = {22.0, 20.0, 21.0};
  for (int i = 0; i < 3; ++i) {
    VehicleState v;
    v.id = static_cast<VehicleId>(i);
    v.p = pos[i];
    v.v = vel[i];
    b.micro.vehicles.push_back(v);
  }

  LaneSpec c;
  c.id = 2;
  c.kind = LaneKind::Macro;
  c.macro.dx = 20.0;
  c.macro.u_max = U;
  for (int i = 0; i < 10; ++i) {
    const double rho = 0.08 + 0.02 * std::cos(0.5 * i);
    c.macro.cells.push_back(cell_at_speed(rho, 0.95 * arz::u_eq(rho, {U, 0.5}), U));
  }
  c.macro.upstream_boundary = BoundaryCondition::outflow();
  c.macro.downstream_boundary = BoundaryCondition::outflow();

  scn.lanes = {a, b, c};
  scn.links = {Link{0, 1, std::nullopt}, Link{1, 2, std::nullopt}};
  return scn;
}

/// Micro lane led by a controlled pace car followed by `followers` vehicles at
/// equilibrium spacing, all at speed v0.
inline Scenario pace_car(std::size_t followers, std::size_t steps, double v0 = 30.0, double dt = 0.1) {
  Scenario scn;
  scn.config.dt = dt;
  LaneSpec l;
  l.id = 0;
  l.kind = LaneKind::Micro;
  l.micro.length = 1e6;
  IdmParams prm;
  prm.v_targ = 35.0;
  prm.a_max = 1.5;
  prm.a_pref = 2.0;
  prm.t_pref = 1.2;
  // Followers at this spacing have zero acceleration when v = v0.
  const double vr = v0 / prm.v_targ;
  const double free_term = 1.0 - vr * vr * vr * vr;
  const double gap = (prm.s_min + v0 * prm.t_pref) / std::sqrt(free_term);
  double p = 2000.0;
  for (std::size_t i = 0; i <= followers; ++i) {
    VehicleState v;
    v.id = i;
    v.p = p;
    v.v = v0;
    v.params = prm;
    l.micro.vehicles.push_back(v);
    p -= gap + prm.length;
  }
  scn.lanes.push_back(l);
  scn.controls.push_back({ControlChannel::Kind::LeadAcceleration, 0, std::vector<double>(steps, 0.0)});
  return scn;
}

/// Two macro approaches (id 0: west-east, id 1: north-south) ending at one
/// signalized stop line. Each lane's downstream flux is multiplied by a gate
/// control; the demand densities set the inflow.
inline Scenario signal_toy(double demand_we, double demand_ns, std::size_t steps, std::size_t cells = 10,
                           double dt = 0.5) {
  Scenario scn;
  scn.config.dt = dt;
  const double U = 15.0;
  for (int id = 0; id < 2; ++id) {
    const double d = id == 0 ? demand_we : demand_ns;
    LaneSpec l;
    l.id = id;
    l.kind = LaneKind::Macro;
    l.macro.dx = 10.0;
    l.macro.u_max = U;
    l.macro.cells.assign(cells, CellState{d, 0.0});
    l.macro.upstream_boundary = BoundaryCondition::inflow({d, 0.0});
    l.macro.downstream_boundary = BoundaryCondition::outflow();
    scn.lanes.push_back(l);
    scn.controls.push_back({ControlChannel::Kind::OutflowGate, id, std::vector<double>(steps, 1.0)});
  }
  return scn;
}

/// `roads` independent roads carrying `vehicles` vehicles in total. Road r is
/// a macro -> micro -> macro chain whose micro stretch covers the fraction
/// `epsilon` of its length. epsilon = 0 gives pure macro roads, 1 pure micro.
/// Macro cells are `dx` long.
inline Scenario epsilon_roads(double epsilon, std::size_t roads = 10, std::size_t vehicles = 10000,
                              double road_length = 20000.0, double dx = 500.0) {
  Scenario scn;
  scn.config.dt = 0.1;
  const double U = 30.0;
  const double per_road = static_cast<double>(vehicles) / static_cast<double>(roads);
  const double spacing = road_length / per_road;  // front-to-front distance
  const double rho = scn.config.vehicle_length / spacing;
  const double v = arz::u_eq(rho, {U, 0.5});
  const double micro_len = epsilon * road_length;
  const double macro_len = road_length - micro_len;
  const auto macro_cells = static_cast<std::size_t>(std::lround(macro_len / (2.0 * dx)));
  LaneId id = 0;
  for (std::size_t r = 0; r < roads; ++r) {
    auto macro = [&](bool upstream) {
      LaneSpec l;
      l.id = id++;
      l.kind = LaneKind::Macro;
      l.macro.dx = dx;
      l.macro.u_max = U;
      l.macro.cells.assign(std::max<std::size_t>(macro_cells, 1), CellState{rho, 0.0});
      l.macro.upstream_boundary = upstream ? BoundaryCondition::inflow({rho, 0.0}) : BoundaryCondition::outflow();
      l.macro.downstream_boundary = BoundaryCondition::outflow();
      return l;
    };
    if (epsilon <= 0.0) {
      LaneSpec l = macro(true);
      l.macro.cells.assign(static_cast<std::size_t>(std::lround(road_length / dx)), CellState{rho, 0.0});
      scn.lanes.push_back(l);
      continue;
    }
    LaneSpec micro;
    micro.kind = LaneKind::Micro;
    micro.micro.length = micro_len;
    IdmParams prm;
    prm.t_pref = 0.8;
    micro.idm_ranges.t_pref = {prm.t_pref, prm.t_pref};
    const auto n = static_cast<std::size_t>(std::floor(micro_len / spacing));
    for (std::size_t i = 0; i < n; ++i) {
      VehicleState veh;
      veh.p = micro_len - 0.5 * spacing - static_cast<double>(i) * spacing;
      veh.v = v;
      veh.params = prm;
      micro.micro.vehicles.push_back(veh);
    }
    if (epsilon >= 1.0) {
      micro.id = id++;
      scn.lanes.push_back(micro);
      continue;
    }
    LaneSpec up = macro(true);
    micro.id = id++;
    LaneSpec down = macro(false);
    scn.links.push_back({up.id, micro.id, std::nullopt});
    scn.links.push_back({micro.id, down.id, std::nullopt});
    scn.lanes.push_back(up);
    scn.lanes.push_back(micro);
    scn.lanes.push_back(down);
  }
  VehicleId next = 0;
  for (auto& l : scn.lanes)
    for (auto& veh : l.micro.vehicles) veh.id = next++;
  return scn;
}

/// Random starting guess around a known initial state: macro densities
/// scaled by a factor in [1 - density_jitter, 1 + density_jitter] at a speed
/// of 0.8 to 1.0 times equilibrium, vehicles shifted by up to
/// +-vehicle_jitter in position and speed.
inline Scenario perturbed_initial_state(Scenario scn, std::uint64_t seed, double density_jitter = 0.3,
                                        double vehicle_jitter = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& lane : scn.lanes) {
    if (lane.kind == LaneKind::Macro) {
      const arz::Model m{lane.macro.u_max, scn.config.gamma};
      for (auto& c : lane.macro.cells) {
        const double rho = std::min(1.0, c.rho * (1.0 - density_jitter + 2.0 * density_jitter * unit(rng)));
        c = cell_at_speed(rho, arz::u_eq(rho, m) * (0.8 + 0.2 * unit(rng)), lane.macro.u_max, scn.config.gamma);
      }
    } else {
      for (auto& v : lane.micro.vehicles) {
        v.p += vehicle_jitter * (2.0 * unit(rng) - 1.0);
        v.v = std::max(0.0, v.v + vehicle_jitter * (2.0 * unit(rng) - 1.0));
      }
    }
  }
  return scn;
}

}  // namespace difftraffic::demos
