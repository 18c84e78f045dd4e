#pragma once

// Intelligent Driver Model car following with explicit Euler integration and
// the per-vehicle analytical step Jacobians.

#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

#include "difftraffic/core.hpp"
#include "difftraffic/errors.hpp"
#include "difftraffic/linalg.hpp"

namespace difftraffic::idm {

/// The vehicle directly ahead: rear bumper at p - length.
struct Leader {
  double p = 0.0;
  double v = 0.0;
  double length = 0.0;
};

inline std::optional<Leader> leader_of(const MicroLaneState& lane, std::size_t i) {
  if (i > 0) {
    const auto& h = lane.vehicles[i - 1];
    return Leader{h.p, h.v, h.params.length};
  }
  if (lane.lead_boundary.kind == LeadBoundary::Kind::VirtualLeader) {
    return Leader{lane.lead_boundary.p, lane.lead_boundary.v, 0.0};
  }
  return std::nullopt;
}

namespace detail {

inline double pow_delta(double x, double delta) {
  if (delta == 4.0) {
    const double x2 = x * x;
    return x2 * x2;
  }
  return std::pow(x, delta);
}

}  // namespace detail

struct Acceleration {
  double a = 0.0;
  double s_opt = 0.0;
  double gap = 0.0;  ///< bumper-to-bumper distance, 0 when there is no leader
  bool has_leader = false;
};

inline Acceleration idm_acceleration(const VehicleState& ego, const std::optional<Leader>& leader, double delta) {
  const auto& prm = ego.params;
  Acceleration out;
  const double free_term = detail::pow_delta(ego.v / prm.v_targ, delta);
  if (!leader) {
    out.a = prm.a_max * (1.0 - free_term);
    return out;
  }
  out.has_leader = true;
  out.gap = leader->p - ego.p - leader->length;
  if (!(out.gap > 0.0)) {
    std::ostringstream os;
    os << "collision: vehicle " << ego.id << " has gap " << out.gap << " to its leader";
    throw CollisionError(os.str(), ego.id, 0);
  }
  const double dv = ego.v - leader->v;
  out.s_opt = prm.s_min + ego.v * prm.t_pref + ego.v * dv / (2.0 * std::sqrt(prm.a_max * prm.a_pref));
  const double ratio = out.s_opt / out.gap;
  out.a = prm.a_max * (1.0 - free_term - ratio * ratio);
  return out;
}

/// Gap at which a vehicle following an equally fast leader has zero acceleration.
inline double equilibrium_gap(double v, const IdmParams& prm, double delta) {
  const double s = prm.s_min + v * prm.t_pref;
  const double free_term = detail::pow_delta(v / prm.v_targ, delta);
  if (free_term >= 1.0) throw DomainError("equilibrium_gap: speed at or above the desired speed");
  return s / std::sqrt(1.0 - free_term);
}

struct StepResult {
  MicroLaneState lane;
  std::vector<double> acceleration;
  /// v + a dt fell below zero and was floored.
  std::vector<bool> velocity_clamped;
};

namespace detail {
inline double step_length(const std::vector<double>* step_lengths, std::size_t i, double dt) {
  return step_lengths && i < step_lengths->size() ? (*step_lengths)[i] : dt;
}
}  // namespace detail

/// One explicit Euler step: p += v dt, v = max(0, v + a dt).
///
/// `lead_acceleration` replaces the IDM acceleration of vehicle 0. Vehicles
/// past the lane end are flagged `exiting`. `step_lengths`, when given,
/// overrides dt per vehicle (vehicles that entered during the step). Throws
/// CollisionError when any follower ends the step with a non-positive gap.
inline StepResult micro_step(const MicroLaneState& lane, const SolverConfig& config,
                             std::optional<double> lead_acceleration = std::nullopt,
                             const std::vector<double>* step_lengths = nullptr) {
  const std::size_t n = lane.vehicles.size();
  StepResult r;
  r.acceleration.resize(n);
  r.velocity_clamped.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (i == 0 && lead_acceleration) {
      r.acceleration[i] = *lead_acceleration;
    } else {
      r.acceleration[i] = idm_acceleration(lane.vehicles[i], leader_of(lane, i), config.delta_exponent).a;
    }
  }
  r.lane = lane;
  for (std::size_t i = 0; i < n; ++i) {
    auto& veh = r.lane.vehicles[i];
    const double dt = detail::step_length(step_lengths, i, config.dt);
    const double v_next = veh.v + r.acceleration[i] * dt;
    veh.p += veh.v * dt;
    if (v_next < 0.0) {
      veh.v = 0.0;
      r.velocity_clamped[i] = true;
    } else {
      veh.v = v_next;
    }
    if (veh.p > lane.length) veh.exiting = true;
  }
  if (r.lane.lead_boundary.kind == LeadBoundary::Kind::VirtualLeader) {
    r.lane.lead_boundary.p += r.lane.lead_boundary.v * config.dt;
  }
  for (std::size_t i = 1; i < n; ++i) {
    const auto& h = r.lane.vehicles[i - 1];
    const auto& f = r.lane.vehicles[i];
    if (!(h.p - f.p - h.params.length > 0.0)) {
      std::ostringstream os;
      os << "collision between follower " << f.id << " and leader " << h.id << " (gap "
         << h.p - f.p - h.params.length << ")";
      throw CollisionError(os.str(), f.id, h.id);
    }
  }
  return r;
}

/// Non-zero blocks of d(p_i, v_i)(t+1) / d(p_j, v_j)(t): j = i and j = h(i).
struct StepJacobians {
  std::vector<Mat2> self;
  std::vector<Mat2> leader;  ///< zero for vehicle 0
  /// d(p_i, v_i)(t+1) / d(step length of vehicle i).
  std::vector<Vec2> d_step;
  /// d v_0(t+1) / d(lead acceleration control); zero when uncontrolled.
  double d_lead_v_d_control = 0.0;
};

inline StepJacobians idm_step_jacobians(const MicroLaneState& lane, const SolverConfig& config,
                                        std::optional<double> lead_acceleration = std::nullopt,
                                        const std::vector<double>* step_lengths = nullptr) {
  const std::size_t n = lane.vehicles.size();
  const double delta = config.delta_exponent;
  StepJacobians j;
  j.self.resize(n);
  j.leader.assign(n, Mat2::zero());
  j.d_step.assign(n, Vec2{});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ego = lane.vehicles[i];
    const double dt = detail::step_length(step_lengths, i, config.dt);
    const auto& prm = ego.params;
    double da_dp = 0.0, da_dv = 0.0, da_dph = 0.0, da_dvh = 0.0;
    double a = 0.0;
    const bool controlled = i == 0 && lead_acceleration.has_value();
    if (controlled) {
      a = *lead_acceleration;
    } else {
      const auto lead = leader_of(lane, i);
      const auto acc = idm_acceleration(ego, lead, delta);
      a = acc.a;
      da_dv = -prm.a_max * delta * detail::pow_delta(ego.v, delta - 1.0) / detail::pow_delta(prm.v_targ, delta);
      if (acc.has_leader) {
        const double sq = 2.0 * std::sqrt(prm.a_max * prm.a_pref);
        const double g = acc.gap;
        const double ds_dv = prm.t_pref + (2.0 * ego.v - lead->v) / sq;
        const double ds_dvh = -ego.v / sq;
        const double k3 = 2.0 * prm.a_max * acc.s_opt * acc.s_opt / (g * g * g);
        const double k2 = 2.0 * prm.a_max * acc.s_opt / (g * g);
        da_dp = -k3;
        da_dph = k3;
        da_dv -= k2 * ds_dv;
        da_dvh = -k2 * ds_dvh;
      }
    }
    const bool clamped = ego.v + a * dt < 0.0;
    j.d_step[i] = {ego.v, clamped ? 0.0 : a};
    if (clamped) {
      j.self[i] = {1.0, dt, 0.0, 0.0};
    } else {
      j.self[i] = {1.0, dt, dt * da_dp, 1.0 + dt * da_dv};
      if (i > 0) j.leader[i] = {0.0, 0.0, dt * da_dph, dt * da_dvh};
    }
    if (controlled && !clamped) j.d_lead_v_d_control = dt;
  }
  return j;
}

}  // namespace difftraffic::idm
