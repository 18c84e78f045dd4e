#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "difftraffic/linalg.hpp"

namespace difftraffic {

enum class ConversionMode { Deterministic, Stochastic };

/// How the reverse sweep treats the discrete macro/micro conversions.
///  - Ancillary: unit weights carried by each vehicle route density gradients
///    through aggregation windows and back into the emitting macro cell.
///  - Pathwise: only the derivative of the forward map as implemented; vehicle
///    counts are piecewise constant, so the density path contributes nothing.
enum class GradientMode { Ancillary, Pathwise };

struct SolverConfig {
  double dt = 0.1;
  double gamma = 0.5;
  double delta_exponent = 4.0;
  std::optional<double> grad_clip;
  std::uint64_t rng_seed = 0;
  ConversionMode conversion_mode = ConversionMode::Deterministic;
  /// Mean vehicle length (m). Converts normalized density (cars per car
  /// length) into vehicles per meter at the conversion interfaces.
  double vehicle_length = 5.0;
  GradientMode gradient_mode = GradientMode::Ancillary;

  friend bool operator==(const SolverConfig&, const SolverConfig&) = default;
};

/// Conserved quantities of one macro cell.
struct CellState {
  double rho = 0.0;  ///< cars per car length, in [0, 1]
  double y = 0.0;    ///< relative flow rho * (u - u_eq(rho))

  constexpr Vec2 vec() const { return {rho, y}; }
  static constexpr CellState from(const Vec2& q) { return {q[0], q[1]}; }
  friend bool operator==(const CellState&, const CellState&) = default;
};

struct BoundaryCondition {
  enum class Kind { Inflow, Outflow, Wall };

  Kind kind = Kind::Outflow;
  CellState q;  ///< prescribed ghost state, Inflow only

  static BoundaryCondition inflow(CellState state) { return {Kind::Inflow, state}; }
  static BoundaryCondition outflow() { return {Kind::Outflow, {}}; }
  static BoundaryCondition wall() { return {Kind::Wall, {}}; }

  friend bool operator==(const BoundaryCondition&, const BoundaryCondition&) = default;
};

struct MacroLaneState {
  std::vector<CellState> cells;
  double dx = 10.0;
  double u_max = 30.0;
  BoundaryCondition upstream_boundary = BoundaryCondition::outflow();
  BoundaryCondition downstream_boundary = BoundaryCondition::outflow();
  /// Cumulative density mass (car lengths) that entered through the upstream
  /// boundary and left through the downstream boundary.
  double inflow_total = 0.0;
  double outflow_total = 0.0;

  double length() const { return dx * static_cast<double>(cells.size()); }

  /// Total mass in vehicles.
  double vehicle_mass(double vehicle_length) const {
    double sum = 0.0;
    for (const auto& c : cells) sum += c.rho;
    return sum * dx / vehicle_length;
  }

  friend bool operator==(const MacroLaneState&, const MacroLaneState&) = default;
};

struct IdmParams {
  double s_min = 2.0;   ///< minimum gap (m)
  double t_pref = 1.5;  ///< desired time headway (s)
  double a_max = 1.0;   ///< maximum acceleration (m/s^2)
  double a_pref = 1.5;  ///< comfortable deceleration (m/s^2, positive)
  double v_targ = 30.0; ///< desired velocity (m/s)
  double length = 5.0;  ///< vehicle length (m)

  friend bool operator==(const IdmParams&, const IdmParams&) = default;
};

using VehicleId = std::uint64_t;

struct VehicleState {
  VehicleId id = 0;
  double p = 0.0;  ///< front bumper position along the lane (m)
  double v = 0.0;  ///< velocity (m/s)
  IdmParams params;
  bool exiting = false;

  constexpr Vec2 vec() const { return {p, v}; }
  friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

/// What the most downstream vehicle of a micro lane follows.
struct LeadBoundary {
  enum class Kind { Free, VirtualLeader };
  Kind kind = Kind::Free;
  double p = 0.0;
  double v = 0.0;

  static LeadBoundary free() { return {}; }
  static LeadBoundary virtual_leader(double p, double v) { return {Kind::VirtualLeader, p, v}; }
  friend bool operator==(const LeadBoundary&, const LeadBoundary&) = default;
};

/// Vehicles ordered by position, index 0 furthest downstream.
struct MicroLaneState {
  std::vector<VehicleState> vehicles;
  double length = 100.0;
  LeadBoundary lead_boundary;

  friend bool operator==(const MicroLaneState&, const MicroLaneState&) = default;
};

/// Uniform ranges that IDM parameters of emitted vehicles are drawn from.
struct IdmParamRanges {
  std::pair<double, double> s_min{2.0, 2.0};
  std::pair<double, double> t_pref{1.5, 1.5};
  std::pair<double, double> a_max{1.0, 1.0};
  std::pair<double, double> a_pref{1.5, 1.5};
  std::pair<double, double> v_targ{30.0, 30.0};
  std::pair<double, double> length{5.0, 5.0};

  friend bool operator==(const IdmParamRanges&, const IdmParamRanges&) = default;
};

enum class LaneKind { Macro, Micro };

using LaneId = int;

struct LaneSpec {
  LaneId id = 0;
  LaneKind kind = LaneKind::Macro;
  MacroLaneState macro;  ///< meaningful when kind == Macro
  MicroLaneState micro;  ///< meaningful when kind == Micro
  IdmParamRanges idm_ranges;
  /// Request d(loss)/d(u_max) for this macro lane.
  bool differentiate_u_max = false;

  friend bool operator==(const LaneSpec&, const LaneSpec&) = default;
};

/// Connects the downstream end of `from` to the upstream start of `to`.
struct Link {
  LaneId from = 0;
  LaneId to = 0;
  /// Micro -> macro only: length of the aggregation window at the end of the
  /// micro lane. Defaults to the downstream lane's cell length.
  std::optional<double> window;

  friend bool operator==(const Link&, const Link&) = default;
};

struct ControlChannel {
  enum class Kind {
    LeadAcceleration,  ///< overrides the acceleration of vehicle 0 of a micro lane
    OutflowGate,       ///< multiplies the downstream boundary flux of a macro lane
  };
  Kind kind = Kind::LeadAcceleration;
  LaneId lane = 0;
  std::vector<double> values;  ///< one per step; missing steps leave the lane uncontrolled

  friend bool operator==(const ControlChannel&, const ControlChannel&) = default;
};

struct Scenario {
  SolverConfig config;
  std::vector<LaneSpec> lanes;
  std::vector<Link> links;
  std::vector<ControlChannel> controls;

  friend bool operator==(const Scenario&, const Scenario&) = default;

  /// Index into `lanes`, or -1.
  int lane_index(LaneId id) const {
    for (std::size_t i = 0; i < lanes.size(); ++i)
      if (lanes[i].id == id) return static_cast<int>(i);
    return -1;
  }
  const LaneSpec& lane(LaneId id) const;
  LaneSpec& lane(LaneId id);
};

}  // namespace difftraffic

#include "difftraffic/errors.hpp"

namespace difftraffic {

inline const LaneSpec& Scenario::lane(LaneId id) const {
  const int i = lane_index(id);
  if (i < 0) throw ScenarioError("unknown lane id " + std::to_string(id));
  return lanes[static_cast<std::size_t>(i)];
}

inline LaneSpec& Scenario::lane(LaneId id) {
  const int i = lane_index(id);
  if (i < 0) throw ScenarioError("unknown lane id " + std::to_string(id));
  return lanes[static_cast<std::size_t>(i)];
}

}  // namespace difftraffic
