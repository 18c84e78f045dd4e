#pragma once

// Conversions between macro and micro lanes: the flux capacitor that turns
// accumulated macro outflow into discrete vehicles, Poisson instantiation,
// window aggregation of vehicles into a macro ghost cell, and the reverse
// rules that route gradients through the unit vehicle weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <ostream>
#include <random>
#include <vector>

#include "difftraffic/arz.hpp"
#include "difftraffic/core.hpp"
#include "difftraffic/errors.hpp"
#include "difftraffic/idm.hpp"

namespace difftraffic::coupling {

/// Steps whose accumulation produced one vehicle, inclusive on both ends.
struct EmissionInterval {
  std::size_t first = 0;
  std::size_t last = 0;
  /// Accumulator beyond the crossed integer at the end of step `last`, in
  /// vehicles. Zero for vehicles drawn in stochastic mode.
  double overshoot = 0.0;

  friend bool operator==(const EmissionInterval&, const EmissionInterval&) = default;
};

struct EmissionRecord {
  std::size_t step = 0;  ///< step in which the vehicle entered the micro lane
  std::size_t link = 0;
  VehicleId id = 0;
  double v = 0.0;
  EmissionInterval interval;

  friend bool operator==(const EmissionRecord&, const EmissionRecord&) = default;
};

struct FluxCapacitor {
  double accumulator = 0.0;        ///< vehicles accumulated since the start of the run
  std::int64_t emitted_count = 0;  ///< vehicles placed on the micro lane
  /// Vehicles owed but not yet placed, oldest first.
  std::deque<EmissionInterval> pending;
  /// First step of the interval still being filled.
  std::size_t open_since = 0;
  /// Stochastic mode: crossings of the accumulator not yet claimed by a draw.
  std::deque<EmissionInterval> unclaimed;
  std::int64_t claims_ahead = 0;
  std::size_t stochastic_cursor = 0;

  /// Vehicles accounted for by the accumulator but not on the road.
  double in_transit() const { return accumulator - static_cast<double>(emitted_count); }

  friend bool operator==(const FluxCapacitor&, const FluxCapacitor&) = default;
};

/// Part of the step a vehicle spends on the micro lane when its crossing left
/// `overshoot` vehicles in the accumulator: overshoot * length / (rho v).
inline double entry_step(double overshoot, double rho, double v, const SolverConfig& config) {
  return rho > 0.0 && v > 0.0 ? std::min(config.dt, overshoot * config.vehicle_length / (rho * v)) : config.dt;
}

/// Vehicles per step carried by a macro boundary flux of normalized density.
inline double vehicles_per_step(double rho, double v, const SolverConfig& config) {
  return rho * v * config.dt / config.vehicle_length;
}

/// Adds rho v dt (in vehicles) and returns one interval per integer crossed.
inline std::vector<EmissionInterval> capacitor_accumulate(FluxCapacitor& cap, double rho, double v, std::size_t step,
                                                          const SolverConfig& config) {
  if (rho * v < 0.0) throw DomainError("capacitor_accumulate: negative flux");
  const double before = cap.accumulator;
  cap.accumulator += vehicles_per_step(rho, v, config);
  const auto crossed = static_cast<std::int64_t>(std::floor(cap.accumulator) - std::floor(before));
  std::vector<EmissionInterval> out;
  const double base = std::floor(before);
  for (std::int64_t k = 0; k < crossed; ++k) {
    const double level = base + static_cast<double>(k + 1);
    out.push_back({std::min(cap.open_since, step), step, cap.accumulator - level});
    cap.open_since = step + 1;
  }
  return out;
}

/// Stochastic instantiation: draws k ~ Poisson(rho v dt) vehicles.
///
/// The deterministic accumulator advances alongside; its crossings provide
/// the gradient intervals of the drawn vehicles, capped at the current step.
inline std::vector<EmissionInterval> poisson_emit(FluxCapacitor& cap, double rho, double v, std::size_t step,
                                                  std::mt19937_64& rng, const SolverConfig& config) {
  const double mean = vehicles_per_step(rho, v, config);
  for (const auto& iv : capacitor_accumulate(cap, rho, v, step, config)) {
    if (cap.claims_ahead > 0) {
      --cap.claims_ahead;
    } else {
      cap.unclaimed.push_back(iv);
    }
  }
  int k = 0;
  if (mean > 0.0) k = std::poisson_distribution<int>(mean)(rng);
  std::vector<EmissionInterval> out;
  for (int i = 0; i < k; ++i) {
    if (!cap.unclaimed.empty()) {
      out.push_back(cap.unclaimed.front());
      out.back().overshoot = 0.0;
      cap.unclaimed.pop_front();
    } else {
      ++cap.claims_ahead;
      const std::size_t first = std::max(cap.open_since, cap.stochastic_cursor);
      out.push_back(first <= step ? EmissionInterval{first, step, 0.0} : EmissionInterval{step, step, 0.0});
    }
    cap.stochastic_cursor = step + 1;
  }
  return out;
}

/// Aggregation window (l, r] at the downstream end of a micro lane.
struct AggregationWindow {
  double l = 0.0;
  double r = 0.0;

  double width() const { return r - l; }
  bool contains(double p) const { return p > l && p <= r; }
};

struct Aggregate {
  CellState q;
  double u = 0.0;  ///< mean member velocity; u_max of the target lane when empty
  std::size_t first = 0;  ///< members are vehicles [first, first + count)
  std::size_t count = 0;
};

/// Averages the vehicles inside the window into one macro cell.
///
/// Density is the member count per meter times the vehicle length, velocity
/// the arithmetic mean of member velocities. Vehicles are ordered downstream
/// first, so the members form one contiguous run.
inline Aggregate aggregate_micro_to_macro(const std::vector<VehicleState>& vehicles, const AggregationWindow& win,
                                          const arz::Model& target, const SolverConfig& config) {
  if (!(win.r > win.l)) throw DomainError("aggregate_micro_to_macro: empty window");
  Aggregate out;
  out.u = target.u_max;
  std::size_t i = 0;
  while (i < vehicles.size() && vehicles[i].p > win.r) ++i;
  out.first = i;
  double vsum = 0.0;
  while (i < vehicles.size() && win.contains(vehicles[i].p)) {
    vsum += vehicles[i].v;
    ++i;
  }
  out.count = i - out.first;
  if (out.count == 0) return out;
  const double rho = config.vehicle_length * static_cast<double>(out.count) / win.width();
  out.u = vsum / static_cast<double>(out.count);
  out.q = {rho, arz::relative_flow(rho, out.u, target)};
  return out;
}

struct AggregationGradients {
  double d_weight = 0.0;    ///< added to each member's weight adjoint
  double d_velocity = 0.0;  ///< added to each member's velocity adjoint
  double d_umax = 0.0;      ///< target lane u_max, through y = rho (u - u_eq)
};

/// Reverse rule of the aggregation for an adjoint (d/d rho, d/d y) on the cell.
inline AggregationGradients backward_through_aggregation(const Vec2& grad_cell, const Aggregate& agg,
                                                         const AggregationWindow& win, const arz::Model& target,
                                                         const SolverConfig& config) {
  AggregationGradients g;
  if (agg.count == 0) return g;
  const double rho = agg.q.rho;
  const double rg = target.pow_gamma(rho);
  const double ueq = target.u_max * (1.0 - rg);
  const double ueqp = -target.u_max * target.gamma * rg / rho;
  const double d_rho_at_u = grad_cell[0] + grad_cell[1] * (agg.u - ueq - rho * ueqp);
  const double d_u = grad_cell[1] * rho;
  g.d_weight = d_rho_at_u * config.vehicle_length / win.width();
  g.d_velocity = d_u / static_cast<double>(agg.count);
  g.d_umax = -grad_cell[1] * rho * (1.0 - rg);
  return g;
}

/// Adds a vehicle weight adjoint to the density adjoint of the emitting cell
/// over the vehicle's interval: d L / d rho(t) += d L / d w * v(t) dt / length.
///
/// `velocity(t)` returns the macro velocity used by the accumulator at step t;
/// `seed(t, value)` receives the contribution.
template <class VelocityAt, class Seed>
void backward_through_emission(double grad_w, const EmissionInterval& iv, const SolverConfig& config,
                               VelocityAt&& velocity, Seed&& seed) {
  if (iv.first > iv.last) throw TapeError("backward_through_emission: malformed interval");
  for (std::size_t t = iv.first; t <= iv.last; ++t) {
    seed(t, grad_w * velocity(t) * config.dt / config.vehicle_length);
  }
}

/// Stateless per-(link, step) random stream so any step can be replayed alone.
inline std::mt19937_64 conversion_rng(std::uint64_t seed, std::size_t link, std::size_t step) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  const std::uint64_t s = mix(mix(mix(seed) ^ static_cast<std::uint64_t>(link)) ^ static_cast<std::uint64_t>(step));
  return std::mt19937_64(s);
}

inline IdmParams sample_params(const IdmParamRanges& r, std::mt19937_64& rng) {
  auto draw = [&](const std::pair<double, double>& range) {
    if (range.first == range.second) return range.first;
    return std::uniform_real_distribution<double>(range.first, range.second)(rng);
  };
  IdmParams p;
  p.s_min = draw(r.s_min);
  p.t_pref = draw(r.t_pref);
  p.a_max = draw(r.a_max);
  p.a_pref = draw(r.a_pref);
  p.v_targ = draw(r.v_targ);
  p.length = draw(r.length);
  return p;
}

/// Distance the newest vehicle must keep from the tail of the lane before
/// another vehicle is placed at the lane start.
inline double entry_clearance(const IdmParams& entering, double v_entering, const VehicleState& tail) {
  const double sq = 2.0 * std::sqrt(entering.a_max * entering.a_pref);
  const double s_opt = entering.s_min + v_entering * entering.t_pref + v_entering * (v_entering - tail.v) / sq;
  return std::max(entering.s_min, s_opt);
}

inline void write_emission_csv(std::ostream& os, const std::vector<EmissionRecord>& log, double dt) {
  const auto old = os.precision(17);
  os << "step,time,link,vehicle_id,v,interval_first,interval_last\n";
  for (const auto& e : log) {
    os << e.step << ',' << static_cast<double>(e.step) * dt << ',' << e.link << ',' << e.id << ',' << e.v << ','
       << e.interval.first << ',' << e.interval.last << '\n';
  }
  os.precision(old);
}

}  // namespace difftraffic::coupling
