#pragma once

// First-order Godunov finite-volume step for one ARZ lane and its exact
// per-step Jacobian (block tridiagonal in the cell ordering).

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <vector>

#include "difftraffic/arz.hpp"
#include "difftraffic/core.hpp"
#include "difftraffic/errors.hpp"

namespace difftraffic::fvm {

inline arz::Model lane_model(const MacroLaneState& lane, const SolverConfig& config) {
  return {lane.u_max, config.gamma};
}

/// Per-step inputs that do not live in the lane state.
struct StepOptions {
  /// Ghost state imposed on the upstream boundary by a micro -> macro link.
  std::optional<CellState> upstream_override;
  /// A macro -> micro link drains the downstream end like an Outflow boundary.
  bool downstream_outflow = false;
  /// Multiplies the downstream boundary flux (signal stop line), in [0, 1].
  /// A gated Outflow end discharges into an empty intersection (vacuum ghost).
  std::optional<double> downstream_gate;
  bool check_cfl = true;
};

/// Ghost cell and its dependence on the adjacent edge cell.
struct Ghost {
  CellState q;
  Mat2 d_dcell;     ///< d ghost / d edge cell
  Vec2 d_dumax;     ///< d ghost / d u_max
  bool from_link = false;
};

inline Ghost upstream_ghost(const MacroLaneState& lane, const arz::Model& m, const StepOptions& opt) {
  if (opt.upstream_override) return {*opt.upstream_override, Mat2::zero(), {}, true};
  const auto& bc = lane.upstream_boundary;
  switch (bc.kind) {
    case BoundaryCondition::Kind::Inflow:
      return {bc.q, Mat2::zero(), {}, false};
    case BoundaryCondition::Kind::Outflow:
      return {lane.cells.front(), Mat2::identity(), {}, false};
    case BoundaryCondition::Kind::Wall:
      break;
  }
  // Nothing enters through a closed upstream end.
  (void)m;
  return {{0.0, 0.0}, Mat2::zero(), {}, false};
}

inline Ghost downstream_ghost(const MacroLaneState& lane, const arz::Model& m, const StepOptions& opt) {
  const CellState& last = lane.cells.back();
  if (opt.downstream_outflow) return {last, Mat2::identity(), {}, false};
  const auto& bc = lane.downstream_boundary;
  switch (bc.kind) {
    case BoundaryCondition::Kind::Inflow:
      return {bc.q, Mat2::zero(), {}, false};
    case BoundaryCondition::Kind::Outflow:
      if (opt.downstream_gate) return {{0.0, 0.0}, Mat2::zero(), {}, false};
      return {last, Mat2::identity(), {}, false};
    case BoundaryCondition::Kind::Wall:
      break;
  }
  // Mirror state: same density, zero velocity.
  if (arz::is_vacuum(last)) return {{0.0, 0.0}, Mat2::zero(), {}, false};
  const double rho = last.rho;
  const double ueq = arz::u_eq(rho, m);
  const double ueqp = arz::u_eq_prime(rho, m);
  return {{rho, -rho * ueq}, {1.0, 0.0, -(ueq + rho * ueqp), 0.0}, {0.0, -rho * (1.0 - m.pow_gamma(rho))}, false};
}

enum class Clamp : std::uint8_t { None = 0, Jam = 1, Vacuum = 2 };

struct StepResult {
  MacroLaneState lane;
  /// Interface k separates cell k-1 and cell k; interfaces 0 and N touch ghosts.
  std::vector<arz::RiemannSolution> interfaces;
  std::vector<Vec2> fluxes;
  std::vector<Clamp> clamps;
  int clamp_count = 0;
  double max_wave_speed = 0.0;
  /// Smallest distance to a non-smooth case switch over all non-vacuum interfaces.
  double min_margin = 0.0;
};

namespace detail {

inline void expand_wave_speed(double& acc, const CellState& q, const arz::Model& m) {
  if (arz::is_vacuum(q)) return;
  const Vec2 lam = arz::characteristic_speeds(q, m);
  acc = std::fmax(acc, lam.max_abs());
}

}  // namespace detail

/// Advances one lane by one time step.
///
/// Throws CflViolation when dt * max|lambda| > dx; the step is never sub-divided.
inline StepResult fvm_step_detailed(const MacroLaneState& lane, const SolverConfig& config,
                                    const StepOptions& opt = {}) {
  if (lane.cells.empty()) throw DomainError("fvm_step: lane has no cells");
  const arz::Model m = lane_model(lane, config);
  const std::size_t n = lane.cells.size();
  const Ghost up = upstream_ghost(lane, m, opt);
  const Ghost down = downstream_ghost(lane, m, opt);

  StepResult r;
  r.interfaces.resize(n + 1);
  r.fluxes.resize(n + 1);
  r.min_margin = INFINITY;

  double wave = 0.0;
  detail::expand_wave_speed(wave, up.q, m);
  detail::expand_wave_speed(wave, down.q, m);
  for (const auto& c : lane.cells) detail::expand_wave_speed(wave, c, m);
  r.max_wave_speed = wave;
  if (opt.check_cfl && config.dt * wave > lane.dx * (1.0 + 1e-12)) {
    std::ostringstream os;
    os << "CFL violation: dt * max|lambda| = " << config.dt * wave << " exceeds dx = " << lane.dx;
    throw CflViolation(os.str(), wave, lane.dx / config.dt);
  }

  for (std::size_t k = 0; k <= n; ++k) {
    const CellState& ql = k == 0 ? up.q : lane.cells[k - 1];
    const CellState& qr = k == n ? down.q : lane.cells[k];
    r.interfaces[k] = arz::solve_riemann(ql, qr, m);
    r.fluxes[k] = arz::flux(r.interfaces[k].q0, m);
    if (r.interfaces[k].case_tag != arz::RiemannCase::Case4Vacuum) {
      r.min_margin = std::fmin(r.min_margin, arz::classification_margin(r.interfaces[k], ql, m));
    }
  }
  if (opt.downstream_gate) r.fluxes[n] *= *opt.downstream_gate;

  r.lane = lane;
  r.clamps.assign(n, Clamp::None);
  const double c = config.dt / lane.dx;
  for (std::size_t i = 0; i < n; ++i) {
    Vec2 q = lane.cells[i].vec() - c * (r.fluxes[i + 1] - r.fluxes[i]);
    if (q[0] < 0.0) {
      q = {0.0, 0.0};
      r.clamps[i] = Clamp::Vacuum;
      ++r.clamp_count;
    } else if (q[0] > 1.0) {
      q[0] = 1.0;
      r.clamps[i] = Clamp::Jam;
      ++r.clamp_count;
    }
    r.lane.cells[i] = CellState::from(q);
  }
  r.lane.inflow_total += config.dt * r.fluxes[0][0];
  r.lane.outflow_total += config.dt * r.fluxes[n][0];
  return r;
}

inline MacroLaneState fvm_step(const MacroLaneState& lane, const SolverConfig& config, const StepOptions& opt = {}) {
  return fvm_step_detailed(lane, config, opt).lane;
}

/// d(next state)/d(current state) for one lane step, plus the sensitivities
/// the network adjoint needs (link ghost, u_max, gate, boundary totals).
struct StepJacobians {
  std::vector<Mat2> lower;  ///< lower[i] = dQ_i'/dQ_{i-1}; lower[0] is zero
  std::vector<Mat2> diag;   ///< diag[i]  = dQ_i'/dQ_i
  std::vector<Mat2> upper;  ///< upper[i] = dQ_i'/dQ_{i+1}; upper[N-1] is zero
  std::vector<Vec2> d_dumax;      ///< dQ_i'/du_max
  Mat2 d_first_d_link_ghost;      ///< dQ_0'/d(upstream link ghost)
  Vec2 d_last_d_gate;             ///< dQ_{N-1}'/d gate
  Vec2 d_inflow_d_first;          ///< d inflow_total'/dQ_0
  Vec2 d_inflow_d_link_ghost;
  double d_inflow_d_umax = 0.0;
  Vec2 d_outflow_d_last;          ///< d outflow_total'/dQ_{N-1}
  double d_outflow_d_umax = 0.0;
  double d_outflow_d_gate = 0.0;
  int vacuum_warnings = 0;
};

/// Assembles the Jacobians from the interface solutions recorded by a step.
inline StepJacobians step_jacobians(const MacroLaneState& lane, const SolverConfig& config, const StepOptions& opt,
                                    const std::vector<arz::RiemannSolution>& interfaces,
                                    const std::vector<Clamp>& clamps) {
  const arz::Model m = lane_model(lane, config);
  const std::size_t n = lane.cells.size();
  const Ghost up = upstream_ghost(lane, m, opt);
  const Ghost down = downstream_ghost(lane, m, opt);
  const double c = config.dt / lane.dx;

  // dF_k / d(left cell), dF_k / d(right cell), dF_k / du_max
  std::vector<Mat2> a(n + 1), b(n + 1);
  std::vector<Vec2> fu(n + 1);
  Mat2 d_f0_d_link;
  Vec2 f_out;

  StepJacobians j;
  for (std::size_t k = 0; k <= n; ++k) {
    const CellState& ql = k == 0 ? up.q : lane.cells[k - 1];
    const CellState& qr = k == n ? down.q : lane.cells[k];
    const auto& sol = interfaces[k];
    const auto g = arz::riemann_gradients(sol, ql, qr, m, config.grad_clip);
    if (g.vacuum) {
      ++j.vacuum_warnings;
      continue;
    }
    Mat2 jf;
    Vec2 fU;
    if (!arz::is_vacuum(sol.q0)) {
      jf = arz::flux_jacobian(sol.q0, m);
      fU = arz::flux_umax_derivative(sol.q0, m) + jf * g.d_q0_d_umax;
    }
    Mat2 dl = jf * g.d_q0_d_ql;
    Mat2 dr = jf * g.d_q0_d_qr;
    if (k == 0) {
      if (up.from_link) d_f0_d_link = dl;
      dr += dl * up.d_dcell;
      fU += dl * up.d_dumax;
      dl = Mat2::zero();
    }
    if (k == n) {
      dl += dr * down.d_dcell;
      fU += dr * down.d_dumax;
      dr = Mat2::zero();
      if (opt.downstream_gate) {
        f_out = arz::flux(sol.q0, m);
        const double gate = *opt.downstream_gate;
        dl *= gate;
        fU *= gate;
      }
    }
    a[k] = dl;
    b[k] = dr;
    fu[k] = fU;
  }
  j.lower.assign(n, Mat2::zero());
  j.diag.assign(n, Mat2::zero());
  j.upper.assign(n, Mat2::zero());
  j.d_dumax.assign(n, Vec2{});
  for (std::size_t i = 0; i < n; ++i) {
    j.diag[i] = Mat2::identity() - c * (a[i + 1] - b[i]);
    if (i >= 1) j.lower[i] = c * a[i];
    if (i + 1 < n) j.upper[i] = -c * b[i + 1];
    j.d_dumax[i] = -c * (fu[i + 1] - fu[i]);
  }
  j.d_first_d_link_ghost = c * d_f0_d_link;
  j.d_last_d_gate = -c * f_out;

  auto mask = [&](std::size_t i, Mat2& blk) {
    if (clamps[i] == Clamp::Vacuum) {
      blk = Mat2::zero();
    } else if (clamps[i] == Clamp::Jam) {
      blk(0, 0) = 0.0;
      blk(0, 1) = 0.0;
    }
  };
  auto mask_vec = [&](std::size_t i, Vec2& v) {
    if (clamps[i] == Clamp::Vacuum) v = {};
    else if (clamps[i] == Clamp::Jam) v[0] = 0.0;
  };
  for (std::size_t i = 0; i < n; ++i) {
    mask(i, j.lower[i]);
    mask(i, j.diag[i]);
    mask(i, j.upper[i]);
    mask_vec(i, j.d_dumax[i]);
  }
  mask(0, j.d_first_d_link_ghost);
  mask_vec(n - 1, j.d_last_d_gate);

  const double dt = config.dt;
  j.d_inflow_d_first = dt * b[0].row(0);
  j.d_inflow_d_link_ghost = dt * d_f0_d_link.row(0);
  j.d_inflow_d_umax = dt * fu[0][0];
  j.d_outflow_d_last = dt * a[n].row(0);
  j.d_outflow_d_umax = dt * fu[n][0];
  j.d_outflow_d_gate = dt * f_out[0];
  return j;
}

/// Recomputes the step and returns its Jacobians.
inline StepJacobians fvm_step_jacobians(const MacroLaneState& lane, const SolverConfig& config,
                                        const StepOptions& opt = {}) {
  const StepResult r = fvm_step_detailed(lane, config, opt);
  return step_jacobians(lane, config, opt, r.interfaces, r.clamps);
}

}  // namespace difftraffic::fvm
