#pragma once

// Gradient-based drivers: initial-state estimation, pace-car control and
// signal timing. All of them run projected gradient steps with backtracking
// on top of the reverse sweep.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "difftraffic/arz.hpp"
#include "difftraffic/engine.hpp"
#include "difftraffic/errors.hpp"
#include "difftraffic/validate.hpp"

namespace difftraffic::opt {

// ---------------------------------------------------------------------------
// Generic projected descent

struct Settings {
  std::size_t max_iterations = 500;
  double initial_step = 1.0;
  double min_step = 1e-14;
  double growth = 1.5;
  double armijo = 1e-4;
  /// Stop once the objective is at or below this value (minimization).
  double target = -std::numeric_limits<double>::infinity();
  double grad_tolerance = 0.0;
  /// Start each line search from the Barzilai-Borwein step of the last
  /// accepted move instead of growing the previous step.
  bool barzilai_borwein = true;
  double max_step = 1e6;

  friend bool operator==(const Settings&, const Settings&) = default;
};

struct HistoryEntry {
  std::size_t iteration = 0;
  double value = 0.0;  ///< objective at the accepted iterate, in the caller's sign
  double grad_norm = 0.0;
  double step = 0.0;
  double best = 0.0;
};

struct Result {
  std::vector<double> x;
  double value = 0.0;
  std::vector<HistoryEntry> history;
  std::size_t evaluations = 0;
  std::size_t rejected = 0;  ///< trial points that failed to simulate
  std::string stop_reason;
};

/// Value and gradient of the objective, or nullopt when the rollout failed.
using Evaluate = std::function<std::optional<std::pair<double, std::vector<double>>>(const std::vector<double>&)>;
using Project = std::function<void(std::vector<double>&)>;

/// Minimizes f over the set defined by `project`, stepping along the
/// negative gradient scaled per coordinate by `scale`. A trial point is
/// accepted when it satisfies the Armijo condition; otherwise the step is
/// halved. Accepted steps grow the next trial step.
inline Result projected_descent(std::vector<double> x, const Evaluate& f, const Project& project,
                                const Settings& s, const std::vector<double>& scale = {}) {
  Result r;
  project(x);
  auto first = f(x);
  ++r.evaluations;
  if (!first) throw SimulationFailure("optimizer: the initial point does not simulate", 0, nullptr);
  double fx = first->first;
  std::vector<double> g = std::move(first->second);
  auto norm = [](const std::vector<double>& v) {
    double a = 0.0;
    for (double e : v) a += e * e;
    return std::sqrt(a);
  };
  double step = s.initial_step;
  double bb = 0.0;
  r.history.push_back({0, fx, norm(g), 0.0, fx});
  for (std::size_t it = 1; it <= s.max_iterations; ++it) {
    if (fx <= s.target) {
      r.stop_reason = "target reached";
      break;
    }
    if (norm(g) <= s.grad_tolerance) {
      r.stop_reason = "gradient below tolerance";
      break;
    }
    bool accepted = false;
    while (step >= s.min_step) {
      std::vector<double> trial = x;
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double d = scale.empty() ? 1.0 : scale[k];
        trial[k] -= step * d * d * g[k];
      }
      project(trial);
      double decrease = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) decrease += g[k] * (x[k] - trial[k]);
      if (decrease <= 0.0) {
        step *= 0.5;
        continue;
      }
      auto ft = f(trial);
      ++r.evaluations;
      if (!ft) {
        ++r.rejected;
        step *= 0.5;
        continue;
      }
      if (ft->first <= fx - s.armijo * decrease) {
        double sy = 0.0, ss = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) {
          const double d = scale.empty() ? 1.0 : scale[k];
          const double dx = (trial[k] - x[k]) / d;
          ss += dx * dx;
          sy += dx * (ft->second[k] - g[k]) * d;
        }
        bb = sy > 0.0 ? std::min(ss / sy, s.max_step) : 0.0;
        x = std::move(trial);
        fx = ft->first;
        g = std::move(ft->second);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      r.stop_reason = "step size underflow";
      break;
    }
    r.history.push_back({it, fx, norm(g), step, std::min(fx, r.history.back().best)});
    step = s.barzilai_borwein && bb > 0.0 ? bb : step * s.growth;
  }
  if (r.stop_reason.empty()) r.stop_reason = "iteration limit";
  r.x = std::move(x);
  r.value = fx;
  return r;
}

inline void write_history_csv(std::ostream& os, const std::vector<HistoryEntry>& h) {
  const auto old = os.precision(17);
  os << "iteration,value,grad_norm,step,best\n";
  for (const auto& e : h) os << e.iteration << ',' << e.value << ',' << e.grad_norm << ',' << e.step << ',' << e.best << '\n';
  os.precision(old);
}

/// Rollout plus reverse sweep; failures surface as nullopt.
inline std::optional<std::pair<double, GradientBundle>> value_and_gradient(const Scenario& scn, std::size_t steps,
                                                                           const Objective& obj) {
  try {
    const auto res = simulate_and_record(scn, steps, &obj);
    auto g = backward(scn, res.tape, obj);
    g.objective = res.objective;
    return std::make_pair(res.objective, std::move(g));
  } catch (const SimulationFailure&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Estimation

/// Mean squared difference over macro cells (rho, y) and vehicles (p, v).
///
/// Vehicles are matched by id within each micro lane; a vehicle present on
/// only one side contributes the square of its distance to the nearer lane
/// end. The mean is taken over the component count of the target. Macro
/// lanes must agree in shape.
inline double estimation_loss(const NetworkState& est, const NetworkState& target, NetworkAdjoint* grad = nullptr,
                              double weight = 1.0) {
  if (est.lanes.size() != target.lanes.size()) throw DomainError("estimation_loss: lane count mismatch");
  struct Term {
    double diff;
    double* dp;
    double sign;
  };
  std::vector<Term> terms;
  std::size_t components = 0;
  for (std::size_t i = 0; i < est.lanes.size(); ++i) {
    const auto& a = est.lanes[i];
    const auto& b = target.lanes[i];
    if (a.kind != b.kind) throw DomainError("estimation_loss: lane kind mismatch");
    if (a.kind == LaneKind::Macro) {
      if (a.macro.cells.size() != b.macro.cells.size()) throw DomainError("estimation_loss: cell count mismatch");
      components += 2 * b.macro.cells.size();
      for (std::size_t c = 0; c < a.macro.cells.size(); ++c) {
        terms.push_back({a.macro.cells[c].rho - b.macro.cells[c].rho, grad ? &grad->lanes[i].cells[c][0] : nullptr, 1.0});
        terms.push_back({a.macro.cells[c].y - b.macro.cells[c].y, grad ? &grad->lanes[i].cells[c][1] : nullptr, 1.0});
      }
      continue;
    }
    components += 2 * b.micro.vehicles.size();
    const double length = b.micro.length;
    // Unmatched vehicles count their distance to the nearer lane end, so a
    // vehicle entering or leaving changes the loss continuously.
    auto boundary_term = [&](double p, double* dp) {
      if (p < length - p) terms.push_back({p, dp, 1.0});
      else terms.push_back({length - p, dp, -1.0});
    };
    std::map<VehicleId, std::size_t> in_target;
    for (std::size_t v = 0; v < b.micro.vehicles.size(); ++v) in_target[b.micro.vehicles[v].id] = v;
    for (std::size_t v = 0; v < a.micro.vehicles.size(); ++v) {
      const auto& veh = a.micro.vehicles[v];
      double* dp = grad ? &grad->lanes[i].vehicles[v].p : nullptr;
      auto it = in_target.find(veh.id);
      if (it == in_target.end()) {
        boundary_term(veh.p, dp);
        continue;
      }
      terms.push_back({veh.p - b.micro.vehicles[it->second].p, dp, 1.0});
      terms.push_back({veh.v - b.micro.vehicles[it->second].v, grad ? &grad->lanes[i].vehicles[v].v : nullptr, 1.0});
      in_target.erase(it);
    }
    for (const auto& [id, v] : in_target) boundary_term(b.micro.vehicles[v].p, nullptr);
  }
  if (terms.empty()) return 0.0;
  const double n = static_cast<double>(std::max<std::size_t>(components, 1));
  double sum = 0.0;
  for (const auto& t : terms) {
    sum += t.diff * t.diff;
    if (t.dp) *t.dp += weight * 2.0 * t.sign * t.diff / n;
  }
  return sum / n;
}

inline Objective estimation_objective(NetworkState target) {
  auto tgt = std::make_shared<NetworkState>(std::move(target));
  return terminal_objective([tgt](const NetworkState& s) { return estimation_loss(s, *tgt); },
                            [tgt](const NetworkState& s, NetworkAdjoint& a) { estimation_loss(s, *tgt, &a); });
}

struct EstimationProblem {
  Scenario scenario;  ///< initial state holds the starting guess
  NetworkState target;
  std::size_t steps = 100;
  Settings settings;
  /// Per-coordinate variable scaling over the leading state entries; empty
  /// means unscaled.
  std::vector<double> scale;
};

struct EstimationResult {
  Scenario estimate;
  Result run;
  double initial_loss = 0.0;
};

/// Number of leading entries of flatten_inputs that hold the initial state.
inline std::size_t state_dimension(const Scenario& scn) {
  std::size_t n = 0;
  for (const auto& l : scn.lanes) n += 2 * (l.kind == LaneKind::Macro ? l.macro.cells.size() : l.micro.vehicles.size());
  return n;
}

/// Clamps an initial state into the admissible set: rho in [0, 1], cell
/// velocities in [0, u_max], vehicle speeds non-negative, vehicles inside the
/// lane and ordered with a positive gap.
inline void project_state(const Scenario& scn, std::vector<double>& x) {
  std::size_t k = 0;
  const double gamma = scn.config.gamma;
  for (const auto& l : scn.lanes) {
    if (l.kind == LaneKind::Macro) {
      const arz::Model m{l.macro.u_max, gamma};
      for (std::size_t c = 0; c < l.macro.cells.size(); ++c, k += 2) {
        double& rho = x[k];
        double& y = x[k + 1];
        rho = std::clamp(rho, 0.0, 1.0);
        if (rho <= arz::kVacuumDensity) {
          y = 0.0;
          continue;
        }
        const double ueq = arz::u_eq(rho, m);
        y = std::clamp(y, -rho * ueq, rho * (m.u_max - ueq));
      }
    } else {
      const auto& vs = l.micro.vehicles;
      for (std::size_t v = 0; v < vs.size(); ++v, k += 2) {
        double& p = x[k];
        x[k + 1] = std::max(0.0, x[k + 1]);
        double hi = l.micro.length;
        if (v > 0) hi = std::min(hi, x[k - 2] - vs[v - 1].params.length - 0.1);
        if (v == 0 && l.micro.lead_boundary.kind == LeadBoundary::Kind::VirtualLeader)
          hi = std::min(hi, l.micro.lead_boundary.p - 0.1);
        p = std::min(p, hi);
      }
    }
  }
}

inline EstimationResult estimate_initial_state(const EstimationProblem& prob) {
  const Scenario& base = prob.scenario;
  const std::size_t dim = state_dimension(base);
  const std::vector<double> full = flatten_inputs(base);
  const Objective obj = estimation_objective(prob.target);
  auto to_scenario = [&](const std::vector<double>& x) {
    Scenario s = base;
    std::vector<double> all = full;
    std::copy(x.begin(), x.end(), all.begin());
    assign_inputs(s, all);
    return s;
  };
  Evaluate f = [&](const std::vector<double>& x) -> std::optional<std::pair<double, std::vector<double>>> {
    const Scenario s = to_scenario(x);
    auto vg = value_and_gradient(s, prob.steps, obj);
    if (!vg) return std::nullopt;
    auto flat = flatten(s, vg->second);
    flat.resize(dim);
    return std::make_pair(vg->first, std::move(flat));
  };
  Project project = [&](std::vector<double>& x) { project_state(base, x); };
  std::vector<double> x0(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(dim));
  EstimationResult out;
  out.run = projected_descent(x0, f, project, prob.settings, prob.scale);
  out.initial_loss = out.run.history.front().value;
  out.estimate = to_scenario(out.run.x);
  return out;
}

// ---------------------------------------------------------------------------
// Pace car

/// Target speed as a function of time.
using SpeedSchedule = std::function<double(double t)>;

inline SpeedSchedule step_schedule(double before, double after, double switch_time) {
  return [=](double t) { return t < switch_time ? before : after; };
}

/// Sum over frames and followers of C_max - (v_targ - v)^2, given per-frame
/// follower speeds (frames[n][i]) and per-frame targets.
inline double pace_car_reward(const std::vector<std::vector<double>>& speeds, const std::vector<double>& v_targ,
                              double c_max) {
  double r = 0.0;
  for (std::size_t n = 0; n < speeds.size(); ++n) {
    for (double v : speeds[n]) {
      const double d = v_targ[n] - v;
      r += c_max - d * d;
    }
  }
  return r;
}

struct PaceCarProblem {
  Scenario scenario;  ///< micro lane 0 led by the pace car, with a lead acceleration channel
  std::size_t steps = 100;
  SpeedSchedule v_targ = [](double) { return 30.0; };
  double c_max = 100.0;
  double a_min = -4.0;
  double a_max = 2.0;
  Settings settings;
};

/// Negated reward as a stage objective over frames 1..T on the controlled lane.
inline Objective pace_car_objective(const PaceCarProblem& p, LaneId lane_id) {
  const int li = p.scenario.lane_index(lane_id);
  if (li < 0) throw ScenarioError("pace car lane not found");
  const auto lane = static_cast<std::size_t>(li);
  const double dt = p.scenario.config.dt;
  const double c_max = p.c_max;
  const SpeedSchedule vt = p.v_targ;
  Objective o;
  o.value = [=](const NetworkState& s, std::size_t n, std::size_t) {
    if (n == 0) return 0.0;
    const double target = vt(static_cast<double>(n) * dt);
    double r = 0.0;
    const auto& vs = s.lanes[lane].micro.vehicles;
    for (std::size_t i = 1; i < vs.size(); ++i) r += c_max - (target - vs[i].v) * (target - vs[i].v);
    return -r;
  };
  o.gradient = [=](const NetworkState& s, std::size_t n, std::size_t, NetworkAdjoint& a) {
    if (n == 0) return;
    const double target = vt(static_cast<double>(n) * dt);
    const auto& vs = s.lanes[lane].micro.vehicles;
    for (std::size_t i = 1; i < vs.size(); ++i) a.lanes[lane].vehicles[i].v += -2.0 * (target - vs[i].v);
  };
  return o;
}

struct ControlResult {
  std::vector<double> controls;
  double reward = 0.0;
  double initial_reward = 0.0;
  std::vector<HistoryEntry> history;  ///< values and best-so-far in reward sign
  Result run;
};

inline void flip_history(std::vector<HistoryEntry>& h) {
  for (auto& e : h) {
    e.value = -e.value;
    e.best = -e.best;
  }
}

/// Reward of a given acceleration schedule, or nullopt when it collides.
inline std::optional<double> pace_car_evaluate(const PaceCarProblem& p, const std::vector<double>& accel) {
  Scenario s = p.scenario;
  s.controls.at(0).values = accel;
  const Objective o = pace_car_objective(p, s.controls[0].lane);
  try {
    return -simulate(s, p.steps, &o).objective;
  } catch (const SimulationFailure&) {
    return std::nullopt;
  }
}

inline ControlResult optimize_pace_car(const PaceCarProblem& p) {
  if (p.scenario.controls.empty() || p.scenario.controls[0].kind != ControlChannel::Kind::LeadAcceleration)
    throw ScenarioError("pace car problem needs a lead_acceleration control as its first channel");
  const LaneId lane = p.scenario.controls[0].lane;
  const Objective o = pace_car_objective(p, lane);
  Evaluate f = [&](const std::vector<double>& u) -> std::optional<std::pair<double, std::vector<double>>> {
    Scenario s = p.scenario;
    s.controls[0].values = u;
    auto vg = value_and_gradient(s, p.steps, o);
    if (!vg) return std::nullopt;
    return std::make_pair(vg->first, vg->second.controls[0]);
  };
  Project project = [&](std::vector<double>& u) {
    for (auto& v : u) v = std::clamp(v, p.a_min, p.a_max);
  };
  std::vector<double> u0 = p.scenario.controls[0].values;
  u0.resize(p.steps, 0.0);
  ControlResult out;
  out.run = projected_descent(u0, f, project, p.settings);
  out.controls = out.run.x;
  out.reward = -out.run.value;
  out.history = out.run.history;
  flip_history(out.history);
  out.initial_reward = out.history.front().value;
  return out;
}

// ---------------------------------------------------------------------------
// Signal timing

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// R = c1 * R_f + c2 * R_q.
inline double signal_reward(double flow, double queue, double c1 = 1.0, double c2 = -1.0) {
  return c1 * flow + c2 * queue;
}

struct SignalProblem {
  Scenario scenario;  ///< two macro approaches with outflow_gate channels 0 (WE) and 1 (NS)
  std::size_t steps = 160;
  double cycle = 20.0;         ///< seconds; phase p starts at p * cycle
  std::vector<double> green;   ///< WE share of each phase; NS gets the rest
  double min_share = 0.1;
  double c1 = 1.0;
  double c2 = -1.0;
  std::optional<double> speed_threshold;  ///< defaults to u_max / 10
  double speed_width = 0.5;               ///< m/s, sigmoid width of the queue indicator
  Settings settings;
};

/// Smooth WE gate at step n: sum over phases of a window [start, start + f C)
/// with sigmoid edges of width dt, evaluated at the step midpoint.
inline double we_gate(const SignalProblem& p, std::size_t n, std::vector<double>* d_dgreen = nullptr) {
  const double dt = p.scenario.config.dt;
  const double t = (static_cast<double>(n) + 0.5) * dt;
  double g = 0.0;
  for (std::size_t k = 0; k < p.green.size(); ++k) {
    const double a = static_cast<double>(k) * p.cycle;
    const double b = a + p.green[k] * p.cycle;
    const double sa = sigmoid((t - a) / dt);
    const double sb = sigmoid((t - b) / dt);
    g += sa - sb;
    if (d_dgreen) (*d_dgreen)[k] = sb * (1.0 - sb) / dt * p.cycle;
  }
  return std::clamp(g, 0.0, 1.0);
}

inline Scenario signal_scenario(const SignalProblem& p) {
  Scenario s = p.scenario;
  if (s.controls.size() < 2) throw ScenarioError("signal problem needs two outflow_gate channels");
  s.controls[0].values.resize(p.steps);
  s.controls[1].values.resize(p.steps);
  for (std::size_t n = 0; n < p.steps; ++n) {
    const double g = we_gate(p, n);
    s.controls[0].values[n] = g;
    s.controls[1].values[n] = 1.0 - g;
  }
  return s;
}

struct SignalMeasures {
  double flow = 0.0;        ///< vehicles through the stop line
  double queue = 0.0;       ///< smoothed queued cells, averaged over frames 1..T
  double hard_queue = 0.0;  ///< same with the hard speed threshold
  double reward = 0.0;
};

/// Negated smooth reward: flow at the final frame, queue averaged over frames.
inline Objective signal_objective(const SignalProblem& p) {
  const Scenario& scn = p.scenario;
  std::vector<std::size_t> lanes;
  for (const auto& ch : scn.controls) lanes.push_back(static_cast<std::size_t>(scn.lane_index(ch.lane)));
  const double L = scn.config.vehicle_length;
  const double gamma = scn.config.gamma;
  const double c1 = p.c1, c2 = p.c2, width = p.speed_width;
  const std::optional<double> th = p.speed_threshold;
  Objective o;
  o.value = [=](const NetworkState& s, std::size_t n, std::size_t T) {
    double v = 0.0;
    for (std::size_t i : lanes) {
      const auto& m = s.lanes[i].macro;
      if (n == T) v += c1 * m.outflow_total / L;
      if (n == 0 || T == 0) continue;
      const arz::Model model{m.u_max, gamma};
      const double u_th = th.value_or(m.u_max / 10.0);
      for (const auto& c : m.cells) {
        const double u = arz::velocity_from_state(c, model).u;
        v += c2 * sigmoid((u_th - u) / width) / static_cast<double>(T);
      }
    }
    return -v;
  };
  o.gradient = [=](const NetworkState& s, std::size_t n, std::size_t T, NetworkAdjoint& a) {
    for (std::size_t i : lanes) {
      const auto& m = s.lanes[i].macro;
      if (n == T) a.lanes[i].outflow_total += -c1 / L;
      if (n == 0 || T == 0) continue;
      const arz::Model model{m.u_max, gamma};
      const double u_th = th.value_or(m.u_max / 10.0);
      for (std::size_t c = 0; c < m.cells.size(); ++c) {
        const auto& q = m.cells[c];
        if (arz::is_vacuum(q)) continue;
        const double u = arz::velocity_from_state(q, model).u;
        const double sg = sigmoid((u_th - u) / width);
        const double du = -c2 * sg * (1.0 - sg) * (-1.0 / width) / static_cast<double>(T);
        const auto vp = arz::velocity_partials(q, model);
        a.lanes[i].cells[c][0] += du * vp.d_rho;
        a.lanes[i].cells[c][1] += du * vp.d_y;
      }
    }
  };
  return o;
}

/// Measures a rollout: flow, smooth and hard queue, reward.
inline SignalMeasures signal_measures(const SignalProblem& p) {
  const Scenario s = signal_scenario(p);
  SignalMeasures m;
  std::size_t frame = 0;
  const double gamma = s.config.gamma;
  SimulateOptions so;
  so.observer = [&](const NetworkState& st) {
    const std::size_t n = frame++;
    if (n == 0 || p.steps == 0) return;
    for (const auto& ch : s.controls) {
      const auto& lane = st.lanes[static_cast<std::size_t>(s.lane_index(ch.lane))].macro;
      const arz::Model model{lane.u_max, gamma};
      const double u_th = p.speed_threshold.value_or(lane.u_max / 10.0);
      for (const auto& c : lane.cells) {
        const double u = arz::velocity_from_state(c, model).u;
        m.queue += sigmoid((u_th - u) / p.speed_width) / static_cast<double>(p.steps);
        m.hard_queue += (u < u_th ? 1.0 : 0.0) / static_cast<double>(p.steps);
      }
    }
  };
  const auto res = run(s, p.steps, so);
  for (const auto& ch : s.controls)
    m.flow += res.final_state.lanes[static_cast<std::size_t>(s.lane_index(ch.lane))].macro.outflow_total /
              s.config.vehicle_length;
  m.reward = signal_reward(m.flow, m.queue, p.c1, p.c2);
  return m;
}

inline ControlResult optimize_signal_timing(const SignalProblem& p) {
  if (p.green.empty()) throw ScenarioError("signal problem needs at least one phase");
  const Objective o = signal_objective(p);
  const double lo = p.min_share, hi = 1.0 - p.min_share;
  Evaluate f = [&](const std::vector<double>& green) -> std::optional<std::pair<double, std::vector<double>>> {
    SignalProblem q = p;
    q.green = green;
    const Scenario s = signal_scenario(q);
    auto vg = value_and_gradient(s, q.steps, o);
    if (!vg) return std::nullopt;
    std::vector<double> grad(green.size(), 0.0), dg(green.size());
    for (std::size_t n = 0; n < q.steps; ++n) {
      const double g = we_gate(q, n, &dg);
      if (g <= 0.0 || g >= 1.0) continue;
      const double d_gate = vg->second.controls[0][n] - vg->second.controls[1][n];
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += d_gate * dg[k];
    }
    return std::make_pair(vg->first, std::move(grad));
  };
  Project project = [&](std::vector<double>& g) {
    for (auto& v : g) v = std::clamp(v, lo, hi);
  };
  ControlResult out;
  out.run = projected_descent(p.green, f, project, p.settings);
  out.controls = out.run.x;
  out.reward = -out.run.value;
  out.history = out.run.history;
  flip_history(out.history);
  out.initial_reward = out.history.front().value;
  return out;
}

}  // namespace difftraffic::opt
