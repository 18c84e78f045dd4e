#pragma once

// Network time stepping, the per-step tape and the reverse sweep.
//
// One step n maps the network state S^n to S^{n+1}:
//   1. every micro -> macro link aggregates its window of S^n into the
//      upstream ghost cell of the downstream macro lane;
//   2. every macro lane takes one finite-volume step;
//   3. every macro -> micro link accumulates the outflow of the last cell of
//      S^n and places the vehicles it owes at the start of the micro lane;
//   4. every micro lane takes one IDM step over its vehicles plus the newly
//      placed ones, and vehicles past its end are removed.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "difftraffic/arz.hpp"
#include "difftraffic/core.hpp"
#include "difftraffic/coupling.hpp"
#include "difftraffic/errors.hpp"
#include "difftraffic/fvm.hpp"
#include "difftraffic/idm.hpp"

namespace difftraffic {

struct LaneState {
  LaneKind kind = LaneKind::Macro;
  MacroLaneState macro;
  MicroLaneState micro;

  friend bool operator==(const LaneState&, const LaneState&) = default;
};

struct NetworkState {
  std::size_t step = 0;
  std::vector<LaneState> lanes;                     ///< aligned with Scenario::lanes
  std::vector<coupling::FluxCapacitor> capacitors;  ///< aligned with Scenario::links
  std::vector<std::int64_t> exited;                 ///< vehicles that left each micro lane
  VehicleId next_vehicle_id = 0;

  friend bool operator==(const NetworkState&, const NetworkState&) = default;
};

inline NetworkState initial_state(const Scenario& scn) {
  NetworkState s;
  s.lanes.reserve(scn.lanes.size());
  VehicleId next = 0;
  for (const auto& l : scn.lanes) {
    s.lanes.push_back({l.kind, l.macro, l.micro});
    for (const auto& v : l.micro.vehicles) next = std::max(next, v.id + 1);
  }
  s.capacitors.resize(scn.links.size());
  s.exited.assign(scn.lanes.size(), 0);
  s.next_vehicle_id = next;
  return s;
}

enum class LinkKind { MacroToMicro, MicroToMacro };

/// Lane and link indices resolved once per scenario.
struct Topology {
  struct LinkInfo {
    LinkKind kind = LinkKind::MacroToMicro;
    std::size_t from = 0;
    std::size_t to = 0;
    coupling::AggregationWindow window;
  };
  std::vector<LinkInfo> links;
  std::vector<std::optional<std::size_t>> in_link;   ///< per lane
  std::vector<std::optional<std::size_t>> out_link;  ///< per lane
  std::vector<std::optional<std::size_t>> lead_control;
  std::vector<std::optional<std::size_t>> gate_control;
  std::vector<std::size_t> macro_lanes;
  std::vector<std::size_t> micro_lanes;

  explicit Topology(const Scenario& scn) {
    const std::size_t n = scn.lanes.size();
    in_link.resize(n);
    out_link.resize(n);
    lead_control.resize(n);
    gate_control.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      (scn.lanes[i].kind == LaneKind::Macro ? macro_lanes : micro_lanes).push_back(i);
    }
    for (std::size_t k = 0; k < scn.links.size(); ++k) {
      const auto& l = scn.links[k];
      const int a = scn.lane_index(l.from), b = scn.lane_index(l.to);
      if (a < 0 || b < 0) throw ScenarioError("link " + std::to_string(k) + " names an unknown lane");
      LinkInfo info;
      info.from = static_cast<std::size_t>(a);
      info.to = static_cast<std::size_t>(b);
      const auto& up = scn.lanes[info.from];
      const auto& down = scn.lanes[info.to];
      if (up.kind == LaneKind::Macro && down.kind == LaneKind::Micro) {
        info.kind = LinkKind::MacroToMicro;
      } else if (up.kind == LaneKind::Micro && down.kind == LaneKind::Macro) {
        info.kind = LinkKind::MicroToMacro;
        const double w = l.window.value_or(down.macro.dx);
        info.window = {up.micro.length - w, up.micro.length};
      } else {
        throw ScenarioError("link " + std::to_string(k) + " must join a macro lane and a micro lane");
      }
      if (out_link[info.from] || in_link[info.to]) {
        throw ScenarioError("link " + std::to_string(k) + " reuses a lane end");
      }
      out_link[info.from] = k;
      in_link[info.to] = k;
      links.push_back(info);
    }
    for (std::size_t c = 0; c < scn.controls.size(); ++c) {
      const auto& ch = scn.controls[c];
      const int li = scn.lane_index(ch.lane);
      if (li < 0) throw ScenarioError("control " + std::to_string(c) + " names an unknown lane");
      auto& slot = ch.kind == ControlChannel::Kind::LeadAcceleration ? lead_control[static_cast<std::size_t>(li)]
                                                                     : gate_control[static_cast<std::size_t>(li)];
      if (slot) throw ScenarioError("control " + std::to_string(c) + " duplicates a channel");
      slot = c;
    }
  }
};

inline std::optional<double> control_at(const Scenario& scn, const std::optional<std::size_t>& ch, std::size_t n) {
  if (!ch) return std::nullopt;
  const auto& vals = scn.controls[*ch].values;
  if (n >= vals.size()) return std::nullopt;
  return vals[n];
}

/// Everything the reverse sweep needs about one step besides its checkpoint.
struct StepRecord {
  NetworkState state;  ///< S^n
  struct Macro {
    fvm::StepOptions options;
    std::vector<arz::RiemannSolution> interfaces;
    std::vector<fvm::Clamp> clamps;
  };
  struct Micro {
    std::vector<VehicleState> placed;  ///< appended behind the tail before the IDM step
    std::vector<std::size_t> placed_link;
    std::vector<double> placed_step;  ///< Euler step length of each placed vehicle
    std::size_t exited = 0;
    std::optional<double> lead_acceleration;
  };
  std::vector<Macro> macro;                    ///< per lane; empty entries for micro lanes
  std::vector<Micro> micro;                    ///< per lane; empty entries for macro lanes
  std::vector<coupling::Aggregate> aggregates; ///< per link; micro -> macro links only
  std::vector<coupling::EmissionRecord> emissions;
};

struct Diagnostics {
  std::int64_t clamp_count = 0;
  std::int64_t emitted = 0;
  std::int64_t deferred = 0;  ///< step-vehicle pairs held back by the entry guard
  std::int64_t exited = 0;
  std::int64_t near_shock_steps = 0;  ///< lane steps with an interface within 1e-3 of a case switch
  std::int64_t vacuum_warnings = 0;   ///< filled by the reverse sweep
  double max_wave_speed = 0.0;

  friend bool operator==(const Diagnostics&, const Diagnostics&) = default;
};

/// 64-bit FNV-1a over the bit patterns of the hashed values.
class Hasher {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001B3ULL;
    }
  }
  void f64(double x) {
    std::uint64_t u;
    std::memcpy(&u, &x, sizeof u);
    bytes(&u, sizeof u);
  }
  void u64(std::uint64_t x) { bytes(&x, sizeof x); }
  void cell(const CellState& c) {
    f64(c.rho);
    f64(c.y);
  }
  void boundary(const BoundaryCondition& b) {
    u64(static_cast<std::uint64_t>(b.kind));
    cell(b.q);
  }
  void params(const IdmParams& p) {
    for (double x : {p.s_min, p.t_pref, p.a_max, p.a_pref, p.v_targ, p.length}) f64(x);
  }
  void vehicle(const VehicleState& v) {
    u64(v.id);
    f64(v.p);
    f64(v.v);
    params(v.params);
    u64(v.exiting);
  }
  void macro(const MacroLaneState& m) {
    u64(m.cells.size());
    for (const auto& c : m.cells) cell(c);
    f64(m.dx);
    f64(m.u_max);
    boundary(m.upstream_boundary);
    boundary(m.downstream_boundary);
    f64(m.inflow_total);
    f64(m.outflow_total);
  }
  void micro(const MicroLaneState& m) {
    u64(m.vehicles.size());
    for (const auto& v : m.vehicles) vehicle(v);
    f64(m.length);
    u64(static_cast<std::uint64_t>(m.lead_boundary.kind));
    f64(m.lead_boundary.p);
    f64(m.lead_boundary.v);
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

inline std::uint64_t hash_scenario(const Scenario& scn) {
  Hasher h;
  const auto& c = scn.config;
  h.f64(c.dt);
  h.f64(c.gamma);
  h.f64(c.delta_exponent);
  h.f64(c.grad_clip.value_or(-1.0));
  h.u64(c.rng_seed);
  h.u64(static_cast<std::uint64_t>(c.conversion_mode));
  h.f64(c.vehicle_length);
  h.u64(static_cast<std::uint64_t>(c.gradient_mode));
  for (const auto& l : scn.lanes) {
    h.u64(static_cast<std::uint64_t>(l.id));
    h.u64(static_cast<std::uint64_t>(l.kind));
    h.macro(l.macro);
    h.micro(l.micro);
    for (const auto* r : {&l.idm_ranges.s_min, &l.idm_ranges.t_pref, &l.idm_ranges.a_max, &l.idm_ranges.a_pref,
                          &l.idm_ranges.v_targ, &l.idm_ranges.length}) {
      h.f64(r->first);
      h.f64(r->second);
    }
    h.u64(l.differentiate_u_max);
  }
  for (const auto& l : scn.links) {
    h.u64(static_cast<std::uint64_t>(l.from));
    h.u64(static_cast<std::uint64_t>(l.to));
    h.f64(l.window.value_or(-1.0));
  }
  for (const auto& ch : scn.controls) {
    h.u64(static_cast<std::uint64_t>(ch.kind));
    h.u64(static_cast<std::uint64_t>(ch.lane));
    h.u64(ch.values.size());
    for (double v : ch.values) h.f64(v);
  }
  return h.value();
}

inline void hash_state(Hasher& h, const NetworkState& s) {
  h.u64(s.step);
  for (const auto& l : s.lanes) {
    if (l.kind == LaneKind::Macro) h.macro(l.macro);
    else h.micro(l.micro);
  }
  for (const auto& c : s.capacitors) {
    h.f64(c.accumulator);
    h.u64(static_cast<std::uint64_t>(c.emitted_count));
    h.u64(c.pending.size());
  }
  for (auto e : s.exited) h.u64(static_cast<std::uint64_t>(e));
  h.u64(s.next_vehicle_id);
}

struct StepTape {
  std::uint64_t config_hash = 0;
  std::vector<StepRecord> steps;
  NetworkState final_state;

  std::size_t size() const { return steps.size(); }

  /// Deterministic digest of every checkpoint and interface classification.
  std::uint64_t hash() const {
    Hasher h;
    h.u64(config_hash);
    for (const auto& r : steps) {
      hash_state(h, r.state);
      for (const auto& m : r.macro)
        for (const auto& sol : m.interfaces) h.u64(static_cast<std::uint64_t>(sol.case_tag));
    }
    hash_state(h, final_state);
    return h.value();
  }

  /// Bytes held by the tape, counted from container sizes.
  std::size_t memory_bytes() const {
    auto state_bytes = [](const NetworkState& s) {
      std::size_t b = sizeof(NetworkState);
      for (const auto& l : s.lanes) {
        b += sizeof(LaneState) + l.macro.cells.size() * sizeof(CellState) +
             l.micro.vehicles.size() * sizeof(VehicleState);
      }
      for (const auto& c : s.capacitors) {
        b += sizeof(coupling::FluxCapacitor) +
             (c.pending.size() + c.unclaimed.size()) * sizeof(coupling::EmissionInterval);
      }
      return b + s.exited.size() * sizeof(std::int64_t);
    };
    std::size_t b = sizeof(StepTape) + state_bytes(final_state);
    for (const auto& r : steps) {
      b += sizeof(StepRecord) + state_bytes(r.state);
      for (const auto& m : r.macro) {
        b += sizeof(StepRecord::Macro) + m.interfaces.size() * sizeof(arz::RiemannSolution) +
             m.clamps.size() * sizeof(fvm::Clamp);
      }
      for (const auto& m : r.micro) {
        b += sizeof(StepRecord::Micro) + m.placed.size() * sizeof(VehicleState) +
             m.placed_link.size() * sizeof(std::size_t) + m.placed_step.size() * sizeof(double);
      }
      b += r.aggregates.size() * sizeof(coupling::Aggregate) +
           r.emissions.size() * sizeof(coupling::EmissionRecord);
    }
    return b;
  }
};

/// Raised when a step fails; carries the tape recorded up to the failure.
class SimulationFailure : public Error {
 public:
  SimulationFailure(const std::string& what, std::size_t step, std::shared_ptr<StepTape> partial)
      : Error(what), step_(step), partial_(std::move(partial)) {}
  std::size_t step() const { return step_; }
  const StepTape* partial_tape() const { return partial_.get(); }

 private:
  std::size_t step_;
  std::shared_ptr<StepTape> partial_;
};

namespace detail {

inline arz::Model model_of(const Scenario& scn, std::size_t lane) {
  return {scn.lanes[lane].macro.u_max, scn.config.gamma};
}

}  // namespace detail

/// Advances the network by one step. Fills `rec` (minus the checkpoint) when given.
inline NetworkState advance(const Scenario& scn, const Topology& topo, const NetworkState& s, StepRecord* rec,
                            Diagnostics* diag = nullptr) {
  const SolverConfig& cfg = scn.config;
  const std::size_t n = s.step;
  const std::size_t nl = s.lanes.size();
  NetworkState next;
  next.step = n + 1;
  next.lanes.resize(nl);
  next.capacitors = s.capacitors;
  next.exited = s.exited;
  next.next_vehicle_id = s.next_vehicle_id;
  if (rec) {
    rec->macro.assign(nl, {});
    rec->micro.assign(nl, {});
    rec->aggregates.assign(topo.links.size(), {});
    rec->emissions.clear();
  }

  std::vector<coupling::Aggregate> aggs(topo.links.size());
  for (std::size_t k = 0; k < topo.links.size(); ++k) {
    const auto& L = topo.links[k];
    if (L.kind != LinkKind::MicroToMacro) continue;
    aggs[k] = coupling::aggregate_micro_to_macro(s.lanes[L.from].micro.vehicles, L.window,
                                                 detail::model_of(scn, L.to), cfg);
  }

  for (std::size_t i : topo.macro_lanes) {
    fvm::StepOptions opt;
    if (topo.in_link[i]) opt.upstream_override = aggs[*topo.in_link[i]].q;
    if (topo.out_link[i]) opt.downstream_outflow = true;
    opt.downstream_gate = control_at(scn, topo.gate_control[i], n);
    auto r = fvm::fvm_step_detailed(s.lanes[i].macro, cfg, opt);
    next.lanes[i].kind = LaneKind::Macro;
    next.lanes[i].macro = std::move(r.lane);
    if (diag) {
      diag->clamp_count += r.clamp_count;
      diag->max_wave_speed = std::max(diag->max_wave_speed, r.max_wave_speed);
      if (r.min_margin < 1e-3) ++diag->near_shock_steps;
    }
    if (rec) {
      rec->macro[i].options = opt;
      rec->macro[i].interfaces = std::move(r.interfaces);
      rec->macro[i].clamps = std::move(r.clamps);
    }
  }

  std::vector<std::vector<VehicleState>> placed(nl);
  std::vector<std::vector<std::size_t>> placed_link(nl);
  std::vector<std::vector<double>> placed_step(nl);
  for (std::size_t k = 0; k < topo.links.size(); ++k) {
    const auto& L = topo.links[k];
    if (L.kind != LinkKind::MacroToMicro) continue;
    const auto& src = s.lanes[L.from].macro;
    const arz::Model m = detail::model_of(scn, L.from);
    const CellState& last = src.cells.back();
    const auto vel = arz::velocity_from_state(last, m);
    const double rho = vel.vacuum ? 0.0 : last.rho;
    const auto vel_next = arz::velocity_from_state(next.lanes[L.from].macro.cells.back(), m);
    auto& cap = next.capacitors[k];
    std::optional<std::mt19937_64> rng_slot;
    auto rng = [&]() -> std::mt19937_64& {
      if (!rng_slot) rng_slot = coupling::conversion_rng(cfg.rng_seed, k, n);
      return *rng_slot;
    };
    const auto owed = cfg.conversion_mode == ConversionMode::Deterministic
                          ? coupling::capacitor_accumulate(cap, rho, vel.u, n, cfg)
                          : coupling::poisson_emit(cap, rho, vel.u, n, rng(), cfg);
    cap.pending.insert(cap.pending.end(), owed.begin(), owed.end());

    const auto& lane_spec = scn.lanes[L.to];
    const auto& existing = s.lanes[L.to].micro.vehicles;
    auto& out = placed[L.to];
    while (!cap.pending.empty()) {
      const VehicleState* tail = !out.empty() ? &out.back() : (!existing.empty() ? &existing.back() : nullptr);
      const auto& iv = cap.pending.front();
      const double entry = cfg.conversion_mode == ConversionMode::Deterministic && iv.last == n
                               ? coupling::entry_step(iv.overshoot, rho, vel.u, cfg)
                               : cfg.dt;
      const double theta = 1.0 - entry / cfg.dt;
      VehicleState v;
      v.params = coupling::sample_params(lane_spec.idm_ranges, rng());
      v.p = 0.0;
      v.v = vel.u + theta * (vel_next.u - vel.u);
      if (tail) {
        const double gap = tail->p - tail->params.length - v.p;
        if (gap < coupling::entry_clearance(v.params, v.v, *tail)) break;
      }
      v.id = next.next_vehicle_id++;
      if (rec) rec->emissions.push_back({n, k, v.id, v.v, iv});
      cap.pending.pop_front();
      ++cap.emitted_count;
      out.push_back(v);
      placed_link[L.to].push_back(k);
      placed_step[L.to].push_back(entry);
      if (diag) ++diag->emitted;
    }
    if (diag) diag->deferred += static_cast<std::int64_t>(cap.pending.size());
  }

  for (std::size_t i : topo.micro_lanes) {
    MicroLaneState lane_in = s.lanes[i].micro;
    std::vector<double> steps(lane_in.vehicles.size(), cfg.dt);
    steps.insert(steps.end(), placed_step[i].begin(), placed_step[i].end());
    lane_in.vehicles.insert(lane_in.vehicles.end(), placed[i].begin(), placed[i].end());
    const auto lead = control_at(scn, topo.lead_control[i], n);
    auto r = idm::micro_step(lane_in, cfg, lead, &steps);
    std::size_t k = 0;
    while (k < r.lane.vehicles.size() && r.lane.vehicles[k].exiting) ++k;
    r.lane.vehicles.erase(r.lane.vehicles.begin(), r.lane.vehicles.begin() + static_cast<std::ptrdiff_t>(k));
    next.lanes[i].kind = LaneKind::Micro;
    next.lanes[i].micro = std::move(r.lane);
    next.exited[i] += static_cast<std::int64_t>(k);
    if (diag) diag->exited += static_cast<std::int64_t>(k);
    if (rec) {
      rec->micro[i].placed = std::move(placed[i]);
      rec->micro[i].placed_link = std::move(placed_link[i]);
      rec->micro[i].placed_step = std::move(placed_step[i]);
      rec->micro[i].exited = k;
      rec->micro[i].lead_acceleration = lead;
    }
  }
  if (rec) rec->aggregates = std::move(aggs);
  return next;
}

struct VehicleAdjoint {
  double p = 0.0;
  double v = 0.0;
  double w = 0.0;  ///< unit emission weight
};

struct LaneAdjoint {
  std::vector<Vec2> cells;
  double inflow_total = 0.0;
  double outflow_total = 0.0;
  std::vector<VehicleAdjoint> vehicles;
};

struct NetworkAdjoint {
  std::vector<LaneAdjoint> lanes;

  static NetworkAdjoint zeros_like(const NetworkState& s) {
    NetworkAdjoint a;
    a.lanes.resize(s.lanes.size());
    for (std::size_t i = 0; i < s.lanes.size(); ++i) {
      a.lanes[i].cells.assign(s.lanes[i].macro.cells.size(), Vec2{});
      a.lanes[i].vehicles.assign(s.lanes[i].micro.vehicles.size(), VehicleAdjoint{});
    }
    return a;
  }
};

/// Sum of per-step costs l_n(S^n), n = 0..T.
struct Objective {
  std::function<double(const NetworkState&, std::size_t n, std::size_t T)> value;
  /// Adds d l_n / d S^n into the adjoint.
  std::function<void(const NetworkState&, std::size_t n, std::size_t T, NetworkAdjoint&)> gradient;
};

/// Objective that only looks at the final state.
inline Objective terminal_objective(std::function<double(const NetworkState&)> value,
                                    std::function<void(const NetworkState&, NetworkAdjoint&)> gradient) {
  Objective o;
  o.value = [value](const NetworkState& s, std::size_t n, std::size_t T) { return n == T ? value(s) : 0.0; };
  o.gradient = [gradient](const NetworkState& s, std::size_t n, std::size_t T, NetworkAdjoint& a) {
    if (n == T) gradient(s, a);
  };
  return o;
}

struct SimulationResult {
  NetworkState final_state;
  StepTape tape;  ///< empty unless recorded
  std::vector<coupling::EmissionRecord> emissions;
  Diagnostics diagnostics;
  double objective = 0.0;
};

struct SimulateOptions {
  bool record = false;
  const Objective* objective = nullptr;
  /// Called with S^0 .. S^T.
  std::function<void(const NetworkState&)> observer;
};

inline SimulationResult run(const Scenario& scn, std::size_t steps, const SimulateOptions& opt) {
  const Topology topo(scn);
  SimulationResult res;
  NetworkState s = initial_state(scn);
  auto partial = opt.record ? std::make_shared<StepTape>() : nullptr;
  if (partial) {
    partial->config_hash = hash_scenario(scn);
    partial->steps.reserve(steps);
  }
  for (std::size_t n = 0; n < steps; ++n) {
    if (opt.observer) opt.observer(s);
    if (opt.objective) res.objective += opt.objective->value(s, n, steps);
    try {
      StepRecord rec;
      NetworkState next = advance(scn, topo, s, &rec, &res.diagnostics);
      res.emissions.insert(res.emissions.end(), rec.emissions.begin(), rec.emissions.end());
      if (partial) {
        rec.state = std::move(s);
        partial->steps.push_back(std::move(rec));
      }
      s = std::move(next);
    } catch (const Error& e) {
      std::ostringstream os;
      os << "step " << n << ": " << e.what();
      if (partial) partial->final_state = s;
      throw SimulationFailure(os.str(), n, partial);
    }
  }
  if (opt.observer) opt.observer(s);
  if (opt.objective) res.objective += opt.objective->value(s, steps, steps);
  if (partial) {
    partial->final_state = s;
    res.tape = std::move(*partial);
  }
  res.final_state = std::move(s);
  return res;
}

/// Runs `steps` steps and records the tape.
inline SimulationResult simulate_and_record(const Scenario& scn, std::size_t steps,
                                            const Objective* objective = nullptr) {
  SimulateOptions o;
  o.record = true;
  o.objective = objective;
  return run(scn, steps, o);
}

inline SimulationResult simulate(const Scenario& scn, std::size_t steps, const Objective* objective = nullptr) {
  SimulateOptions o;
  o.objective = objective;
  return run(scn, steps, o);
}

/// Replays step k of a tape from its checkpoint.
inline NetworkState replay_step(const Scenario& scn, const StepTape& tape, std::size_t k) {
  if (tape.config_hash != hash_scenario(scn)) throw TapeError("replay_step: tape was recorded for another scenario");
  if (k >= tape.steps.size()) throw TapeError("replay_step: step out of range");
  return advance(scn, Topology(scn), tape.steps[k].state, nullptr);
}

struct GradientBundle {
  /// Per lane, in scenario order. Empty for lanes of the other kind.
  std::vector<LaneId> lane_ids;
  std::vector<std::vector<Vec2>> initial_cells;     ///< d/d(rho, y)
  std::vector<std::vector<Vec2>> initial_vehicles;  ///< d/d(p, v), initial vehicle order
  std::vector<std::vector<double>> controls;        ///< per channel, per value
  std::map<std::string, double> parameters;         ///< "u_max/<lane id>"
  double objective = 0.0;                           ///< loss value of the rollout
  std::int64_t vacuum_warnings = 0;
};

inline std::string umax_key(LaneId id) { return "u_max/" + std::to_string(id); }

inline GradientBundle zero_bundle(const Scenario& scn) {
  GradientBundle g;
  for (const auto& l : scn.lanes) {
    g.lane_ids.push_back(l.id);
    g.initial_cells.emplace_back(l.kind == LaneKind::Macro ? l.macro.cells.size() : 0, Vec2{});
    g.initial_vehicles.emplace_back(l.kind == LaneKind::Micro ? l.micro.vehicles.size() : 0, Vec2{});
    if (l.kind == LaneKind::Macro && l.differentiate_u_max) g.parameters[umax_key(l.id)] = 0.0;
  }
  for (const auto& ch : scn.controls) g.controls.emplace_back(ch.values.size(), 0.0);
  return g;
}

/// Reverse sweep over a recorded tape.
inline GradientBundle backward(const Scenario& scn, const StepTape& tape, const Objective& objective) {
  if (tape.config_hash != hash_scenario(scn)) throw TapeError("backward: tape was recorded for another scenario");
  const Topology topo(scn);
  const SolverConfig& cfg = scn.config;
  const std::size_t T = tape.steps.size();
  const bool ancillary = cfg.gradient_mode == GradientMode::Ancillary;

  GradientBundle out = zero_bundle(scn);
  std::vector<double> umax_grad(scn.lanes.size(), 0.0);
  std::vector<std::vector<double>> seeds(topo.links.size());
  std::vector<std::vector<double>> flux_seeds(topo.links.size());
  std::vector<double> flux_running(topo.links.size(), 0.0);
  for (std::size_t k = 0; k < topo.links.size(); ++k) {
    if (topo.links[k].kind != LinkKind::MacroToMicro) continue;
    seeds[k].assign(T, 0.0);
    flux_seeds[k].assign(T, 0.0);
  }

  NetworkAdjoint lam = NetworkAdjoint::zeros_like(tape.final_state);
  objective.gradient(tape.final_state, T, T, lam);
  out.objective = objective.value(tape.final_state, T, T);

  for (std::size_t step = T; step-- > 0;) {
    const StepRecord& rec = tape.steps[step];
    const NetworkState& S_next = step + 1 < T ? tape.steps[step + 1].state : tape.final_state;
    auto tape_next_cell = [&](std::size_t lane) -> const CellState& { return S_next.lanes[lane].macro.cells.back(); };
    const NetworkState& S = rec.state;
    if (S.step != step) throw TapeError("backward: checkpoint out of order");
    NetworkAdjoint prev = NetworkAdjoint::zeros_like(S);

    for (std::size_t i : topo.micro_lanes) {
      const auto& mrec = rec.micro[i];
      MicroLaneState lane_in = S.lanes[i].micro;
      const std::size_t m = lane_in.vehicles.size();
      lane_in.vehicles.insert(lane_in.vehicles.end(), mrec.placed.begin(), mrec.placed.end());
      const std::size_t total = lane_in.vehicles.size();
      const auto& after = lam.lanes[i].vehicles;
      if (after.size() + mrec.exited != total) throw TapeError("backward: vehicle count mismatch");
      std::vector<VehicleAdjoint> post(total);
      std::copy(after.begin(), after.end(), post.begin() + static_cast<std::ptrdiff_t>(mrec.exited));

      std::vector<double> steps(m, cfg.dt);
      steps.insert(steps.end(), mrec.placed_step.begin(), mrec.placed_step.end());
      const auto jac = idm::idm_step_jacobians(lane_in, cfg, mrec.lead_acceleration, &steps);
      std::vector<VehicleAdjoint> pre(total);
      for (std::size_t v = 0; v < total; ++v) {
        const Vec2 a{post[v].p, post[v].v};
        const Vec2 self = jac.self[v].transpose_times(a);
        pre[v].p += self[0];
        pre[v].v += self[1];
        pre[v].w += post[v].w;
        if (v > 0) {
          const Vec2 lead = jac.leader[v].transpose_times(a);
          pre[v - 1].p += lead[0];
          pre[v - 1].v += lead[1];
        }
      }
      if (mrec.lead_acceleration && total > 0) {
        out.controls[*topo.lead_control[i]][step] += jac.d_lead_v_d_control * post[0].v;
      }
      for (std::size_t v = 0; v < m; ++v) prev.lanes[i].vehicles[v] = pre[v];

      for (std::size_t e = 0; e < mrec.placed.size(); ++e) {
        const auto& adj = pre[m + e];
        const std::size_t k = mrec.placed_link[e];
        const std::size_t a = topo.links[k].from;
        const arz::Model model = detail::model_of(scn, a);
        const CellState& last = S.lanes[a].macro.cells.back();
        const CellState& last_next = tape_next_cell(a);
        const auto vp = arz::velocity_partials(last, model);
        const auto vp_next = arz::velocity_partials(last_next, model);
        // Entry speed u + theta (u' - u) with theta = 1 - entry step / dt.
        const double entry_t = mrec.placed_step[e];
        const double theta = 1.0 - entry_t / cfg.dt;
        const double u = arz::velocity_from_state(last, model).u;
        const double u_next = arz::velocity_from_state(last_next, model).u;
        prev.lanes[a].cells.back() += (1.0 - theta) * adj.v * Vec2{vp.d_rho, vp.d_y};
        umax_grad[a] += (1.0 - theta) * adj.v * (arz::is_vacuum(last) ? 1.0 : vp.d_umax);
        lam.lanes[a].cells.back() += theta * adj.v * Vec2{vp_next.d_rho, vp_next.d_y};
        umax_grad[a] += theta * adj.v * (arz::is_vacuum(last_next) ? 1.0 : vp_next.d_umax);
        const auto it = std::find_if(rec.emissions.begin(), rec.emissions.end(),
                                     [&](const auto& r) { return r.id == mrec.placed[e].id; });
        if (it == rec.emissions.end()) throw TapeError("backward: missing emission record");
        // Entry step overshoot * length / (rho u); the overshoot is the whole
        // flux history of the link minus a fixed integer.
        const double d_step =
            jac.d_step[m + e].dot(Vec2{post[m + e].p, post[m + e].v}) - adj.v * (u_next - u) / cfg.dt;
        if (entry_t < cfg.dt && d_step != 0.0) {
          const double rho = last.rho;
          flux_seeds[k][step] += d_step * cfg.vehicle_length / (rho * u);
          prev.lanes[a].cells.back()[0] -= d_step * entry_t / rho;
          prev.lanes[a].cells.back() -= (d_step * entry_t / u) * Vec2{vp.d_rho, vp.d_y};
          umax_grad[a] -= d_step * entry_t / u * vp.d_umax;
        }
        if (ancillary && adj.w != 0.0) {
          coupling::backward_through_emission(
              adj.w, it->interval, cfg,
              [&](std::size_t t) {
                return arz::velocity_from_state(tape.steps[t].state.lanes[a].macro.cells.back(), model).u;
              },
              [&](std::size_t t, double val) { seeds[k][t] += val; });
        }
      }
    }

    for (std::size_t i : topo.macro_lanes) {
      const auto& mrec = rec.macro[i];
      const auto& lane = S.lanes[i].macro;
      const auto jac = fvm::step_jacobians(lane, cfg, mrec.options, mrec.interfaces, mrec.clamps);
      out.vacuum_warnings += jac.vacuum_warnings;
      const auto& mu = lam.lanes[i];
      auto& dst = prev.lanes[i];
      const std::size_t N = lane.cells.size();
      for (std::size_t c = 0; c < N; ++c) {
        Vec2 acc = jac.diag[c].transpose_times(mu.cells[c]);
        if (c + 1 < N) acc += jac.lower[c + 1].transpose_times(mu.cells[c + 1]);
        if (c > 0) acc += jac.upper[c - 1].transpose_times(mu.cells[c - 1]);
        dst.cells[c] += acc;
        umax_grad[i] += jac.d_dumax[c].dot(mu.cells[c]);
      }
      dst.inflow_total += mu.inflow_total;
      dst.outflow_total += mu.outflow_total;
      dst.cells.front() += mu.inflow_total * jac.d_inflow_d_first;
      dst.cells.back() += mu.outflow_total * jac.d_outflow_d_last;
      umax_grad[i] += mu.inflow_total * jac.d_inflow_d_umax + mu.outflow_total * jac.d_outflow_d_umax;
      if (mrec.options.downstream_gate) {
        out.controls[*topo.gate_control[i]][step] +=
            jac.d_last_d_gate.dot(mu.cells.back()) + mu.outflow_total * jac.d_outflow_d_gate;
      }
      if (topo.in_link[i]) {
        const std::size_t k = *topo.in_link[i];
        const auto& L = topo.links[k];
        const Vec2 ghost = jac.d_first_d_link_ghost.transpose_times(mu.cells.front()) +
                           mu.inflow_total * jac.d_inflow_d_link_ghost;
        const auto& agg = rec.aggregates[k];
        const auto g = coupling::backward_through_aggregation(ghost, agg, L.window, detail::model_of(scn, i), cfg);
        auto& vehicles = prev.lanes[L.from].vehicles;
        for (std::size_t v = agg.first; v < agg.first + agg.count; ++v) {
          vehicles[v].v += g.d_velocity;
          if (ancillary) vehicles[v].w += g.d_weight;
        }
        umax_grad[i] += g.d_umax;
      }
    }

    for (std::size_t k = 0; k < topo.links.size(); ++k) {
      if (topo.links[k].kind != LinkKind::MacroToMicro) continue;
      const std::size_t a = topo.links[k].from;
      prev.lanes[a].cells.back()[0] += seeds[k][step];
      flux_running[k] += flux_seeds[k][step];
      const CellState& last = S.lanes[a].macro.cells.back();
      if (flux_running[k] == 0.0 || arz::is_vacuum(last)) continue;
      const arz::Model model = detail::model_of(scn, a);
      const auto vp = arz::velocity_partials(last, model);
      const double u = arz::velocity_from_state(last, model).u;
      const double c = flux_running[k] * cfg.dt / cfg.vehicle_length;
      prev.lanes[a].cells.back() += c * Vec2{u + last.rho * vp.d_rho, last.rho * vp.d_y};
      umax_grad[a] += c * last.rho * vp.d_umax;
    }

    objective.gradient(S, step, T, prev);
    out.objective += objective.value(S, step, T);
    lam = std::move(prev);
  }

  for (std::size_t i = 0; i < scn.lanes.size(); ++i) {
    out.initial_cells[i] = lam.lanes[i].cells;
    out.initial_vehicles[i].resize(lam.lanes[i].vehicles.size());
    for (std::size_t v = 0; v < lam.lanes[i].vehicles.size(); ++v)
      out.initial_vehicles[i][v] = {lam.lanes[i].vehicles[v].p, lam.lanes[i].vehicles[v].v};
    const auto& l = scn.lanes[i];
    if (l.kind == LaneKind::Macro && l.differentiate_u_max) out.parameters[umax_key(l.id)] = umax_grad[i];
  }
  return out;
}

/// Flat view of every differentiated input: per lane the macro cells (rho, y)
/// or the vehicles (p, v), then every control value, then u_max of lanes that
/// request it.
inline std::vector<double> flatten_inputs(const Scenario& scn) {
  std::vector<double> x;
  for (const auto& l : scn.lanes) {
    if (l.kind == LaneKind::Macro) {
      for (const auto& c : l.macro.cells) {
        x.push_back(c.rho);
        x.push_back(c.y);
      }
    } else {
      for (const auto& v : l.micro.vehicles) {
        x.push_back(v.p);
        x.push_back(v.v);
      }
    }
  }
  for (const auto& ch : scn.controls) x.insert(x.end(), ch.values.begin(), ch.values.end());
  for (const auto& l : scn.lanes)
    if (l.kind == LaneKind::Macro && l.differentiate_u_max) x.push_back(l.macro.u_max);
  return x;
}

inline void assign_inputs(Scenario& scn, const std::vector<double>& x) {
  std::size_t k = 0;
  auto take = [&]() {
    if (k >= x.size()) throw DomainError("assign_inputs: vector too short");
    return x[k++];
  };
  for (auto& l : scn.lanes) {
    if (l.kind == LaneKind::Macro) {
      for (auto& c : l.macro.cells) {
        c.rho = take();
        c.y = take();
      }
    } else {
      for (auto& v : l.micro.vehicles) {
        v.p = take();
        v.v = take();
      }
    }
  }
  for (auto& ch : scn.controls)
    for (auto& v : ch.values) v = take();
  for (auto& l : scn.lanes)
    if (l.kind == LaneKind::Macro && l.differentiate_u_max) l.macro.u_max = take();
  if (k != x.size()) throw DomainError("assign_inputs: vector too long");
}

inline std::vector<double> flatten(const Scenario& scn, const GradientBundle& g) {
  std::vector<double> x;
  for (std::size_t i = 0; i < scn.lanes.size(); ++i) {
    for (const auto& c : g.initial_cells[i]) {
      x.push_back(c[0]);
      x.push_back(c[1]);
    }
    for (const auto& v : g.initial_vehicles[i]) {
      x.push_back(v[0]);
      x.push_back(v[1]);
    }
  }
  for (const auto& ch : g.controls) x.insert(x.end(), ch.begin(), ch.end());
  for (const auto& l : scn.lanes)
    if (l.kind == LaneKind::Macro && l.differentiate_u_max) x.push_back(g.parameters.at(umax_key(l.id)));
  return x;
}

inline GradientBundle unflatten(const Scenario& scn, const std::vector<double>& x) {
  GradientBundle g = zero_bundle(scn);
  std::size_t k = 0;
  for (std::size_t i = 0; i < scn.lanes.size(); ++i) {
    for (auto& c : g.initial_cells[i]) {
      c[0] = x.at(k++);
      c[1] = x.at(k++);
    }
    for (auto& v : g.initial_vehicles[i]) {
      v[0] = x.at(k++);
      v[1] = x.at(k++);
    }
  }
  for (auto& ch : g.controls)
    for (auto& v : ch) v = x.at(k++);
  for (const auto& l : scn.lanes)
    if (l.kind == LaneKind::Macro && l.differentiate_u_max) g.parameters[umax_key(l.id)] = x.at(k++);
  return g;
}

/// Mass bookkeeping in vehicles.
struct MassAudit {
  double macro = 0.0;
  double vehicles = 0.0;
  double in_transit = 0.0;    ///< capacitor surplus not yet placed
  double external_in = 0.0;   ///< entered through outer macro boundaries
  double external_out = 0.0;  ///< left through outer boundaries (macro flux, micro exits)
  /// Macro inflow from micro windows minus vehicles that left those micro lanes.
  double link_imbalance = 0.0;
  /// Share of the vehicles inside aggregation windows already handed to the
  /// downstream macro lane, estimated from their position in the window.
  double window_handed = 0.0;

  double total() const { return macro + vehicles - window_handed + in_transit - external_in + external_out; }
};

inline MassAudit mass_audit(const Scenario& scn, const NetworkState& s) {
  const Topology topo(scn);
  const double L = scn.config.vehicle_length;
  MassAudit a;
  for (std::size_t i : topo.macro_lanes) {
    const auto& m = s.lanes[i].macro;
    a.macro += m.vehicle_mass(L);
    if (!topo.in_link[i]) a.external_in += m.inflow_total / L;
    else a.link_imbalance += m.inflow_total / L;
    if (!topo.out_link[i]) a.external_out += m.outflow_total / L;
  }
  for (std::size_t i : topo.micro_lanes) {
    a.vehicles += static_cast<double>(s.lanes[i].micro.vehicles.size());
    if (topo.out_link[i]) {
      const auto& win = topo.links[*topo.out_link[i]].window;
      for (const auto& v : s.lanes[i].micro.vehicles)
        if (win.contains(v.p)) a.window_handed += (v.p - win.l) / win.width();
    }
    if (!topo.out_link[i]) a.external_out += static_cast<double>(s.exited[i]);
    else a.link_imbalance -= static_cast<double>(s.exited[i]);
  }
  for (std::size_t k = 0; k < topo.links.size(); ++k)
    if (topo.links[k].kind == LinkKind::MacroToMicro) a.in_transit += s.capacitors[k].in_transit();
  return a;
}

}  // namespace difftraffic
