#pragma once

// Shared experiment protocols for the optimization tests and the acceptance run.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "difftraffic/demos.hpp"
#include "difftraffic/engine.hpp"
#include "difftraffic/optimize.hpp"

namespace difftraffic::testing {

inline std::vector<VehicleId> surviving_ids(const NetworkState& s) {
  std::vector<VehicleId> ids;
  for (const auto& l : s.lanes)
    for (const auto& v : l.micro.vehicles) ids.push_back(v.id);
  return ids;
}

/// Random starting guesses drawn from seeds 1, 2, ... that reproduce the
/// discrete events of the truth run: the same vehicles on the micro lanes
/// at the end and no deferred entries.
inline std::vector<Scenario> event_preserving_guesses(const Scenario& truth, std::size_t steps, std::size_t count,
                                                      double density_jitter = 0.3) {
  const auto reference = simulate(truth, steps);
  const auto ids = surviving_ids(reference.final_state);
  std::vector<Scenario> out;
  for (std::uint64_t seed = 1; out.size() < count && seed < 1000; ++seed) {
    Scenario guess = demos::perturbed_initial_state(truth, seed, density_jitter);
    const auto r = simulate(guess, steps);
    if (surviving_ids(r.final_state) != ids || r.diagnostics.deferred != 0 ||
        r.diagnostics.emitted != reference.diagnostics.emitted)
      continue;
    out.push_back(std::move(guess));
  }
  return out;
}

struct EstimationOutcome {
  std::vector<double> ratios;  ///< initial loss / final loss per guess
  double median = 0.0;
};

inline EstimationOutcome run_estimation(const Scenario& truth, const std::vector<Scenario>& guesses,
                                        std::size_t steps) {
  const auto target = simulate(truth, steps).final_state;
  EstimationOutcome out;
  for (const auto& g : guesses) {
    opt::EstimationProblem p;
    p.scenario = g;
    p.target = target;
    p.steps = steps;
    const auto r = opt::estimate_initial_state(p);
    out.ratios.push_back(r.run.value > 0.0 ? r.initial_loss / r.run.value : std::numeric_limits<double>::infinity());
  }
  auto sorted = out.ratios;
  std::sort(sorted.begin(), sorted.end());
  if (!sorted.empty()) out.median = sorted[sorted.size() / 2];
  return out;
}

}  // namespace difftraffic::testing
