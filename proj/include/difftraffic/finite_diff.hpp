#pragma once

// Central-difference gradients over every differentiated input. Used as the
// reference the reverse sweep is checked against and as the baseline cost in
// benchmarks.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

#include "difftraffic/engine.hpp"

namespace difftraffic {

/// Objective value of a rollout of `scn` for `steps` steps.
inline double rollout_objective(const Scenario& scn, std::size_t steps, const Objective& objective) {
  return simulate(scn, steps, &objective).objective;
}

struct FiniteDiffOptions {
  double h = 1e-6;
  unsigned threads = 1;
};

/// Central difference in flat input `k` around `x0` (two rollouts).
inline double finite_diff_probe(const Scenario& scn, std::size_t steps, const Objective& objective,
                                const std::vector<double>& x0, std::size_t k, double h) {
  Scenario s = scn;
  std::vector<double> x = x0;
  x[k] = x0[k] + h;
  assign_inputs(s, x);
  const double fp = rollout_objective(s, steps, objective);
  x[k] = x0[k] - h;
  assign_inputs(s, x);
  const double fm = rollout_objective(s, steps, objective);
  return (fp - fm) / (2.0 * h);
}

/// 2 * dim rollouts, split across `threads` workers.
inline GradientBundle finite_diff_gradient(const Scenario& scn, std::size_t steps, const Objective& objective,
                                           const FiniteDiffOptions& opt = {}) {
  const std::vector<double> x0 = flatten_inputs(scn);
  std::vector<double> g(x0.size(), 0.0);
  auto probe = [&](std::size_t k) { g[k] = finite_diff_probe(scn, steps, objective, x0, k, opt.h); };
  const unsigned workers = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(x0.size())));
  if (workers <= 1) {
    for (std::size_t k = 0; k < x0.size(); ++k) probe(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k; (k = next++) < x0.size();) {
          try {
            probe(k);
          } catch (...) {
            if (!failed.exchange(true)) failure = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  GradientBundle out = unflatten(scn, g);
  out.objective = rollout_objective(scn, steps, objective);
  return out;
}

/// Central difference of the objective along direction `d` in the flat input space.
inline double directional_fd(const Scenario& scn, std::size_t steps, const Objective& objective,
                             const std::vector<double>& d, double h) {
  const std::vector<double> x0 = flatten_inputs(scn);
  if (d.size() != x0.size()) throw DomainError("directional_fd: direction has wrong size");
  auto at = [&](double s) {
    Scenario sc = scn;
    std::vector<double> x = x0;
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += s * d[k];
    assign_inputs(sc, x);
    return rollout_objective(sc, steps, objective);
  };
  return (at(h) - at(-h)) / (2.0 * h);
}

}  // namespace difftraffic
