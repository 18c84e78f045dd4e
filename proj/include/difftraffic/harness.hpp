#pragma once

// Gradient checks and timing protocols shared by the command-line tool and
// the acceptance run.

#include <algorithm>
#include <functional>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "difftraffic/demos.hpp"
#include "difftraffic/engine.hpp"
#include "difftraffic/finite_diff.hpp"
#include "difftraffic/report.hpp"

namespace difftraffic::harness {

/// Runs body(k) for k in [0, n) on up to `threads` workers.
template <class Body>
void parallel_for(std::size_t n, unsigned threads, Body&& body) {
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (workers <= 1) {
    for (std::size_t k = 0; k < n; ++k) body(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t k; (k = next++) < n;) {
        try {
          body(k);
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

// ---------------------------------------------------------------------------
// Losses

/// Sum over the final frame of rho^2 + y^2 per cell and (p / 1000)^2 + v^2
/// per vehicle.
inline Objective quadratic_loss() {
  return terminal_objective(
      [](const NetworkState& s) {
        double r = 0.0;
        for (const auto& l : s.lanes) {
          for (const auto& c : l.macro.cells) r += c.rho * c.rho + c.y * c.y;
          for (const auto& v : l.micro.vehicles) r += 1e-6 * v.p * v.p + v.v * v.v;
        }
        return r;
      },
      [](const NetworkState& s, NetworkAdjoint& a) {
        for (std::size_t i = 0; i < s.lanes.size(); ++i) {
          const auto& l = s.lanes[i];
          for (std::size_t k = 0; k < l.macro.cells.size(); ++k) {
            a.lanes[i].cells[k][0] += 2.0 * l.macro.cells[k].rho;
            a.lanes[i].cells[k][1] += 2.0 * l.macro.cells[k].y;
          }
          for (std::size_t k = 0; k < l.micro.vehicles.size(); ++k) {
            a.lanes[i].vehicles[k].p += 2e-6 * l.micro.vehicles[k].p;
            a.lanes[i].vehicles[k].v += 2.0 * l.micro.vehicles[k].v;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient check

/// Contiguous range of flatten_inputs belonging to one input block.
struct InputBlock {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<InputBlock> input_blocks(const Scenario& scn) {
  std::vector<InputBlock> out;
  std::size_t k = 0;
  for (const auto& l : scn.lanes) {
    const bool macro = l.kind == LaneKind::Macro;
    const std::size_t n = 2 * (macro ? l.macro.cells.size() : l.micro.vehicles.size());
    out.push_back({"lane " + std::to_string(l.id) + (macro ? " cells" : " vehicles"), k, k + n});
    k += n;
  }
  for (std::size_t c = 0; c < scn.controls.size(); ++c) {
    const std::size_t n = scn.controls[c].values.size();
    out.push_back({"control " + std::to_string(c), k, k + n});
    k += n;
  }
  for (const auto& l : scn.lanes) {
    if (l.kind == LaneKind::Macro && l.differentiate_u_max) {
      out.push_back({umax_key(l.id), k, k + 1});
      ++k;
    }
  }
  return out;
}

struct GradcheckOptions {
  std::size_t trials = 20;
  double h = 1e-6;
  double tolerance = 1e-4;
  /// Relative disagreement of the one-sided differences that marks a kink.
  double kink_threshold = 1e-2;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct TrialResult {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  /// One-sided differences disagree (a shock or case switch inside [-h, h])
  /// or a perturbed rollout failed.
  bool excluded = false;
};

struct BlockResult {
  std::string name;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  double max_rel_error = 0.0;
  enum class Status { Pass, Fail, Excluded, Empty } status = Status::Empty;
};

inline const char* status_name(BlockResult::Status s) {
  switch (s) {
    case BlockResult::Status::Pass: return "pass";
    case BlockResult::Status::Fail: return "fail";
    case BlockResult::Status::Excluded: return "excluded";
    case BlockResult::Status::Empty: return "empty";
  }
  return "?";
}

struct GradcheckResult {
  std::vector<BlockResult> blocks;
  std::vector<TrialResult> trials;
  double objective = 0.0;
  bool pass = true;
};

/// Compares backward() against central differences on `trials` input
/// coordinates drawn without replacement.
///
/// Relative error is |a - f| / max(|a|, |f|, floor) with
/// floor = 10 eps max(1, |objective|) / (h tolerance), eps the machine
/// epsilon. eps |objective| / h is the rounding error of the difference
/// quotient, so gradients below the floor are compared in absolute terms and
/// rounding alone stays a tenth of the tolerance. A coordinate is excluded
/// when its forward and backward one-sided differences differ by more than
/// kink_threshold on the same scale. A block fails when any checked coordinate exceeds the tolerance and
/// is reported excluded when all of its coordinates were excluded.
inline GradcheckResult gradcheck(const Scenario& scn, std::size_t steps, const Objective& objective,
                                 const GradcheckOptions& opt) {
  GradcheckResult out;
  const auto rec = simulate_and_record(scn, steps, &objective);
  out.objective = rec.objective;
  const std::vector<double> analytic = flatten(scn, backward(scn, rec.tape, objective));
  const std::vector<double> x0 = flatten_inputs(scn);
  std::vector<std::size_t> order(x0.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(opt.seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(opt.trials, order.size()));
  std::sort(order.begin(), order.end());

  const double f0 = rec.objective;
  const double floor =
      10.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) / (opt.h * opt.tolerance);
  out.trials.resize(order.size());
  parallel_for(order.size(), opt.threads, [&](std::size_t t) {
    const std::size_t k = order[t];
    auto at = [&](double offset) -> std::optional<double> {
      Scenario s = scn;
      std::vector<double> x = x0;
      x[k] += offset;
      assign_inputs(s, x);
      try {
        return rollout_objective(s, steps, objective);
      } catch (const SimulationFailure&) {
        return std::nullopt;
      }
    };
    TrialResult& tr = out.trials[t];
    tr.index = k;
    tr.analytic = analytic[k];
    const auto fp = at(opt.h), fm = at(-opt.h);
    if (!fp || !fm) {
      tr.excluded = true;
      return;
    }
    tr.numeric = (*fp - *fm) / (2.0 * opt.h);
    const double fwd = (*fp - f0) / opt.h, bwd = (f0 - *fm) / opt.h;
    const double scale = std::max({std::abs(fwd), std::abs(bwd), floor});
    tr.excluded = std::abs(fwd - bwd) > opt.kink_threshold * scale;
    tr.rel_error = std::abs(tr.analytic - tr.numeric) / std::max({std::abs(tr.analytic), std::abs(tr.numeric), floor});
  });

  for (const auto& b : input_blocks(scn)) {
    BlockResult br;
    br.name = b.name;
    for (const auto& tr : out.trials) {
      if (tr.index < b.begin || tr.index >= b.end) continue;
      if (tr.excluded) {
        ++br.excluded;
        continue;
      }
      ++br.checked;
      br.max_rel_error = std::max(br.max_rel_error, tr.rel_error);
    }
    if (br.checked > 0) br.status = br.max_rel_error <= opt.tolerance ? BlockResult::Status::Pass : BlockResult::Status::Fail;
    else if (br.excluded > 0) br.status = BlockResult::Status::Excluded;
    if (br.status == BlockResult::Status::Fail) out.pass = false;
    out.blocks.push_back(br);
  }
  return out;
}

inline report::json to_json(const GradcheckResult& r, const GradcheckOptions& opt) {
  report::json blocks = report::json::array();
  for (const auto& b : r.blocks) {
    blocks.push_back({{"block", b.name},
                      {"checked", b.checked},
                      {"excluded", b.excluded},
                      {"max_rel_error", b.max_rel_error},
                      {"status", status_name(b.status)}});
  }
  return {{"schema_version", report::kSchemaVersion},
          {"pass", r.pass},
          {"objective", r.objective},
          {"trials", r.trials.size()},
          {"h", opt.h},
          {"tolerance", opt.tolerance},
          {"kink_threshold", opt.kink_threshold},
          {"blocks", std::move(blocks)}};
}

// ---------------------------------------------------------------------------
// Timing

struct TimingStats {
  std::vector<double> samples;  ///< seconds

  double mean() const {
    return samples.empty() ? 0.0 : std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
  }
  double median() const {
    if (samples.empty()) return 0.0;
    auto s = samples;
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    return n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  }
  /// Sample standard deviation over the mean.
  double cv() const {
    if (samples.size() < 2) return 0.0;
    const double m = mean();
    double ss = 0.0;
    for (double x : samples) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(samples.size() - 1)) / m;
  }
};

/// Forward, reverse and finite-difference cost of one scale label: a walled
/// macro lane of `cells` cells run for `steps` steps under quadratic_loss().
struct ScaleTiming {
  std::string label;
  std::size_t cells = 0;
  std::size_t steps = 0;
  std::size_t inputs = 0;
  TimingStats forward;   ///< rollout without a tape
  TimingStats record;    ///< rollout that records the tape
  TimingStats backward;  ///< reverse sweep over the tape
  TimingStats analytic;  ///< record + backward
  TimingStats finite_diff;

  double speedup() const { return finite_diff.median() / analytic.median(); }
  double backward_over_forward() const { return backward.median() / forward.median(); }
};

/// Median seconds over `calls` calls of `f`.
template <class F>
double median_call_seconds(F&& f, std::size_t calls) {
  TimingStats t;
  for (std::size_t i = 0; i < std::max<std::size_t>(calls, 1); ++i) {
    report::Stopwatch w;
    f();
    t.samples.push_back(w.seconds());
  }
  return t.median();
}

/// Per task, one sample per run: the median of `calls` calls. Calls are
/// issued round-robin over runs and tasks, so slow changes in machine speed
/// fall on every run and task alike.
inline std::vector<TimingStats> interleaved_medians(const std::vector<std::function<void()>>& tasks,
                                                    std::size_t runs, std::size_t calls) {
  std::vector<std::vector<TimingStats>> raw(tasks.size(), std::vector<TimingStats>(runs));
  for (std::size_t k = 0; k < std::max<std::size_t>(calls, 1); ++k)
    for (std::size_t r = 0; r < runs; ++r)
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        report::Stopwatch w;
        tasks[i]();
        raw[i][r].samples.push_back(w.seconds());
      }
  std::vector<TimingStats> out(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (const auto& run : raw[i]) out[i].samples.push_back(run.median());
  return out;
}

/// Single-threaded cost of one scale label, `repeats` runs per quantity.
///
/// Rollout and reverse-sweep samples are the median of `calls` calls. A
/// finite-difference sample is the summed time of the 2 x inputs rollouts of
/// one full gradient. Work is issued round-robin: round k makes call k of
/// every rollout quantity and probes input k, for every run in turn.
inline ScaleTiming time_scale(std::size_t cells, std::size_t steps, std::size_t repeats, std::size_t calls = 21) {
  ScaleTiming t;
  t.label = std::to_string(cells) + "/" + (steps % 1000 == 0 ? std::to_string(steps / 1000) + "K" : std::to_string(steps));
  t.cells = cells;
  t.steps = steps;
  const Scenario scn = demos::walled_lane(cells);
  const std::vector<double> x0 = flatten_inputs(scn);
  t.inputs = x0.size();
  const Objective obj = quadratic_loss();
  const auto tape = simulate_and_record(scn, steps, &obj).tape;
  const std::vector<std::function<void()>> tasks{
      [&] { simulate(scn, steps, &obj); },
      [&] { simulate_and_record(scn, steps, &obj); },
      [&] { backward(scn, tape, obj); },
      [&] {
        const auto rec = simulate_and_record(scn, steps, &obj);
        backward(scn, rec.tape, obj);
      },
  };
  calls = std::max<std::size_t>(calls, 1);
  std::vector<std::vector<TimingStats>> raw(tasks.size(), std::vector<TimingStats>(repeats));
  std::vector<double> fd(repeats, 0.0);
  for (std::size_t k = 0; k < std::max(calls, t.inputs); ++k) {
    for (std::size_t r = 0; r < repeats; ++r) {
      if (k < calls) {
        for (std::size_t i = 0; i < tasks.size(); ++i) {
          report::Stopwatch w;
          tasks[i]();
          raw[i][r].samples.push_back(w.seconds());
        }
      }
      if (k < t.inputs) {
        report::Stopwatch w;
        finite_diff_probe(scn, steps, obj, x0, k, 1e-6);
        fd[r] += w.seconds();
      }
    }
  }
  TimingStats* out[] = {&t.forward, &t.record, &t.backward, &t.analytic};
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (const auto& run : raw[i]) out[i]->samples.push_back(run.median());
  t.finite_diff.samples = fd;
  return t;
}

struct SweepPoint {
  double epsilon = 0.0;
  std::size_t vehicles = 0;  ///< micro vehicles at the start
  std::size_t cells = 0;     ///< macro cells
  double steps_per_second = 0.0;
  TimingStats seconds;
};

struct Sweep {
  std::size_t steps = 0;
  std::vector<SweepPoint> points;

  bool monotone_non_increasing() const {
    for (std::size_t i = 1; i < points.size(); ++i)
      if (points[i].steps_per_second > points[i - 1].steps_per_second) return false;
    return true;
  }
};

inline const std::vector<double>& default_epsilons() {
  static const std::vector<double> e{0.01, 0.02, 0.05, 0.1, 0.2, 0.5};
  return e;
}

/// Throughput of demos::epsilon_roads for each epsilon. Within a repeat all
/// epsilons advance together in chunks of `chunk` steps, visiting them in
/// alternating order. A repeat's time for a point is the median per-step
/// time over its chunks times `steps`. Throughput comes from the repeat with
/// the median total time, so all points share one pass over the machine.
inline Sweep epsilon_sweep(const std::vector<double>& epsilons, std::size_t steps, std::size_t repeats,
                           std::size_t chunk = 20) {
  Sweep sw;
  sw.steps = steps;
  chunk = std::max<std::size_t>(chunk, 1);
  std::vector<Scenario> scenarios;
  std::vector<Topology> topos;
  for (double e : epsilons) {
    scenarios.push_back(demos::epsilon_roads(e));
    topos.emplace_back(scenarios.back());
    SweepPoint p;
    p.epsilon = e;
    for (const auto& l : scenarios.back().lanes) {
      p.vehicles += l.micro.vehicles.size();
      p.cells += l.macro.cells.size();
    }
    sw.points.push_back(p);
  }
  const std::size_t m = scenarios.size();
  for (std::size_t r = 0; r < repeats; ++r) {
    std::vector<NetworkState> states;
    for (const auto& scn : scenarios) states.push_back(initial_state(scn));
    std::vector<std::vector<double>> per_step(m);
    for (std::size_t done = 0, pass = 0; done < steps; done += chunk, ++pass) {
      const std::size_t n = std::min(chunk, steps - done);
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t i = pass % 2 == 0 ? j : m - 1 - j;
        Diagnostics diag;
        report::Stopwatch w;
        for (std::size_t k = 0; k < n; ++k) {
          StepRecord rec;
          states[i] = advance(scenarios[i], topos[i], states[i], &rec, &diag);
        }
        per_step[i].push_back(w.seconds() / static_cast<double>(n));
      }
    }
    for (std::size_t i = 0; i < m; ++i)
      sw.points[i].seconds.samples.push_back(TimingStats{per_step[i]}.median() * static_cast<double>(steps));
  }
  if (repeats == 0) return sw;
  std::vector<std::pair<double, std::size_t>> totals;
  for (std::size_t r = 0; r < repeats; ++r) {
    double t = 0.0;
    for (const auto& p : sw.points) t += p.seconds.samples[r];
    totals.emplace_back(t, r);
  }
  std::nth_element(totals.begin(), totals.begin() + repeats / 2, totals.end());
  const std::size_t mid = totals[repeats / 2].second;
  for (auto& p : sw.points) {
    const double t = p.seconds.samples[mid];
    p.steps_per_second = t > 0.0 ? static_cast<double>(steps) / t : 0.0;
  }
  return sw;
}

}  // namespace difftraffic::harness
