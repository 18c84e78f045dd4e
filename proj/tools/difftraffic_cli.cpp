// difftraffic: run scenarios, check gradients, benchmark, and solve
// estimation and control problems.
//
// Exit codes: 0 success, 1 simulation or optimization failure, 2 input error.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "difftraffic/difftraffic.hpp"

namespace {

namespace fs = std::filesystem;
using namespace difftraffic;
using nlohmann::json;

/// Bad arguments, unreadable files or invalid documents.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string scenario;
  std::size_t steps = 100;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::string mode;
  unsigned threads = 1;
};

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("DIFFTRAFFIC_LOG")) {
    const auto level = spdlog::level::from_str(env);
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
  }
}

Scenario load_checked(const Common& c) {
  Scenario scn;
  try {
    scn = io::load_scenario(c.scenario);
  } catch (const ScenarioError& e) {
    throw InputError(e.what());
  }
  if (c.seed) scn.config.rng_seed = *c.seed;
  if (c.mode == "det") scn.config.conversion_mode = ConversionMode::Deterministic;
  else if (c.mode == "stoch") scn.config.conversion_mode = ConversionMode::Stochastic;
  const auto problems = validate_scenario(scn);
  if (!problems.empty()) {
    std::ostringstream os;
    os << c.scenario << ": invalid scenario";
    for (const auto& p : problems) os << "\n  " << p;
    throw InputError(os.str());
  }
  spdlog::info("loaded {} ({} lanes, {} links)", c.scenario, scn.lanes.size(), scn.links.size());
  return scn;
}

json load_problem(const std::string& path) {
  try {
    return io::parse_json_text(io::read_text_file(path), path);
  } catch (const ScenarioError& e) {
    throw InputError(e.what());
  }
}

fs::path output_dir(const std::string& out) {
  fs::path p(out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw InputError(out + ": cannot create directory: " + ec.message());
  return p;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw InputError(p.string() + ": cannot write file");
  return os;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

/// Reads problem keys with the same key checks and messages as scenarios.
struct ProblemReader {
  const json& j;
  std::string path;

  void allow(std::initializer_list<const char*> keys) const {
    try {
      io::detail::check_keys(j, path, keys);
    } catch (const ScenarioError& e) {
      throw InputError(e.what());
    }
  }
  template <class F>
  auto wrap(F&& f) const {
    try {
      return f();
    } catch (const ScenarioError& e) {
      throw InputError(e.what());
    }
  }
  double number(const char* key) const { return wrap([&] { return io::detail::number_at(j, path, key); }); }
  double number_or(const char* key, double def) const { return j.contains(key) ? number(key) : def; }
  std::size_t count(const char* key) const {
    return wrap([&] { return io::detail::integer_at<std::size_t>(j, path, key); });
  }
  std::size_t count_or(const char* key, std::size_t def) const { return j.contains(key) ? count(key) : def; }
  std::string string(const char* key) const { return wrap([&] { return io::detail::string_at(j, path, key); }); }
  std::vector<double> numbers(const char* key) const {
    return wrap([&] {
      std::vector<double> v;
      const auto& a = io::detail::array_at(j, path, key);
      for (std::size_t i = 0; i < a.size(); ++i)
        v.push_back(io::detail::number(a[i], path + "." + key + "[" + std::to_string(i) + "]"));
      return v;
    });
  }
  ProblemReader child(const char* key) const {
    return wrap([&] { return ProblemReader{io::detail::require(j, path, key), path + "." + key}; });
  }
};

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const Common& c) {
  const Scenario scn = load_checked(c);
  const fs::path dir = output_dir(c.out);
  auto states = open_out(dir / "states.csv");
  report::write_state_csv_header(states);
  SimulateOptions so;
  so.observer = [&](const NetworkState& s) { report::write_state_csv_rows(states, scn, s); };
  report::Stopwatch w;
  SimulationResult res;
  try {
    res = run(scn, c.steps, so);
  } catch (const SimulationFailure& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  const auto rep = report::make_report(scn, res, c.steps, w.seconds());
  write_json(dir / "report.json", report::to_json(rep));
  auto em = open_out(dir / "emissions.csv");
  coupling::write_emission_csv(em, res.emissions, scn.config.dt);
  std::cout << "simulated " << c.steps << " steps in " << std::setprecision(4) << rep.forward_seconds << " s ("
            << rep.steps_per_second() << " steps/s), warnings " << rep.warnings() << ", output in " << dir.string()
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const Common& c, const std::string& loss, const harness::GradcheckOptions& opt) {
  Scenario scn = load_checked(c);
  scn.config.gradient_mode = GradientMode::Pathwise;
  Objective obj;
  if (loss == "quadratic") {
    obj = harness::quadratic_loss();
  } else {
    const Scenario other = demos::perturbed_initial_state(scn, opt.seed + 1);
    try {
      obj = opt::estimation_objective(simulate(other, c.steps).final_state);
    } catch (const SimulationFailure& e) {
      spdlog::error("target rollout: {}", e.what());
      return 1;
    }
  }
  harness::GradcheckResult r;
  try {
    r = harness::gradcheck(scn, c.steps, obj, opt);
  } catch (const SimulationFailure& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  std::cout << std::left << std::setw(24) << "block" << std::setw(9) << "checked" << std::setw(10) << "excluded"
            << std::setw(15) << "max rel err" << "status\n";
  for (const auto& b : r.blocks) {
    std::cout << std::setw(24) << b.name << std::setw(9) << b.checked << std::setw(10) << b.excluded << std::setw(15)
              << std::setprecision(3) << b.max_rel_error << harness::status_name(b.status) << '\n';
  }
  std::cout << (r.pass ? "PASS" : "FAIL") << " (" << r.trials.size() << " trials, h " << opt.h << ", tolerance "
            << opt.tolerance << ", pathwise gradients)\n";
  if (!c.out.empty()) {
    auto j = harness::to_json(r, opt);
    j["loss"] = loss;
    write_json(output_dir(c.out) / "gradcheck.json", j);
  }
  return r.pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
  std::vector<std::string> scales{"10/1000", "50/5000"};
  std::vector<double> epsilons = harness::default_epsilons();
  std::size_t repeats = 5;
  std::size_t calls = 21;
  std::size_t sweep_steps = 1000;
  bool timing = true;
  bool sweep = true;
};

json stats_json(const harness::TimingStats& t) {
  return {{"median", t.median()}, {"mean", t.mean()}, {"cv", t.cv()}, {"samples", t.samples}};
}

int cmd_bench(const Common& c, const BenchOptions& b) {
  json out = {{"schema_version", report::kSchemaVersion}, {"threads", c.threads}};
  bool ok = true;
  if (!c.scenario.empty()) {
    const Scenario scn = load_checked(c);
    const Objective obj = harness::quadratic_loss();
    harness::TimingStats fw, bw;
    try {
      const auto tape = simulate_and_record(scn, c.steps, &obj).tape;
      const auto st = harness::interleaved_medians(
          {[&] { simulate(scn, c.steps, &obj); }, [&] { backward(scn, tape, obj); }}, b.repeats, b.calls);
      fw = st[0];
      bw = st[1];
    } catch (const SimulationFailure& e) {
      spdlog::error("{}", e.what());
      return 1;
    }
    std::cout << c.scenario << ": forward " << fw.median() << " s, backward " << bw.median() << " s over " << c.steps
              << " steps\n";
    out["scenario"] = {{"path", c.scenario}, {"steps", c.steps}, {"forward", stats_json(fw)}, {"backward", stats_json(bw)}};
  }
  if (b.timing) {
    json rows = json::array();
    std::cout << std::left << std::setw(9) << "scale" << std::setw(12) << "forward" << std::setw(12) << "backward"
              << std::setw(12) << "analytic" << std::setw(12) << "fd" << std::setw(10) << "fd/an" << std::setw(10)
              << "bw/fw" << "cv(an,fd)\n";
    for (const auto& s : b.scales) {
      const auto slash = s.find('/');
      std::size_t cells = 0, steps = 0;
      try {
        if (slash == std::string::npos) throw std::invalid_argument(s);
        cells = std::stoul(s.substr(0, slash));
        steps = std::stoul(s.substr(slash + 1));
      } catch (const std::exception&) {
        throw InputError("--scales: expected CELLS/STEPS, got '" + s + "'");
      }
      const auto t = harness::time_scale(cells, steps, b.repeats, b.calls);
      std::cout << std::setprecision(4) << std::setw(9) << t.label << std::setw(12) << t.forward.median()
                << std::setw(12) << t.backward.median() << std::setw(12) << t.analytic.median() << std::setw(12)
                << t.finite_diff.median() << std::setw(10) << t.speedup() << std::setw(10)
                << t.backward_over_forward() << t.analytic.cv() << ", " << t.finite_diff.cv() << '\n';
      rows.push_back({{"label", t.label},
                      {"cells", t.cells},
                      {"steps", t.steps},
                      {"inputs", t.inputs},
                      {"forward", stats_json(t.forward)},
                      {"record", stats_json(t.record)},
                      {"backward", stats_json(t.backward)},
                      {"analytic", stats_json(t.analytic)},
                      {"finite_diff", stats_json(t.finite_diff)},
                      {"speedup", t.speedup()},
                      {"backward_over_forward", t.backward_over_forward()}});
    }
    out["timing"] = std::move(rows);
  }
  if (b.sweep) {
    const auto sw = harness::epsilon_sweep(b.epsilons, b.sweep_steps, b.repeats);
    json pts = json::array();
    std::cout << std::left << std::setw(9) << "epsilon" << std::setw(10) << "vehicles" << std::setw(8) << "cells"
              << "steps/s\n";
    for (const auto& p : sw.points) {
      std::cout << std::setw(9) << p.epsilon << std::setw(10) << p.vehicles << std::setw(8) << p.cells
                << std::setprecision(6) << p.steps_per_second << '\n';
      pts.push_back({{"epsilon", p.epsilon},
                     {"vehicles", p.vehicles},
                     {"cells", p.cells},
                     {"steps_per_second", p.steps_per_second},
                     {"seconds", stats_json(p.seconds)}});
    }
    const bool mono = sw.monotone_non_increasing();
    std::cout << "throughput monotone non-increasing in epsilon: " << (mono ? "yes" : "no") << '\n';
    out["sweep"] = {{"steps", sw.steps}, {"points", std::move(pts)}, {"monotone_non_increasing", mono}};
    ok = ok && mono;
  }
  write_json(output_dir(c.out) / "bench.json", out);
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// estimate

int cmd_estimate(const Common& c, const std::string& problem_path) {
  const Scenario truth = load_checked(c);
  const json pj = load_problem(problem_path);
  const ProblemReader pr{pj, problem_path};
  pr.allow({"steps", "max_iterations", "seed", "density_jitter"});
  const std::size_t steps = pr.count("steps");
  const std::uint64_t seed = pr.count_or("seed", c.seed.value_or(1));
  const double jitter = pr.number_or("density_jitter", 0.3);

  opt::EstimationProblem prob;
  prob.steps = steps;
  prob.settings.max_iterations = pr.count_or("max_iterations", 500);
  prob.scenario = demos::perturbed_initial_state(truth, seed, jitter);
  opt::EstimationResult r;
  try {
    prob.target = simulate(truth, steps).final_state;
    r = opt::estimate_initial_state(prob);
  } catch (const SimulationFailure& e) {
    spdlog::error("estimation: {}", e.what());
    return 1;
  }
  const fs::path dir = output_dir(c.out);
  io::save_scenario(r.estimate, (dir / "estimate.json").string());
  auto hist = open_out(dir / "history.csv");
  opt::write_history_csv(hist, r.run.history);
  const double ratio = r.run.value > 0.0 ? r.initial_loss / r.run.value : std::numeric_limits<double>::infinity();
  write_json(dir / "result.json", {{"schema_version", report::kSchemaVersion},
                                   {"initial_loss", r.initial_loss},
                                   {"final_loss", r.run.value},
                                   {"reduction", std::isfinite(ratio) ? json(ratio) : json(nullptr)},
                                   {"iterations", r.run.history.back().iteration},
                                   {"evaluations", r.run.evaluations},
                                   {"rejected", r.run.rejected},
                                   {"stop_reason", r.run.stop_reason}});
  std::cout << "loss " << r.initial_loss << " -> " << r.run.value << " (" << ratio << "x) after "
            << r.run.history.back().iteration << " iterations: " << r.run.stop_reason << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// control

void write_series_csv(const fs::path& p, const char* column, const std::vector<double>& v) {
  auto os = open_out(p);
  os.precision(17);
  os << "index," << column << '\n';
  for (std::size_t i = 0; i < v.size(); ++i) os << i << ',' << v[i] << '\n';
}

int finish_control(const fs::path& dir, const opt::ControlResult& r, json extra) {
  auto hist = open_out(dir / "history.csv");
  opt::write_history_csv(hist, r.history);
  extra["schema_version"] = report::kSchemaVersion;
  extra["initial_reward"] = r.initial_reward;
  extra["reward"] = r.reward;
  extra["iterations"] = r.history.back().iteration;
  extra["stop_reason"] = r.run.stop_reason;
  write_json(dir / "result.json", extra);
  std::cout << "reward " << r.initial_reward << " -> " << r.reward << " after " << r.history.back().iteration
            << " iterations: " << r.run.stop_reason << '\n';
  return 0;
}

int cmd_control(const Common& c, const std::string& problem_path) {
  const Scenario scn = load_checked(c);
  const json pj = load_problem(problem_path);
  const ProblemReader pr{pj, problem_path};
  const std::string kind = pr.string("kind");
  const fs::path dir = output_dir(c.out);
  try {
    if (kind == "pace_car") {
      pr.allow({"kind", "steps", "v_targ", "c_max", "a_min", "a_max", "max_iterations"});
      opt::PaceCarProblem p;
      p.scenario = scn;
      p.steps = pr.count("steps");
      const ProblemReader vt = pr.child("v_targ");
      vt.allow({"before", "after", "switch_time"});
      p.v_targ = opt::step_schedule(vt.number("before"), vt.number("after"), vt.number("switch_time"));
      p.c_max = pr.number_or("c_max", p.c_max);
      p.a_min = pr.number_or("a_min", p.a_min);
      p.a_max = pr.number_or("a_max", p.a_max);
      p.settings.max_iterations = pr.count_or("max_iterations", 200);
      if (p.scenario.controls.empty() || p.scenario.controls[0].kind != ControlChannel::Kind::LeadAcceleration)
        throw InputError(c.scenario + ": pace_car needs a lead_acceleration control as its first channel");
      const auto r = opt::optimize_pace_car(p);
      write_series_csv(dir / "controls.csv", "acceleration", r.controls);
      return finish_control(dir, r, {{"kind", kind}, {"controls", r.controls}});
    }
    if (kind == "signal") {
      pr.allow({"kind", "steps", "cycle", "green", "min_share", "c1", "c2", "speed_threshold", "speed_width",
                "max_iterations"});
      opt::SignalProblem p;
      p.scenario = scn;
      p.steps = pr.count("steps");
      p.cycle = pr.number("cycle");
      p.green = pr.numbers("green");
      if (p.green.empty()) throw InputError(problem_path + ".green: needs at least one phase");
      p.min_share = pr.number_or("min_share", p.min_share);
      p.c1 = pr.number_or("c1", p.c1);
      p.c2 = pr.number_or("c2", p.c2);
      if (pj.contains("speed_threshold")) p.speed_threshold = pr.number("speed_threshold");
      p.speed_width = pr.number_or("speed_width", p.speed_width);
      p.settings.max_iterations = pr.count_or("max_iterations", 60);
      if (p.scenario.controls.size() < 2) throw InputError(c.scenario + ": signal needs two outflow_gate controls");
      const auto r = opt::optimize_signal_timing(p);
      write_series_csv(dir / "green.csv", "we_share", r.controls);
      opt::SignalProblem tuned = p;
      tuned.green = r.controls;
      const auto m = opt::signal_measures(tuned);
      return finish_control(dir, r,
                            {{"kind", kind},
                             {"green", r.controls},
                             {"flow", m.flow},
                             {"queue", m.queue},
                             {"hard_queue", m.hard_queue}});
    }
  } catch (const SimulationFailure& e) {
    spdlog::error("control: {}", e.what());
    return 1;
  }
  throw InputError(problem_path + ".kind: expected pace_car or signal, got '" + kind + "'");
}

// ---------------------------------------------------------------------------
// demo export

int cmd_demo_export(const std::string& out) {
  const fs::path dir = output_dir(out);
  Scenario minimal = demos::macro_lane(1);
  const std::vector<std::pair<std::string, Scenario>> scenarios = {
      {"minimal_cell", minimal},
      {"macro_lane", demos::macro_lane()},
      {"walled_lane", demos::walled_lane()},
      {"stationary_shock", demos::stationary_shock()},
      {"hybrid_chain", demos::hybrid_chain()},
      {"pace_car", demos::pace_car(4, 100)},
      {"pace_car_toy", demos::pace_car(1, 10, 30.0, 0.5)},
      {"signal_toy", demos::signal_toy(0.12, 0.12, 160)},
  };
  for (const auto& [name, scn] : scenarios) io::save_scenario(scn, (dir / (name + ".json")).string());
  write_json(dir / "estimate_problem.json", {{"steps", 100}, {"max_iterations", 500}, {"seed", 1}});
  write_json(dir / "pace_car_problem.json",
             {{"kind", "pace_car"},
              {"steps", 100},
              {"v_targ", {{"before", 30.0}, {"after", 10.0}, {"switch_time", 3.0}}},
              {"max_iterations", 200}});
  write_json(dir / "signal_problem.json", {{"kind", "signal"},
                                           {"steps", 160},
                                           {"cycle", 20.0},
                                           {"green", {0.3, 0.3, 0.3, 0.3}},
                                           {"max_iterations", 60}});
  std::cout << "wrote " << scenarios.size() << " scenarios and 3 problems to " << dir.string() << '\n';
  return 0;
}

void add_common(CLI::App* app, Common& c, bool scenario_required = true) {
  auto* s = app->add_option("--scenario", c.scenario, "Scenario JSON file");
  if (scenario_required) s->required();
  app->add_option("--steps", c.steps, "Number of time steps")->capture_default_str();
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--seed", c.seed, "Random seed (overrides the scenario's rng_seed)");
  app->add_option("--mode", c.mode, "Conversion mode")->check(CLI::IsMember({"det", "stoch"}));
  app->add_option("--threads", c.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Differentiable hybrid macro/micro traffic simulator"};
  app.require_subcommand(1);

  Common common;
  auto* sim = app.add_subcommand("simulate", "Run a scenario and write states.csv, emissions.csv and report.json");
  add_common(sim, common);

  std::string loss = "quadratic";
  harness::GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Compare backward() with central finite differences");
  grad->set_help_flag("--help", "Print this help message and exit");
  add_common(grad, common);
  grad->add_option("--loss", loss, "Loss on the final state")->check(CLI::IsMember({"quadratic", "estimation"}))->capture_default_str();
  grad->add_option("--trials", gc.trials, "Input coordinates to check")->capture_default_str();
  grad->add_option("--h", gc.h, "Finite-difference step")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", gc.tolerance, "Relative error tolerance")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--kink-threshold", gc.kink_threshold, "One-sided difference disagreement that excludes a coordinate")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  BenchOptions bo;
  bool no_timing = false, no_sweep = false;
  auto* bench = app.add_subcommand("bench", "Time analytical against finite-difference gradients and sweep epsilon");
  add_common(bench, common, false);
  bench->add_option("--scales", bo.scales, "Timing scale labels CELLS/STEPS")->capture_default_str();
  bench->add_option("--epsilons", bo.epsilons, "Micro vehicle ratios for the sweep")->capture_default_str();
  bench->add_option("--repeats", bo.repeats, "Runs per measurement")->capture_default_str()->check(CLI::PositiveNumber);
  bench->add_option("--calls", bo.calls, "Calls per rollout sample (median)")->capture_default_str()->check(CLI::PositiveNumber);
  bench->add_option("--sweep-steps", bo.sweep_steps, "Steps per sweep rollout")->capture_default_str();
  bench->add_flag("--no-timing", no_timing, "Skip the timing table");
  bench->add_flag("--no-sweep", no_sweep, "Skip the epsilon sweep");

  std::string problem;
  auto* est = app.add_subcommand("estimate", "Recover the initial state of a scenario from its final state");
  add_common(est, common);
  est->add_option("--problem", problem, "Problem JSON file")->required();

  auto* ctl = app.add_subcommand("control", "Optimize a pace car or signal timing");
  add_common(ctl, common);
  ctl->add_option("--problem", problem, "Problem JSON file")->required();

  std::string demo_out = "scenarios";
  auto* demo = app.add_subcommand("demo", "Bundled demo scenarios");
  demo->require_subcommand(1);
  auto* demo_export = demo->add_subcommand("export", "Write the demo scenarios and problem files");
  demo_export->add_option("--out", demo_out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sim) return cmd_simulate(common);
    if (*grad) {
      gc.seed = common.seed.value_or(0);
      gc.threads = common.threads;
      if (common.out == ".") common.out.clear();
      return cmd_gradcheck(common, loss, gc);
    }
    if (*bench) {
      bo.timing = !no_timing;
      bo.sweep = !no_sweep;
      return cmd_bench(common, bo);
    }
    if (*est) return cmd_estimate(common, problem);
    if (*ctl) return cmd_control(common, problem);
    if (*demo_export) return cmd_demo_export(demo_out);
  } catch (const InputError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const ScenarioError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
