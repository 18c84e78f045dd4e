#include <gtest/gtest.h>

#include <sstream>

#include "difftraffic/demos.hpp"
#include "difftraffic/harness.hpp"
#include "difftraffic/report.hpp"

using namespace difftraffic;
using namespace difftraffic::harness;

namespace {

/// quadratic_loss with its gradient scaled by `factor`.
Objective skewed_quadratic(double factor) {
  const Objective q = quadratic_loss();
  Objective o;
  o.value = q.value;
  o.gradient = [q, factor](const NetworkState& s, std::size_t n, std::size_t T, NetworkAdjoint& a) {
    NetworkAdjoint tmp = NetworkAdjoint::zeros_like(s);
    q.gradient(s, n, T, tmp);
    for (std::size_t i = 0; i < a.lanes.size(); ++i) {
      for (std::size_t c = 0; c < a.lanes[i].cells.size(); ++c) a.lanes[i].cells[c] += factor * tmp.lanes[i].cells[c];
      for (std::size_t v = 0; v < a.lanes[i].vehicles.size(); ++v) {
        a.lanes[i].vehicles[v].p += factor * tmp.lanes[i].vehicles[v].p;
        a.lanes[i].vehicles[v].v += factor * tmp.lanes[i].vehicles[v].v;
      }
    }
  };
  return o;
}

}  // namespace

TEST(InputBlocks, CoverFlatInputsInOrder) {
  Scenario scn = demos::pace_car(2, 5);
  const auto blocks = input_blocks(scn);
  ASSERT_EQ(blocks.size(), 2u);
  EXPECT_EQ(blocks[0].name, "lane 0 vehicles");
  EXPECT_EQ(blocks[0].end - blocks[0].begin, 6u);
  EXPECT_EQ(blocks[1].name, "control 0");
  EXPECT_EQ(blocks[1].end, flatten_inputs(scn).size());
}

TEST(Gradcheck, PassesOnPlatoon) {
  const Scenario scn = demos::pace_car(1, 10, 30.0, 0.5);
  GradcheckOptions opt;
  opt.tolerance = 1e-5;
  const auto r = gradcheck(scn, 10, quadratic_loss(), opt);
  EXPECT_TRUE(r.pass);
  for (const auto& b : r.blocks) EXPECT_EQ(b.status, BlockResult::Status::Pass) << b.name;
}

TEST(Gradcheck, FlagsWrongGradient) {
  const Scenario scn = demos::macro_lane(6);
  GradcheckOptions opt;
  opt.trials = 12;
  const auto r = gradcheck(scn, 20, skewed_quadratic(2.0), opt);
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.blocks[0].status, BlockResult::Status::Fail);
  EXPECT_NEAR(r.blocks[0].max_rel_error, 0.5, 1e-3);
}

TEST(Gradcheck, ExcludesStationaryShock) {
  const auto r = gradcheck(demos::stationary_shock(), 1, quadratic_loss(), {});
  EXPECT_TRUE(r.pass);
  ASSERT_EQ(r.blocks.size(), 1u);
  EXPECT_EQ(r.blocks[0].status, BlockResult::Status::Excluded);
  EXPECT_GT(r.blocks[0].excluded, 0u);
}

TEST(Gradcheck, ZeroTrialsLeavesBlocksEmpty) {
  GradcheckOptions opt;
  opt.trials = 0;
  const auto r = gradcheck(demos::macro_lane(4), 5, quadratic_loss(), opt);
  EXPECT_TRUE(r.pass);
  for (const auto& b : r.blocks) EXPECT_EQ(b.status, BlockResult::Status::Empty);
}

TEST(Gradcheck, ThreadedMatchesSerial) {
  const Scenario scn = demos::hybrid_chain();
  GradcheckOptions opt;
  const auto a = gradcheck(scn, 30, quadratic_loss(), opt);
  opt.threads = 3;
  const auto b = gradcheck(scn, 30, quadratic_loss(), opt);
  ASSERT_EQ(a.trials.size(), b.trials.size());
  for (std::size_t k = 0; k < a.trials.size(); ++k) {
    EXPECT_EQ(a.trials[k].index, b.trials[k].index);
    EXPECT_EQ(a.trials[k].numeric, b.trials[k].numeric);
  }
}

TEST(Gradcheck, JsonReportsBlocks) {
  GradcheckOptions opt;
  opt.trials = 4;
  const auto r = gradcheck(demos::macro_lane(4), 5, quadratic_loss(), opt);
  const auto j = to_json(r, opt);
  EXPECT_EQ(j["schema_version"], report::kSchemaVersion);
  EXPECT_EQ(j["trials"], 4);
  EXPECT_EQ(j["blocks"][0]["block"], "lane 0 cells");
}

TEST(TimingStats, MedianAndCv) {
  TimingStats t;
  EXPECT_EQ(t.median(), 0.0);
  EXPECT_EQ(t.cv(), 0.0);
  t.samples = {3.0, 1.0, 2.0, 4.0};
  EXPECT_DOUBLE_EQ(t.median(), 2.5);
  EXPECT_DOUBLE_EQ(t.mean(), 2.5);
  EXPECT_NEAR(t.cv(), std::sqrt(5.0 / 3.0) / 2.5, 1e-12);
}

TEST(Timing, InterleavedMediansVisitEveryRunInTurn) {
  std::vector<int> order;
  const auto st = interleaved_medians({[&] { order.push_back(0); }, [&] { order.push_back(1); }}, 3, 2);
  ASSERT_EQ(st.size(), 2u);
  EXPECT_EQ(st[0].samples.size(), 3u);
  EXPECT_EQ(order, (std::vector<int>{0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1}));
}

TEST(Timing, ScaleHasOneSamplePerRun) {
  const auto t = time_scale(5, 100, 2, 1);
  EXPECT_EQ(t.label, "5/100");
  EXPECT_EQ(t.inputs, 10u);
  for (const auto* s : {&t.forward, &t.record, &t.backward, &t.analytic, &t.finite_diff}) {
    ASSERT_EQ(s->samples.size(), 2u);
    EXPECT_GT(s->median(), 0.0);
  }
  EXPECT_EQ(time_scale(50, 5000, 0, 1).label, "50/5K");
}

TEST(Sweep, MonotoneCheck) {
  Sweep s;
  for (double sps : {30.0, 20.0, 20.0, 5.0}) s.points.push_back({0.0, 0, 0, sps, {}});
  EXPECT_TRUE(s.monotone_non_increasing());
  s.points[2].steps_per_second = 21.0;
  EXPECT_FALSE(s.monotone_non_increasing());
}

TEST(Sweep, CountsVehiclesAndCells) {
  const auto sw = epsilon_sweep({0.1, 0.5}, 2, 1);
  ASSERT_EQ(sw.points.size(), 2u);
  EXPECT_LT(sw.points[0].vehicles, sw.points[1].vehicles);
  EXPECT_GT(sw.points[0].cells, sw.points[1].cells);
  EXPECT_GT(sw.points[1].steps_per_second, 0.0);
}

TEST(Sweep, ReadsPointsFromOneRepeat) {
  const auto sw = epsilon_sweep({0.1, 0.5}, 7, 3, 3);
  for (const auto& p : sw.points) ASSERT_EQ(p.seconds.samples.size(), 3u);
  bool shared = false;
  for (std::size_t r = 0; r < 3; ++r)
    shared = shared || (sw.points[0].steps_per_second == 7.0 / sw.points[0].seconds.samples[r] &&
                        sw.points[1].steps_per_second == 7.0 / sw.points[1].seconds.samples[r]);
  EXPECT_TRUE(shared);
}

TEST(Report, StateCsvLayout) {
  const Scenario scn = demos::hybrid_chain();
  std::ostringstream os;
  report::write_state_csv_header(os);
  report::write_state_csv_rows(os, scn, initial_state(scn));
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,time,lane,entity,index,rho,y,u,p,v");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("0,0,0,cell,0,", 0), 0u);
  std::size_t rows = 1, vehicles = 0;
  while (std::getline(is, line)) {
    ++rows;
    if (line.find(",vehicle,") != std::string::npos) ++vehicles;
  }
  EXPECT_EQ(rows, 23u);
  EXPECT_EQ(vehicles, 3u);
}

TEST(Report, RunReportCountsWarnings) {
  const Scenario scn = demos::hybrid_chain();
  const auto res = simulate(scn, 200);
  const auto r = report::make_report(scn, res, 200, 0.5);
  EXPECT_DOUBLE_EQ(r.steps_per_second(), 400.0);
  EXPECT_EQ(r.warnings(), 0);
  const auto j = report::to_json(r);
  EXPECT_EQ(j["lanes"].size(), 3u);
  EXPECT_EQ(j["counters"]["emitted"], res.diagnostics.emitted);
  EXPECT_EQ(j["scenario_hash"], hash_scenario(scn));
}
