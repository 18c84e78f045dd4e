#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "difftraffic/fvm.hpp"
#include "support/oracles.hpp"

using namespace difftraffic;
using fvm::fvm_step;
using difftraffic::testing::block_rel_error;
using difftraffic::testing::fd_jacobian;
using difftraffic::testing::state_from_rho_u;

namespace {

SolverConfig config_with_dt(double dt) {
  SolverConfig c;
  c.dt = dt;
  return c;
}

MacroLaneState random_lane(std::mt19937_64& rng, std::size_t n, double lo = 0.1, double hi = 0.9) {
  MacroLaneState lane;
  lane.dx = 50.0;
  lane.u_max = 30.0;
  const arz::Model m{lane.u_max, 0.5};
  for (std::size_t i = 0; i < n; ++i) lane.cells.push_back(difftraffic::testing::random_cell(rng, m, lo, hi));
  return lane;
}

// Straightforward Godunov update written against primitive variables.
namespace reference {

struct Prim {
  double rho, u;
};

double ueq(double rho, double U) { return U * (1.0 - std::sqrt(rho)); }

Prim to_prim(const CellState& q, double U) {
  if (q.rho <= 1e-8) return {0.0, U};
  return {q.rho, q.y / q.rho + ueq(q.rho, U)};
}

CellState to_cons(Prim p, double U) { return {p.rho, p.rho > 0.0 ? p.rho * (p.u - ueq(p.rho, U)) : 0.0}; }

Prim interface(Prim l, Prim r, double U) {
  const double g = 0.5;
  if (l.rho <= 0.0) return {0.0, U};
  const double sl = std::sqrt(l.rho);
  const double lam_l = l.u - U * g * sl;
  auto fan = [&] {
    const double w = l.u + U * sl;
    const double base = w / ((g + 1.0) * U);
    return Prim{base * base, g / (g + 1.0) * w};
  };
  auto mid = [&] {
    const double s = sl + (l.u - r.u) / U;
    return Prim{s * s, r.u};
  };
  if (r.rho <= 0.0 || l.u <= r.u - U * sl) return lam_l >= 0.0 ? l : fan();
  if (l.u == r.u) return l;
  if (l.u > r.u) {
    const Prim m = mid();
    const double ls = (m.rho * m.u - l.rho * l.u) / (m.rho - l.rho);
    return ls >= 0.0 ? l : m;
  }
  if (lam_l >= 0.0) return l;
  const double lam_m = r.u - U * g * sl + g * (r.u - l.u);
  return lam_m <= 0.0 ? mid() : fan();
}

std::vector<CellState> step(const std::vector<CellState>& cells, double dx, double dt, double U) {
  const std::size_t n = cells.size();
  std::vector<Prim> p(n + 2);
  for (std::size_t i = 0; i < n; ++i) p[i + 1] = to_prim(cells[i], U);
  p[0] = p[1];
  p[n + 1] = p[n];
  std::vector<double> f0(n + 1), f1(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    const Prim s = interface(p[k], p[k + 1], U);
    const CellState q = to_cons(s, U);
    f0[k] = q.rho > 1e-8 ? q.rho * s.u : 0.0;
    f1[k] = q.rho > 1e-8 ? q.y * s.u : 0.0;
  }
  std::vector<CellState> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = {cells[i].rho - dt / dx * (f0[i + 1] - f0[i]), cells[i].y - dt / dx * (f1[i + 1] - f1[i])};
    if (out[i].rho < 0.0) out[i] = {0.0, 0.0};
    if (out[i].rho > 1.0) out[i].rho = 1.0;
  }
  return out;
}

}  // namespace reference

}  // namespace

TEST(FvmStep, UniformLaneIsStationary) {
  MacroLaneState lane;
  lane.dx = 20.0;
  const arz::Model m{lane.u_max, 0.5};
  const CellState q = state_from_rho_u(0.3, 15.0, m);
  lane.cells.assign(12, q);
  lane.upstream_boundary = BoundaryCondition::inflow(q);
  lane.downstream_boundary = BoundaryCondition::outflow();
  const auto next = fvm_step(lane, config_with_dt(0.1));
  for (const auto& c : next.cells) {
    EXPECT_DOUBLE_EQ(c.rho, q.rho);
    EXPECT_DOUBLE_EQ(c.y, q.y);
  }
}

TEST(FvmStep, ClosedLaneConservesDensity) {
  std::mt19937_64 rng(2);
  MacroLaneState lane = random_lane(rng, 20, 0.1, 0.6);
  const arz::Model m{lane.u_max, 0.5};
  for (auto& c : lane.cells) c = difftraffic::testing::random_subequilibrium_cell(rng, m, 0.1, 0.6);
  lane.upstream_boundary = BoundaryCondition::wall();
  lane.downstream_boundary = BoundaryCondition::wall();
  const SolverConfig cfg = config_with_dt(0.5);
  auto mass = [](const MacroLaneState& l) {
    double s = 0.0;
    for (const auto& c : l.cells) s += c.rho * l.dx;
    return s;
  };
  const double m0 = mass(lane);
  for (int n = 0; n < 200; ++n) {
    const auto r = fvm::fvm_step_detailed(lane, cfg);
    ASSERT_EQ(r.clamp_count, 0);
    const double before = mass(lane);
    lane = r.lane;
    EXPECT_NEAR(mass(lane), before, 1e-10);
  }
  EXPECT_NEAR(mass(lane), m0, 1e-9);
}

TEST(FvmStep, MatchesReferenceImplementation) {
  std::mt19937_64 rng(7);
  MacroLaneState lane = random_lane(rng, 10);
  const SolverConfig cfg = config_with_dt(0.5);
  std::vector<CellState> ref = lane.cells;
  for (int n = 0; n < 50; ++n) {
    lane = fvm_step(lane, cfg);
    ref = reference::step(ref, lane.dx, cfg.dt, lane.u_max);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ASSERT_NEAR(lane.cells[i].rho, ref[i].rho, 1e-13) << "step " << n << " cell " << i;
      ASSERT_NEAR(lane.cells[i].y, ref[i].y, 1e-12) << "step " << n << " cell " << i;
    }
  }
}

TEST(FvmStep, RejectsCflViolation) {
  MacroLaneState lane;
  lane.dx = 1.0;
  lane.cells.assign(3, CellState{0.1, 0.0});
  EXPECT_THROW(fvm_step(lane, config_with_dt(0.1)), CflViolation);
}

TEST(FvmStep, ClampsAreCounted) {
  MacroLaneState lane;
  lane.dx = 10.0;
  const arz::Model m{lane.u_max, 0.5};
  lane.cells = {state_from_rho_u(0.95, 20.0, m), state_from_rho_u(0.99, 0.0, m)};
  lane.downstream_boundary = BoundaryCondition::wall();
  const auto r = fvm::fvm_step_detailed(lane, config_with_dt(0.2));
  EXPECT_GE(r.clamp_count, 1);
  for (const auto& c : r.lane.cells) EXPECT_LE(c.rho, 1.0);
}

TEST(FvmJacobians, SingleWalledCellHasOnlyDiagonal) {
  MacroLaneState lane;
  lane.cells = {CellState{0.4, 0.0}};
  lane.upstream_boundary = BoundaryCondition::wall();
  lane.downstream_boundary = BoundaryCondition::wall();
  const auto j = fvm::fvm_step_jacobians(lane, config_with_dt(0.1));
  ASSERT_EQ(j.diag.size(), 1u);
  EXPECT_EQ(j.lower[0], Mat2::zero());
  EXPECT_EQ(j.upper[0], Mat2::zero());
}

TEST(FvmJacobians, UniformPerturbationMatchesFiniteDifferences) {
  MacroLaneState lane;
  lane.dx = 20.0;
  const arz::Model m{lane.u_max, 0.5};
  lane.cells.assign(8, state_from_rho_u(0.3, 15.0, m));
  const SolverConfig cfg = config_with_dt(0.1);
  const auto j = fvm::fvm_step_jacobians(lane, cfg);
  for (int comp = 0; comp < 2; ++comp) {
    const double h = 1e-6;
    auto shifted = [&](double s) {
      MacroLaneState l = lane;
      for (auto& c : l.cells) (comp == 0 ? c.rho : c.y) += s;
      return fvm_step(l, cfg);
    };
    const auto plus = shifted(h), minus = shifted(-h);
    for (std::size_t i = 0; i < lane.cells.size(); ++i) {
      Vec2 e{};
      e[comp] = 1.0;
      Vec2 an = j.diag[i] * e;
      if (i > 0) an += j.lower[i] * e;
      if (i + 1 < lane.cells.size()) an += j.upper[i] * e;
      const Vec2 fd = (1.0 / (2 * h)) * (plus.cells[i].vec() - minus.cells[i].vec());
      EXPECT_LT(difftraffic::testing::vec_rel_error(an, fd), 1e-5) << "cell " << i << " comp " << comp;
    }
  }
}

TEST(FvmJacobians, RandomLanesMatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  const SolverConfig cfg = config_with_dt(0.5);
  int checked = 0;
  for (int trial = 0; trial < 400 && checked < 100; ++trial) {
    MacroLaneState lane = random_lane(rng, 10);
    const auto r = fvm::fvm_step_detailed(lane, cfg);
    if (r.min_margin < 1e-3 || r.clamp_count > 0) continue;
    const auto j = fvm::step_jacobians(lane, cfg, {}, r.interfaces, r.clamps);
    const double h = 1e-6;
    for (std::size_t col = 0; col < lane.cells.size(); ++col) {
      for (std::size_t row = (col == 0 ? 0 : col - 1); row <= std::min(col + 1, lane.cells.size() - 1); ++row) {
        const Mat2 fd = fd_jacobian(
            [&](Vec2 x) {
              MacroLaneState l = lane;
              l.cells[col] = CellState::from(x);
              return fvm_step(l, cfg).cells[row].vec();
            },
            lane.cells[col].vec(), h);
        const Mat2& an = row == col ? j.diag[row] : (row + 1 == col ? j.upper[row] : j.lower[row]);
        ASSERT_LT(block_rel_error(an, fd), 1e-4) << "trial " << trial << " row " << row << " col " << col;
      }
    }
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(FvmJacobians, SpeedLimitSensitivityMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  const SolverConfig cfg = config_with_dt(0.5);
  MacroLaneState lane;
  do {
    lane = random_lane(rng, 6);
  } while (fvm::fvm_step_detailed(lane, cfg).min_margin < 1e-2);
  const auto j = fvm::fvm_step_jacobians(lane, cfg);
  const double h = 1e-6;
  auto at = [&](double u) {
    MacroLaneState l = lane;
    l.u_max = u;
    return fvm_step(l, cfg);
  };
  const auto p = at(lane.u_max + h), m = at(lane.u_max - h);
  for (std::size_t i = 0; i < lane.cells.size(); ++i) {
    const Vec2 fd = (1.0 / (2 * h)) * (p.cells[i].vec() - m.cells[i].vec());
    EXPECT_LT(difftraffic::testing::vec_rel_error(j.d_dumax[i], fd), 1e-4) << i;
  }
  EXPECT_NEAR(j.d_outflow_d_umax, (p.outflow_total - m.outflow_total) / (2 * h), 1e-6);
}
