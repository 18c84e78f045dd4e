#include <gtest/gtest.h>

#include <map>
#include <random>

#include "difftraffic/arz.hpp"
#include "support/oracles.hpp"

using namespace difftraffic;
using namespace difftraffic::arz;
using difftraffic::testing::block_rel_error;
using difftraffic::testing::fd_jacobian;
using difftraffic::testing::state_from_rho_u;

namespace {

const Model kUnit{1.0, 0.5};
const Model kRoad{30.0, 0.5};

}  // namespace

TEST(ArzConstitutive, EquilibriumVelocity) {
  EXPECT_DOUBLE_EQ(u_eq(0.0, kRoad), 30.0);
  EXPECT_DOUBLE_EQ(u_eq(1.0, kRoad), 0.0);
  EXPECT_DOUBLE_EQ(u_eq(0.25, kUnit), 0.5);
  EXPECT_THROW(u_eq(-0.1, kRoad), DomainError);
}

TEST(ArzConstitutive, EquilibriumVelocityIsNonIncreasing) {
  double prev = u_eq(0.0, kRoad);
  for (int i = 1; i <= 100; ++i) {
    const double cur = u_eq(i / 100.0, kRoad);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

TEST(ArzConstitutive, VelocityFromState) {
  const auto v = velocity_from_state({0.25, 0.1}, kUnit);
  EXPECT_NEAR(v.u, 0.9, 1e-15);
  EXPECT_FALSE(v.vacuum);
  EXPECT_DOUBLE_EQ(velocity_from_state({0.4, 0.0}, kRoad).u, u_eq(0.4, kRoad));
  const auto vac = velocity_from_state({0.0, 0.0}, kRoad);
  EXPECT_TRUE(vac.vacuum);
  EXPECT_DOUBLE_EQ(vac.u, 30.0);
}

TEST(ArzConstitutive, VelocityInvertsRelativeFlow) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const CellState q = difftraffic::testing::random_cell(rng, kRoad);
    const double u = velocity_from_state(q, kRoad).u;
    EXPECT_NEAR(relative_flow(q.rho, u, kRoad), q.y, 1e-12);
  }
}

TEST(ArzFlux, Examples) {
  const Vec2 f = flux({0.25, 0.1}, kUnit);
  EXPECT_NEAR(f[0], 0.225, 1e-15);
  EXPECT_NEAR(f[1], 0.09, 1e-15);
  EXPECT_EQ(flux({0.0, 0.0}, kRoad), Vec2(0.0, 0.0));
  EXPECT_EQ(flux({1.0, 0.0}, kRoad), Vec2(0.0, 0.0));
}

TEST(ArzFlux, JacobianAtEquilibriumHasZeroLowerLeft) {
  const CellState q{0.3, 0.0};
  const Mat2 j = flux_jacobian(q, kRoad);
  EXPECT_DOUBLE_EQ(j(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(j(0, 0), u_eq(0.3, kRoad) + 0.3 * u_eq_prime(0.3, kRoad));
  EXPECT_DOUBLE_EQ(j(1, 1), u_eq(0.3, kRoad));
}

TEST(ArzFlux, JacobianAtJam) {
  const Mat2 j = flux_jacobian({1.0, 0.0}, kUnit);
  EXPECT_NEAR(j(0, 0), -0.5, 1e-15);
  EXPECT_DOUBLE_EQ(j(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(j(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(j(1, 1), 0.0);
}

TEST(ArzFlux, JacobianMatchesFiniteDifferences) {
  const CellState q{0.25, 0.1};
  const Mat2 fd = fd_jacobian([&](Vec2 x) { return flux(CellState::from(x), kUnit); }, q.vec(), 1e-6);
  EXPECT_LT(block_rel_error(flux_jacobian(q, kUnit), fd), 1e-6);
}

TEST(ArzFlux, JacobianRejectsVacuum) { EXPECT_THROW(flux_jacobian({0.0, 0.0}, kRoad), DomainError); }

TEST(ArzFlux, EigenvaluesOfJacobian) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const CellState q = difftraffic::testing::random_cell(rng, kRoad);
    const Mat2 j = flux_jacobian(q, kRoad);
    const Vec2 lam = characteristic_speeds(q, kRoad);
    const double tr = j(0, 0) + j(1, 1);
    const double det = j(0, 0) * j(1, 1) - j(0, 1) * j(1, 0);
    EXPECT_NEAR(lam[0] + lam[1], tr, 1e-9);
    EXPECT_NEAR(lam[0] * lam[1], det, 1e-8);
  }
}

TEST(ArzRiemann, EqualVelocitiesPickLeftState) {
  const CellState ql = state_from_rho_u(0.3, 12.0, kRoad);
  const CellState qr = state_from_rho_u(0.6, 12.0, kRoad);
  const auto sol = solve_riemann(ql, qr, kRoad);
  EXPECT_EQ(sol.case_tag, RiemannCase::Case0);
  EXPECT_EQ(sol.q0, ql);
}

TEST(ArzRiemann, EmptyLeftGivesVacuum) {
  const auto sol = solve_riemann({0.0, 0.0}, state_from_rho_u(0.5, 10.0, kRoad), kRoad);
  EXPECT_EQ(sol.case_tag, RiemannCase::Case4Vacuum);
  EXPECT_EQ(sol.q0, CellState{});
}

TEST(ArzRiemann, ShockMovingRightKeepsLeftState) {
  const CellState ql{0.25, 0.1};  // u_l = 0.9
  const CellState qr = state_from_rho_u(0.5, 0.4, kUnit);
  const auto sol = solve_riemann(ql, qr, kUnit);
  ASSERT_TRUE(sol.q_m.has_value());
  EXPECT_NEAR(sol.q_m->rho, 1.0, 1e-14);
  EXPECT_NEAR(sol.lambda_s.value(), 0.175 / 0.75, 1e-14);
  EXPECT_EQ(sol.case_tag, RiemannCase::Case1Left);
  EXPECT_EQ(sol.q0, ql);
}

TEST(ArzRiemann, RightVacuumUsesRarefactionBranches) {
  const CellState ql = state_from_rho_u(0.8, 2.0, kRoad);
  const auto sol = solve_riemann(ql, {0.0, 0.0}, kRoad);
  EXPECT_TRUE(sol.right_vacuum);
  EXPECT_EQ(sol.case_tag, RiemannCase::Case3Rarefaction);
  EXPECT_LT(sol.q0.rho, ql.rho);
}

TEST(ArzRiemann, SonicRarefactionStateIsContinuousWithNeighbours) {
  // At lambda_0l = 0 the fan state equals q_l.
  const double rho = 0.4;
  const double u_l = kRoad.u_max * kRoad.gamma * std::sqrt(rho);
  const CellState ql = state_from_rho_u(rho, u_l, kRoad);
  const CellState qt = detail::rarefaction_state(ql, u_l, kRoad);
  EXPECT_NEAR(qt.rho, ql.rho, 1e-12);
  EXPECT_NEAR(qt.y, ql.y, 1e-12);
}

TEST(ArzRiemann, InterfaceStateTendsToLeftStateAsVelocitiesMerge) {
  // Free flow: characteristic moves right, limit is q_l from both sides.
  const CellState ql = state_from_rho_u(0.1, 25.0, kRoad);
  for (double sgn : {-1.0, 1.0}) {
    for (double d : {1e-2, 1e-4, 1e-6}) {
      const CellState qr = state_from_rho_u(0.2, 25.0 + sgn * d, kRoad);
      const auto sol = solve_riemann(ql, qr, kRoad);
      EXPECT_NEAR(sol.q0.rho, ql.rho, 10 * d);
      EXPECT_NEAR(sol.q0.y, ql.y, 10 * d);
    }
  }
}

TEST(ArzRiemann, RejectsNonFiniteInput) {
  EXPECT_THROW(solve_riemann({NAN, 0.0}, {0.1, 0.0}, kRoad), DomainError);
}

TEST(ArzRiemannGradients, CaseZeroIsIdentity) {
  const CellState ql = state_from_rho_u(0.1, 20.0, kRoad);
  const CellState qr = state_from_rho_u(0.3, 20.0, kRoad);
  const auto sol = solve_riemann(ql, qr, kRoad);
  const auto g = riemann_gradients(sol, ql, qr, kRoad);
  EXPECT_EQ(g.d_q0_d_ql, Mat2::identity());
  EXPECT_EQ(g.d_q0_d_qr, Mat2::zero());
}

TEST(ArzRiemannGradients, RarefactionIgnoresRightState) {
  const CellState ql = state_from_rho_u(0.8, 1.0, kRoad);
  const CellState qr = state_from_rho_u(0.05, 29.0, kRoad);
  const auto sol = solve_riemann(ql, qr, kRoad);
  ASSERT_TRUE(sol.case_tag == RiemannCase::Case3Rarefaction || sol.case_tag == RiemannCase::Case2Rarefaction);
  EXPECT_EQ(riemann_gradients(sol, ql, qr, kRoad).d_q0_d_qr, Mat2::zero());
}

TEST(ArzRiemannGradients, VacuumReportsFlag) {
  const CellState qr = state_from_rho_u(0.3, 10.0, kRoad);
  const auto sol = solve_riemann({0.0, 0.0}, qr, kRoad);
  const auto g = riemann_gradients(sol, {0.0, 0.0}, qr, kRoad);
  EXPECT_TRUE(g.vacuum);
  EXPECT_EQ(g.d_q0_d_ql, Mat2::zero());
}

TEST(ArzRiemannGradients, ShockMovingLeftMatchesFiniteDifferences) {
  // The worked shock example with a slower right state so lambda_s < 0.
  const CellState ql{0.25, 0.1};
  const CellState qr = state_from_rho_u(0.5, 0.1, kUnit);
  const auto sol = solve_riemann(ql, qr, kUnit);
  ASSERT_EQ(sol.case_tag, RiemannCase::Case1Mid);
  ASSERT_LT(sol.lambda_s.value(), -1e-3);
  const auto g = riemann_gradients(sol, ql, qr, kUnit);
  const double h = 1e-6;
  const Mat2 fl = fd_jacobian([&](Vec2 x) { return solve_riemann(CellState::from(x), qr, kUnit).q0.vec(); },
                              ql.vec(), h);
  const Mat2 fr = fd_jacobian([&](Vec2 x) { return solve_riemann(ql, CellState::from(x), kUnit).q0.vec(); },
                              qr.vec(), h);
  EXPECT_LT(block_rel_error(g.d_q0_d_ql, fl), 1e-5);
  EXPECT_LT(block_rel_error(g.d_q0_d_qr, fr), 1e-5);
}

TEST(ArzRiemannGradients, SpeedLimitDerivativeMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  int checked = 0;
  for (int t = 0; t < 400 && checked < 100; ++t) {
    const CellState ql = difftraffic::testing::random_cell(rng, kRoad);
    const CellState qr = difftraffic::testing::random_cell(rng, kRoad);
    const auto sol = solve_riemann(ql, qr, kRoad);
    if (classification_margin(sol, ql, kRoad) < 1e-3) continue;
    const auto g = riemann_gradients(sol, ql, qr, kRoad);
    const double h = 1e-6;
    const Vec2 fd = difftraffic::testing::fd_derivative(
        [&](double u) { return solve_riemann(ql, qr, Model{u, 0.5}).q0.vec(); }, kRoad.u_max, h);
    EXPECT_LT(difftraffic::testing::vec_rel_error(g.d_q0_d_umax, fd), 1e-4) << to_string(sol.case_tag);
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(ArzRiemann, ClassificationCoversAllCases) {
  std::mt19937_64 rng(17);
  std::map<RiemannCase, int> seen;
  for (int t = 0; t < 20000; ++t) {
    const CellState ql = difftraffic::testing::random_cell(rng, kRoad, 0.0, 1.0);
    const CellState qr = difftraffic::testing::random_cell(rng, kRoad, 0.0, 1.0);
    const auto sol = solve_riemann(ql, qr, kRoad);
    ++seen[sol.case_tag];
    EXPECT_TRUE(std::isfinite(sol.q0.rho) && std::isfinite(sol.q0.y));
  }
  for (auto c : {RiemannCase::Case1Left, RiemannCase::Case1Mid, RiemannCase::Case2Left, RiemannCase::Case2Mid,
                 RiemannCase::Case2Rarefaction, RiemannCase::Case3Left, RiemannCase::Case3Rarefaction}) {
    EXPECT_GT(seen[c], 0) << to_string(c);
  }
}
