#pragma once

// Finite-difference oracles and random generators shared by the unit and
// acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "difftraffic/arz.hpp"
#include "difftraffic/core.hpp"
#include "difftraffic/idm.hpp"
#include "difftraffic/linalg.hpp"

namespace difftraffic::testing {

/// Central-difference Jacobian of a map R^2 -> R^2.
template <class F>
Mat2 fd_jacobian(F&& f, const Vec2& x, double h) {
  Vec2 xp = x, xm = x;
  xp[0] += h;
  xm[0] -= h;
  const Vec2 c0 = (1.0 / (2.0 * h)) * (f(xp) - f(xm));
  xp = x;
  xm = x;
  xp[1] += h;
  xm[1] -= h;
  const Vec2 c1 = (1.0 / (2.0 * h)) * (f(xp) - f(xm));
  return Mat2::from_columns(c0, c1);
}

template <class F>
Vec2 fd_derivative(F&& f, double x, double h) {
  return (1.0 / (2.0 * h)) * (f(x + h) - f(x - h));
}

/// Max-abs error of a block relative to the analytical block's magnitude.
inline double block_rel_error(const Mat2& analytic, const Mat2& fd) {
  return (analytic - fd).max_abs() / std::fmax(analytic.max_abs(), 1e-6);
}

inline double vec_rel_error(const Vec2& analytic, const Vec2& fd) {
  return (analytic - fd).max_abs() / std::fmax(analytic.max_abs(), 1e-6);
}

inline CellState state_from_rho_u(double rho, double u, const arz::Model& m) {
  return {rho, arz::relative_flow(rho, u, m)};
}

/// Random admissible cell: rho in [lo, hi], 0 <= u <= u_max.
inline CellState random_cell(std::mt19937_64& rng, const arz::Model& m, double lo = 0.05, double hi = 0.95) {
  std::uniform_real_distribution<double> rd(lo, hi), ud(0.0, 1.0);
  const double rho = rd(rng);
  return state_from_rho_u(rho, ud(rng) * m.u_max, m);
}

/// Random state with u <= u_eq(rho), the region where the density stays in [0, 1].
inline CellState random_subequilibrium_cell(std::mt19937_64& rng, const arz::Model& m, double lo, double hi) {
  std::uniform_real_distribution<double> rd(lo, hi), ud(0.0, 1.0);
  const double rho = rd(rng);
  return state_from_rho_u(rho, ud(rng) * arz::u_eq(rho, m), m);
}

inline IdmParams random_idm_params(std::mt19937_64& rng) {
  auto u = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  IdmParams p;
  p.s_min = u(1.5, 3.0);
  p.t_pref = u(0.8, 2.0);
  p.a_max = u(0.7, 2.0);
  p.a_pref = u(1.0, 3.0);
  p.v_targ = u(20.0, 35.0);
  p.length = u(4.0, 6.0);
  return p;
}

/// Random platoon with positive gaps; vehicle 0 leads.
inline MicroLaneState random_platoon(std::mt19937_64& rng, std::size_t n, double lane_length = 1e6) {
  auto u = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  MicroLaneState lane;
  lane.length = lane_length;
  double p = u(100.0, 200.0);
  for (std::size_t i = 0; i < n; ++i) {
    VehicleState v;
    v.id = i;
    v.params = random_idm_params(rng);
    v.p = p;
    v.v = u(1.0, 30.0);
    lane.vehicles.push_back(v);
    p -= v.params.length + u(8.0, 40.0);
  }
  return lane;
}

/// Brute-force best reward of a pace car and one follower over every
/// schedule drawn from `levels` (one level per frame). Schedules that end
/// any frame with a non-positive gap are excluded.
struct GridSearchResult {
  double reward = -std::numeric_limits<double>::infinity();
  std::vector<double> schedule;
  std::size_t feasible = 0;
};

inline GridSearchResult pace_car_grid_search(const VehicleState& lead, const VehicleState& follower, double dt,
                                             const std::vector<double>& levels, const std::vector<double>& v_targ,
                                             double c_max) {
  struct Car {
    double p, v;
  };
  const IdmParams& f = follower.params;
  auto follower_accel = [&](Car h, Car e) {
    const double gap = h.p - e.p - lead.params.length;
    const double s = f.s_min + e.v * f.t_pref + e.v * (e.v - h.v) / (2.0 * std::sqrt(f.a_max * f.a_pref));
    const double r = e.v / f.v_targ;
    return f.a_max * (1.0 - r * r * r * r - (s / gap) * (s / gap));
  };
  GridSearchResult best;
  std::vector<double> schedule(v_targ.size());
  auto dfs = [&](auto&& self, std::size_t n, Car h, Car e, double reward) -> void {
    if (n == v_targ.size()) {
      ++best.feasible;
      if (reward > best.reward) {
        best.reward = reward;
        best.schedule = schedule;
      }
      return;
    }
    const double ae = follower_accel(h, e);
    for (double a : levels) {
      schedule[n] = a;
      const Car h2{h.p + h.v * dt, std::max(0.0, h.v + a * dt)};
      const Car e2{e.p + e.v * dt, std::max(0.0, e.v + ae * dt)};
      if (!(h2.p - e2.p - lead.params.length > 0.0)) continue;
      const double d = v_targ[n] - e2.v;
      self(self, n + 1, h2, e2, reward + c_max - d * d);
    }
  };
  dfs(dfs, 0, Car{lead.p, lead.v}, Car{follower.p, follower.v}, 0.0);
  return best;
}

}  // namespace difftraffic::testing
