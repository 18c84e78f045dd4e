#pragma once

// ARZ constitutive relations, the exact interface Riemann solution and its
// analytical derivatives.
//
// State q = (rho, y), y = rho * (u - u_eq(rho)), u_eq(rho) = u_max (1 - rho^gamma).
// Derivatives are taken with respect to the conserved pair (rho, y) of the
// left and right states and with respect to u_max.

#include <cmath>
#include <optional>
#include <string>

#include "difftraffic/core.hpp"
#include "difftraffic/errors.hpp"
#include "difftraffic/linalg.hpp"

namespace difftraffic::arz {

/// Cells at or below this density use the vacuum convention: u = u_max, zero flux.
inline constexpr double kVacuumDensity = 1e-8;

struct Model {
  double u_max = 30.0;
  double gamma = 0.5;

  double pow_gamma(double x) const {
    return gamma == 0.5 ? std::sqrt(x) : std::pow(x, gamma);
  }
  double pow_inv_gamma(double x) const {
    return gamma == 0.5 ? x * x : std::pow(x, 1.0 / gamma);
  }
};

inline double u_eq(double rho, const Model& m) {
  if (rho < 0.0 || !std::isfinite(rho)) throw DomainError("u_eq: density must be finite and non-negative");
  return m.u_max * (1.0 - m.pow_gamma(rho));
}

/// d u_eq / d rho. Singular at rho = 0 for gamma < 1.
inline double u_eq_prime(double rho, const Model& m) {
  return -m.u_max * m.gamma * m.pow_gamma(rho) / rho;
}

struct Velocity {
  double u = 0.0;
  bool vacuum = false;
};

inline bool is_vacuum(const CellState& q) { return !(q.rho > kVacuumDensity); }

inline Velocity velocity_from_state(const CellState& q, const Model& m) {
  if (is_vacuum(q)) return {m.u_max, true};
  return {q.y / q.rho + m.u_max * (1.0 - m.pow_gamma(q.rho)), false};
}

/// Relative flow of a (rho, u) pair.
inline double relative_flow(double rho, double u, const Model& m) {
  if (rho <= 0.0) return 0.0;
  return rho * (u - u_eq(rho, m));
}

/// Partial derivatives of u = y / rho + u_eq(rho).
struct VelocityPartials {
  double d_rho = 0.0;
  double d_y = 0.0;
  double d_umax = 0.0;
};

inline VelocityPartials velocity_partials(const CellState& q, const Model& m) {
  if (is_vacuum(q)) return {};
  const double rg = m.pow_gamma(q.rho);
  return {-q.y / (q.rho * q.rho) - m.u_max * m.gamma * rg / q.rho, 1.0 / q.rho, 1.0 - rg};
}

/// Eigenvalues of the flux Jacobian: u - gamma u_max rho^gamma and u.
inline Vec2 characteristic_speeds(const CellState& q, const Model& m) {
  const auto vel = velocity_from_state(q, m);
  if (vel.vacuum) return {vel.u, vel.u};
  return {vel.u - m.gamma * m.u_max * m.pow_gamma(q.rho), vel.u};
}

inline Vec2 flux(const CellState& q, const Model& m) {
  const auto vel = velocity_from_state(q, m);
  if (vel.vacuum) return {0.0, 0.0};
  return {q.rho * vel.u, q.y * vel.u};
}

inline Mat2 flux_jacobian(const CellState& q, const Model& m) {
  if (is_vacuum(q)) throw DomainError("flux_jacobian: vacuum state is not differentiable");
  const double rho = q.rho;
  const double y = q.y;
  const double ueq = u_eq(rho, m);
  const double ueqp = u_eq_prime(rho, m);
  return {ueq + rho * ueqp, 1.0, y * ueqp - (y * y) / (rho * rho), 2.0 * y / rho + ueq};
}

/// d flux / d u_max at fixed conserved state.
inline Vec2 flux_umax_derivative(const CellState& q, const Model& m) {
  if (is_vacuum(q)) return {0.0, 0.0};
  const double du = 1.0 - m.pow_gamma(q.rho);
  return {q.rho * du, q.y * du};
}

enum class RiemannCase {
  Case0,             ///< u_l == u_r, q0 = q_l
  Case1Left,         ///< shock moving right, q0 = q_l
  Case1Mid,          ///< shock moving left, q0 = q_m
  Case2Left,         ///< q0 = q_l
  Case2Mid,          ///< q0 = q_m
  Case2Rarefaction,  ///< transonic rarefaction, q0 = q~(0)
  Case3Left,         ///< q0 = q_l (Case 5 shares this tag, see right_vacuum)
  Case3Rarefaction,  ///< q0 = q~(0) (Case 5 shares this tag, see right_vacuum)
  Case4Vacuum,       ///< empty left state, q0 = (0, 0)
};

inline const char* to_string(RiemannCase c) {
  switch (c) {
    case RiemannCase::Case0: return "Case0";
    case RiemannCase::Case1Left: return "Case1Left";
    case RiemannCase::Case1Mid: return "Case1Mid";
    case RiemannCase::Case2Left: return "Case2Left";
    case RiemannCase::Case2Mid: return "Case2Mid";
    case RiemannCase::Case2Rarefaction: return "Case2Rarefaction";
    case RiemannCase::Case3Left: return "Case3Left";
    case RiemannCase::Case3Rarefaction: return "Case3Rarefaction";
    case RiemannCase::Case4Vacuum: return "Case4Vacuum";
  }
  return "?";
}

struct RiemannSolution {
  CellState q0;
  RiemannCase case_tag = RiemannCase::Case0;
  /// Empty right state (Case 5): the Case 3 branches apply.
  bool right_vacuum = false;
  double u_l = 0.0;
  double u_r = 0.0;
  std::optional<CellState> q_m;
  std::optional<CellState> q_tilde0;
  std::optional<double> lambda_s;
  std::optional<double> lambda_0l;
  std::optional<double> lambda_0m;
};

namespace detail {

inline CellState middle_state(const CellState& ql, double u_l, double u_r, const Model& m) {
  const double s = m.pow_gamma(ql.rho) + (u_l - u_r) / m.u_max;
  const double rho_m = s > 0.0 ? m.pow_inv_gamma(s) : 0.0;
  return {rho_m, relative_flow(rho_m, u_r, m)};
}

inline CellState rarefaction_state(const CellState& ql, double u_l, const Model& m) {
  const double w = u_l + m.u_max * m.pow_gamma(ql.rho);
  const double r = w / ((m.gamma + 1.0) * m.u_max);
  const double rho_t = r > 0.0 ? m.pow_inv_gamma(r) : 0.0;
  const double u_t = m.gamma / (m.gamma + 1.0) * w;
  return {rho_t, relative_flow(rho_t, u_t, m)};
}

inline double lambda_0l(const CellState& ql, double u_l, const Model& m) {
  return u_l - m.u_max * m.gamma * m.pow_gamma(ql.rho);
}

}  // namespace detail

/// Exact solution of the ARZ Riemann problem at x/t = 0.
///
/// Classification order: empty left state (Case 4), empty right state
/// (Case 5, resolved with the Case 3 branches), u_l == u_r (Case 0),
/// u_l > u_r (Case 1), u_l <= u_r - u_max rho_l^gamma (Case 3), else Case 2.
inline RiemannSolution solve_riemann(const CellState& ql, const CellState& qr, const Model& m) {
  if (!std::isfinite(ql.rho) || !std::isfinite(ql.y) || !std::isfinite(qr.rho) || !std::isfinite(qr.y)) {
    throw DomainError("solve_riemann: non-finite input state");
  }
  RiemannSolution sol;
  const auto vl = velocity_from_state(ql, m);
  const auto vr = velocity_from_state(qr, m);
  sol.u_l = vl.u;
  sol.u_r = vr.u;

  if (vl.vacuum) {
    sol.case_tag = RiemannCase::Case4Vacuum;
    sol.q0 = {0.0, 0.0};
    return sol;
  }

  const double u_l = vl.u;
  const double u_r = vr.u;
  const double l0l = detail::lambda_0l(ql, u_l, m);
  sol.lambda_0l = l0l;

  auto rarefaction_or_left = [&](RiemannCase left_tag, RiemannCase rare_tag) {
    if (l0l >= 0.0) {
      sol.case_tag = left_tag;
      sol.q0 = ql;
    } else {
      sol.q_tilde0 = detail::rarefaction_state(ql, u_l, m);
      sol.case_tag = rare_tag;
      sol.q0 = *sol.q_tilde0;
    }
  };

  if (vr.vacuum) {
    sol.right_vacuum = true;
    rarefaction_or_left(RiemannCase::Case3Left, RiemannCase::Case3Rarefaction);
    return sol;
  }

  if (u_l == u_r) {
    sol.case_tag = RiemannCase::Case0;
    sol.q0 = ql;
    return sol;
  }

  if (u_l > u_r) {
    const CellState qm = detail::middle_state(ql, u_l, u_r, m);
    sol.q_m = qm;
    const double ls = (qm.rho * u_r - ql.rho * u_l) / (qm.rho - ql.rho);
    sol.lambda_s = ls;
    if (ls >= 0.0) {
      sol.case_tag = RiemannCase::Case1Left;
      sol.q0 = ql;
    } else {
      sol.case_tag = RiemannCase::Case1Mid;
      sol.q0 = qm;
    }
    return sol;
  }

  if (u_l <= u_r - m.u_max * m.pow_gamma(ql.rho)) {
    rarefaction_or_left(RiemannCase::Case3Left, RiemannCase::Case3Rarefaction);
    return sol;
  }

  const CellState qm = detail::middle_state(ql, u_l, u_r, m);
  sol.q_m = qm;
  const double l0m = u_r - m.u_max * m.gamma * m.pow_gamma(ql.rho) + m.gamma * (u_r - u_l);
  sol.lambda_0m = l0m;
  if (l0l >= 0.0) {
    sol.case_tag = RiemannCase::Case2Left;
    sol.q0 = ql;
  } else if (l0m <= 0.0) {
    sol.case_tag = RiemannCase::Case2Mid;
    sol.q0 = qm;
  } else {
    sol.q_tilde0 = detail::rarefaction_state(ql, u_l, m);
    sol.case_tag = RiemannCase::Case2Rarefaction;
    sol.q0 = *sol.q_tilde0;
  }
  return sol;
}

/// Distance of the classifying quantities from the nearest switch that makes
/// the interface state non-smooth (shock at lambda_s = 0, sonic points, the
/// Case 2/3 boundary). Vacuum interfaces report 0.
inline double classification_margin(const RiemannSolution& sol, const CellState& ql, const Model& m) {
  if (sol.case_tag == RiemannCase::Case4Vacuum) return 0.0;
  const double l0l = sol.lambda_0l.value_or(0.0);
  switch (sol.case_tag) {
    case RiemannCase::Case0:
      return std::fabs(l0l);
    case RiemannCase::Case1Left:
    case RiemannCase::Case1Mid:
      return std::fabs(sol.lambda_s.value_or(0.0));
    case RiemannCase::Case2Left:
    case RiemannCase::Case2Mid:
    case RiemannCase::Case2Rarefaction: {
      const double edge = std::fabs(sol.u_l - (sol.u_r - m.u_max * m.pow_gamma(ql.rho)));
      return std::fmin(std::fmin(std::fabs(l0l), std::fabs(sol.lambda_0m.value_or(0.0))), edge);
    }
    case RiemannCase::Case3Left:
    case RiemannCase::Case3Rarefaction: {
      if (sol.right_vacuum) return std::fabs(l0l);
      const double edge = std::fabs(sol.u_l - (sol.u_r - m.u_max * m.pow_gamma(ql.rho)));
      return std::fmin(std::fabs(l0l), edge);
    }
    case RiemannCase::Case4Vacuum:
      break;
  }
  return 0.0;
}

struct RiemannGradients {
  Mat2 d_q0_d_ql;
  Mat2 d_q0_d_qr;
  Vec2 d_q0_d_umax;
  bool vacuum = false;
};

namespace detail {

/// Derivatives of q_m. Columns: d/d rho, d/d y.
inline RiemannGradients middle_state_gradients(const CellState& ql, const CellState& qr, double u_l,
                                               double u_r, const Model& m) {
  const auto pl = velocity_partials(ql, m);
  const auto pr = velocity_partials(qr, m);
  const double rgl = m.pow_gamma(ql.rho);
  const double s = rgl + (u_l - u_r) / m.u_max;
  const CellState qm = middle_state(ql, u_l, u_r, m);
  const double rho_m = qm.rho;
  // d rho_m / d s = (1/gamma) s^((1-gamma)/gamma) = rho_m / (gamma s)
  const double drho_ds = s > 0.0 ? rho_m / (m.gamma * s) : 0.0;

  const double ds_drho_l = m.gamma * rgl / ql.rho + pl.d_rho / m.u_max;
  const double ds_dy_l = pl.d_y / m.u_max;
  const double ds_drho_r = -pr.d_rho / m.u_max;
  const double ds_dy_r = -pr.d_y / m.u_max;
  const double ds_dU = (pl.d_umax - pr.d_umax) / m.u_max - (u_l - u_r) / (m.u_max * m.u_max);

  const double rgm = rho_m > 0.0 ? m.pow_gamma(rho_m) : 0.0;
  const double ueq_m = m.u_max * (1.0 - rgm);
  const double ueqp_m = rho_m > 0.0 ? -m.u_max * m.gamma * rgm / rho_m : 0.0;
  const double slope = u_r - ueq_m - rho_m * ueqp_m;  // d y_m / d rho_m at fixed u_m

  RiemannGradients g;
  const double drl = drho_ds * ds_drho_l;
  const double dyl = drho_ds * ds_dy_l;
  g.d_q0_d_ql = {drl, dyl, slope * drl, slope * dyl};

  const double drr = drho_ds * ds_drho_r;
  const double dyr = drho_ds * ds_dy_r;
  g.d_q0_d_qr = {drr, dyr, slope * drr + rho_m * pr.d_rho, slope * dyr + rho_m * pr.d_y};

  const double drU = drho_ds * ds_dU;
  g.d_q0_d_umax = {drU, slope * drU + rho_m * (pr.d_umax - (1.0 - rgm))};
  return g;
}

/// Derivatives of q~(0). The right state does not enter.
inline RiemannGradients rarefaction_gradients(const CellState& ql, double u_l, const Model& m) {
  const auto pl = velocity_partials(ql, m);
  const double rgl = m.pow_gamma(ql.rho);
  const double w = u_l + m.u_max * rgl;
  const double c = (m.gamma + 1.0) * m.u_max;
  const double r = w / c;
  const CellState qt = rarefaction_state(ql, u_l, m);
  const double rho_t = qt.rho;
  const double u_t = m.gamma / (m.gamma + 1.0) * w;
  const double drho_dr = r > 0.0 ? rho_t / (m.gamma * r) : 0.0;

  const double dw_drho = pl.d_rho + m.u_max * m.gamma * rgl / ql.rho;
  const double dw_dy = pl.d_y;
  const double dw_dU = 1.0;  // d u_l / dU + rho_l^gamma
  const double dr_dU = dw_dU / c - w / (c * m.u_max);

  const double rgt = rho_t > 0.0 ? m.pow_gamma(rho_t) : 0.0;
  const double ueq_t = m.u_max * (1.0 - rgt);
  const double ueqp_t = rho_t > 0.0 ? -m.u_max * m.gamma * rgt / rho_t : 0.0;
  const double slope = u_t - ueq_t - rho_t * ueqp_t;
  const double du_dw = m.gamma / (m.gamma + 1.0);

  RiemannGradients g;
  const double drl = drho_dr * dw_drho / c;
  const double dyl = drho_dr * dw_dy / c;
  g.d_q0_d_ql = {drl, dyl, slope * drl + rho_t * du_dw * dw_drho, slope * dyl + rho_t * du_dw * dw_dy};
  g.d_q0_d_qr = Mat2::zero();
  const double drU = drho_dr * dr_dU;
  g.d_q0_d_umax = {drU, slope * drU + rho_t * (du_dw * dw_dU - (1.0 - rgt))};
  return g;
}

inline void clip(Mat2& a, double limit) {
  for (auto& x : a.m) x = std::fmax(-limit, std::fmin(limit, x));
}

}  // namespace detail

/// Derivatives of the interface state q0 for the branch selected by `sol`.
///
/// Case 0 with a left-moving 1-characteristic (lambda_0l < 0) takes the q_m
/// derivatives: q_m coincides with q_l there, and q_m is the branch selected
/// on both sides of u_l = u_r.
inline RiemannGradients riemann_gradients(const RiemannSolution& sol, const CellState& ql, const CellState& qr,
                                          const Model& m, std::optional<double> grad_clip = std::nullopt) {
  RiemannGradients g;
  switch (sol.case_tag) {
    case RiemannCase::Case4Vacuum:
      g.vacuum = true;
      return g;
    case RiemannCase::Case0:
      if (sol.lambda_0l.value_or(0.0) >= 0.0) {
        g.d_q0_d_ql = Mat2::identity();
      } else {
        g = detail::middle_state_gradients(ql, qr, sol.u_l, sol.u_r, m);
      }
      break;
    case RiemannCase::Case1Left:
    case RiemannCase::Case2Left:
    case RiemannCase::Case3Left:
      g.d_q0_d_ql = Mat2::identity();
      break;
    case RiemannCase::Case1Mid:
    case RiemannCase::Case2Mid:
      g = detail::middle_state_gradients(ql, qr, sol.u_l, sol.u_r, m);
      break;
    case RiemannCase::Case2Rarefaction:
    case RiemannCase::Case3Rarefaction:
      g = detail::rarefaction_gradients(ql, sol.u_l, m);
      break;
  }
  if (grad_clip) {
    detail::clip(g.d_q0_d_ql, *grad_clip);
    detail::clip(g.d_q0_d_qr, *grad_clip);
  }
  return g;
}

}  // namespace difftraffic::arz
