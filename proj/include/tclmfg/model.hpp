#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "tclmfg/types.hpp"

namespace tclmfg {

/// Physical and cost scalars of the TCL game. Defaults reproduce the
/// reference parameter table (alpha = beta = 1, x_on = -10, x_off = 10,
/// r_on = r_off = 10, q = 1); the remaining values are not tabulated and
/// are chosen so that every variant is well posed.
struct ModelParams {
  double alpha = 1.0;   // cooling rate while on
  double beta = 1.0;    // heating rate while off
  double x_on = -10.0;  // cold limit
  double x_off = 10.0;  // warm limit
  double q = 1.0;
  double r_on = 10.0;
  double r_off = 10.0;
  double S = 1.0;  // price of the frequency error
  double W = 0.0;  // power price
  double gamma = 3.0;
  // Brownian coefficients. Interpreted as constant intensities by
  // kStochasticConst and as multipliers of x / y by kStochasticStateDep.
  double sigma11 = 0.5;
  double sigma22 = 0.05;
  double d11 = 0.5, d12 = 0.1, d21 = 0.1, d22 = 0.5;
  double m_on_bar = 0.5;
  // Terminal weight of g(X) = 1/2 X^T phi X. Empty means "use the
  // stabilizing algebraic Riccati solution".
  std::optional<Mat2> phi;

  bool operator==(const ModelParams&) const = default;
};

struct AgentState {
  double x = 0.0;  // temperature
  double y = 0.0;  // probability of being on

  Vec2 vec() const { return {x, y}; }
  static AgentState from(const Vec2& v) { return {v(0), v(1)}; }
  bool operator==(const AgentState&) const = default;
};

struct ControlInput {
  double u_on = 0.0;
  double u_off = 0.0;

  Vec2 vec() const { return {u_on, u_off}; }
};

/// Returns params unchanged when every invariant holds, otherwise throws a
/// ConfigError naming the first violation.
inline const ModelParams& validate(const ModelParams& p) {
  auto fail = [](const std::string& msg) { throw ConfigError(Stage::kAssemble, msg); };
  const double all[] = {p.alpha, p.beta, p.x_on, p.x_off, p.q, p.r_on, p.r_off, p.S, p.W,
                        p.gamma, p.sigma11, p.sigma22, p.d11, p.d12, p.d21, p.d22, p.m_on_bar};
  for (double v : all)
    if (!std::isfinite(v)) fail("parameters must be finite");
  if (!(p.x_on < p.x_off)) fail("x_on < x_off violated");
  if (!(p.alpha > 0)) fail("alpha must be positive");
  if (!(p.beta > 0)) fail("beta must be positive");
  if (!(p.r_on > 0)) fail("r_on must be positive");
  if (!(p.r_off > 0)) fail("r_off must be positive");
  if (!(p.gamma > 0)) fail("gamma must be positive");
  if (p.q < 0) fail("q must be non-negative");
  if (p.S < 0) fail("S must be non-negative");
  if (p.W < 0) fail("W must be non-negative");
  if (p.sigma11 < 0 || p.sigma22 < 0) fail("sigma coefficients must be non-negative");
  if (p.m_on_bar < 0 || p.m_on_bar > 1) fail("m_on_bar must lie in [0, 1]");
  if (p.phi) {
    const Mat2& phi = *p.phi;
    if (!phi.allFinite()) fail("phi must be finite");
    if (std::abs(phi(0, 1) - phi(1, 0)) > 1e-12 * (1.0 + phi.cwiseAbs().maxCoeff()))
      fail("phi must be symmetric");
    // 2x2 symmetric PSD <=> non-negative diagonal and determinant.
    if (phi(0, 0) < 0 || phi(1, 1) < 0 || phi.determinant() < -1e-12 * (1.0 + phi.squaredNorm()))
      fail("phi must be positive semidefinite");
  }
  return p;
}

/// k(x) = x (beta - alpha) + (alpha x_on - beta x_off): the state-dependent
/// entry of A(x).
inline double k_coefficient(const ModelParams& p, double x) {
  return x * (p.beta - p.alpha) + (p.alpha * p.x_on - p.beta * p.x_off);
}

/// Drift (f, g) of the on/off mixture: f mixes the two exponential branches
/// by the on-probability y, g = u_on - u_off.
inline Vec2 drift(const ModelParams& p, const AgentState& s, const ControlInput& u) {
  const double on_branch = -p.alpha * (s.x - p.x_on);
  const double off_branch = -p.beta * (s.x - p.x_off);
  return {s.y * on_branch + (1.0 - s.y) * off_branch, u.u_on - u.u_off};
}

/// Same f written in the affine form -beta x + k(x) y + beta x_off.
inline double drift_affine_f(const ModelParams& p, const AgentState& s) {
  return -p.beta * s.x + k_coefficient(p, s.x) * s.y + p.beta * p.x_off;
}

inline double running_cost(const ModelParams& p, const AgentState& s, const ControlInput& u,
                           double e) {
  return 0.5 * (p.q * s.x * s.x + p.r_on * u.u_on * u.u_on + p.r_off * u.u_off * u.u_off) +
         s.y * (p.S * e + p.W);
}

/// The LQ data of the game. A depends on the temperature through k(x) and
/// is exposed as a function.
struct SystemMatrices {
  Mat2 Q;
  Mat2 R;
  Mat2 B;
  Vec2 C;
  Mat2 D;
  double beta = 1.0;
  double k_slope = 0.0;      // beta - alpha
  double k_intercept = 0.0;  // alpha x_on - beta x_off
  double S = 0.0;
  double W = 0.0;
  double gamma = 1.0;
  double sigma11 = 0.0;
  double sigma22 = 0.0;

  Mat2 A(double x) const {
    Mat2 a;
    a << -beta, x * k_slope + k_intercept, 0.0, 0.0;
    return a;
  }

  Mat2 R_inv() const { return R.inverse(); }

  /// B R^-1 B^T.
  Mat2 control_gain() const { return B * R.inverse() * B.transpose(); }

  Vec2 L(double e) const { return {0.0, S * e + W}; }

  Mat2 Sigma_const() const { return Vec2(sigma11, sigma22).asDiagonal(); }

  /// diag(sigma11 x, sigma22 y): geometric noise intensity at X.
  Mat2 Sigma_state(const Vec2& X) const {
    return Vec2(sigma11 * X(0), sigma22 * X(1)).asDiagonal();
  }
};

inline SystemMatrices assemble(const ModelParams& p) {
  validate(p);
  SystemMatrices m;
  m.Q << p.q, 0.0, 0.0, 0.0;
  m.R << p.r_on, 0.0, 0.0, p.r_off;
  m.B << 0.0, 0.0, 1.0, -1.0;
  m.C << p.beta * p.x_off, 0.0;
  m.D << p.d11, p.d12, p.d21, p.d22;
  m.beta = p.beta;
  m.k_slope = p.beta - p.alpha;
  m.k_intercept = p.alpha * p.x_on - p.beta * p.x_off;
  m.S = p.S;
  m.W = p.W;
  m.gamma = p.gamma;
  m.sigma11 = p.sigma11;
  m.sigma22 = p.sigma22;
  return m;
}

/// 1/2 X^T Q X + 1/2 u^T R u + L(e)^T X.
inline double running_cost(const SystemMatrices& m, const Vec2& X, const Vec2& u, double e) {
  return 0.5 * X.dot(m.Q * X) + 0.5 * u.dot(m.R * u) + m.L(e).dot(X);
}

/// Projection onto the closed feasible box [x_on, x_off] x [0, 1].
inline AgentState clamp_feasible(const ModelParams& p, AgentState s) {
  s.x = std::min(std::max(s.x, p.x_on), p.x_off);
  s.y = std::min(std::max(s.y, 0.0), 1.0);
  return s;
}

}  // namespace tclmfg
