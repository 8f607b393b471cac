#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include "tclmfg/csv.hpp"
#include "tclmfg/grid.hpp"
#include "tclmfg/model.hpp"
#include "tclmfg/riccati.hpp"

namespace tclmfg {

/// (1/N) sum_i y_i.
inline double empirical_m_on(std::span<const AgentState> agents) {
  if (agents.empty()) throw ConfigError(Stage::kMeanfield, "empirical_m_on of an empty population");
  double s = 0.0;
  for (const auto& a : agents) s += a.y;
  return s / static_cast<double>(agents.size());
}

/// Population mean path (xbar, ybar) on the Riccati grid.
struct MacroPath {
  std::vector<double> grid;
  std::vector<Vec2> X;
};

/// Closed-loop matrix and affine term of the mean dynamics at grid index k:
/// (A + M P_k) and M Psi_k + C, with M the variant's effective gain matrix.
/// Psi is state independent because A is frozen, so its population average
/// is Psi itself.
inline std::pair<Mat2, Vec2> closed_loop_at(const SystemMatrices& m, Variant variant,
                                            const Mat2& P, const Vec2& Psi, double x_lin) {
  const Mat2 M = effective_gain_matrix(m, variant);
  return {m.A(x_lin) + M * P, M * Psi + m.C};
}

/// Forward Euler on the Riccati grid, starting from xbar0.
inline MacroPath propagate_macroscopic(const RiccatiTrajectory& riccati, const ModelParams& params,
                                       const Vec2& xbar0, Variant variant) {
  const SystemMatrices m = assemble(params);
  MacroPath path{riccati.grid, {}};
  path.X.reserve(riccati.size());
  Vec2 X = xbar0;
  path.X.push_back(X);
  for (std::size_t k = 0; k + 1 < riccati.size(); ++k) {
    const auto [M, b] = closed_loop_at(m, variant, riccati.P[k], riccati.Psi[k], riccati.x_lin);
    X = X + (riccati.grid[k + 1] - riccati.grid[k]) * (M * X + b);
    path.X.push_back(X);
  }
  return path;
}

struct FixedPointOptions {
  double damping = 0.5;
  double tol = 1e-8;
  std::size_t max_iter = 200;
  double x_lin = 0.0;
  double eps_y = 1e-6;
  Integrator integrator = Integrator::kRk4;
  RobustPsiCoupling coupling = RobustPsiCoupling::kPMPsi;
};

struct EquilibriumSolution {
  ErrorTrajectory e_traj;
  RiccatiTrajectory riccati;
  MacroPath xbar;
  std::size_t iterations = 0;
  double final_gap = 0.0;
  std::vector<double> gap_history;
};

/// One pass of the coupling map: backward solve under e, forward mean
/// propagation, and the induced error e_hat(t) = m_on(t) - m_on_bar with
/// m_on read from ybar (clamped to [0, 1]).
struct Sweep {
  RiccatiTrajectory riccati;
  MacroPath xbar;
  ErrorTrajectory e_hat;
};

inline Sweep mean_field_sweep(const ModelParams& params, Variant variant, const Vec2& m0_mean,
                              const ErrorTrajectory& e, const Mat2& phi,
                              const FixedPointOptions& opt) {
  BackwardOptions bo;
  bo.integrator = opt.integrator;
  bo.coupling = opt.coupling;
  bo.phi = phi;
  bo.eps_y = opt.eps_y;
  const double T = e.grid.back();
  const std::size_t K = e.grid.size() - 1;
  Sweep s{solve_backward(params, variant, e, T, K, opt.x_lin, bo), {}, {}};
  s.xbar = propagate_macroscopic(s.riccati, params, m0_mean, variant);
  s.e_hat.grid = e.grid;
  s.e_hat.e.resize(e.grid.size());
  for (std::size_t k = 0; k < e.grid.size(); ++k)
    s.e_hat.e[k] = std::clamp(s.xbar.X[k](1), 0.0, 1.0) - params.m_on_bar;
  return s;
}

inline Mat2 terminal_weight(const ModelParams& params, Variant variant, const FixedPointOptions& opt) {
  return params.phi ? *params.phi : solve_are(params, variant, opt.x_lin, opt.eps_y);
}

/// Damped Picard iteration on e(.) starting from e = 0. Throws
/// NonConvergence carrying the gap history when max_iter is exhausted.
inline EquilibriumSolution fixed_point(const ModelParams& params, Variant variant,
                                       const Vec2& m0_mean, double T, std::size_t K,
                                       const FixedPointOptions& opt = {}) {
  if (!(opt.damping > 0 && opt.damping <= 1))
    throw ConfigError(Stage::kMeanfield, "damping must lie in (0, 1]");
  if (!(opt.tol > 0)) throw ConfigError(Stage::kMeanfield, "tol must be positive");
  const Mat2 phi = terminal_weight(params, variant, opt);
  ErrorTrajectory e = ErrorTrajectory::zeros(uniform_grid(T, K));

  EquilibriumSolution sol;
  if (params.S == 0.0) {
    // L does not depend on e: the map is constant and one sweep is exact.
    Sweep s = mean_field_sweep(params, variant, m0_mean, e, phi, opt);
    sol.e_traj = s.e_hat;
    s.riccati.e = sol.e_traj;
    sol.riccati = std::move(s.riccati);
    sol.xbar = std::move(s.xbar);
    sol.iterations = 1;
    sol.final_gap = 0.0;
    sol.gap_history = {0.0};
    return sol;
  }

  for (std::size_t it = 1; it <= opt.max_iter; ++it) {
    const Sweep s = mean_field_sweep(params, variant, m0_mean, e, phi, opt);
    ErrorTrajectory next = e;
    for (std::size_t k = 0; k < next.e.size(); ++k)
      next.e[k] = (1.0 - opt.damping) * e.e[k] + opt.damping * s.e_hat.e[k];
    const double gap = next.sup_distance(e);
    e = std::move(next);
    sol.gap_history.push_back(gap);
    if (gap < opt.tol) {
      Sweep fin = mean_field_sweep(params, variant, m0_mean, e, phi, opt);
      sol.e_traj = e;
      sol.riccati = std::move(fin.riccati);
      sol.xbar = std::move(fin.xbar);
      sol.iterations = it;
      sol.final_gap = gap;
      return sol;
    }
  }
  throw NonConvergence(sol.gap_history);
}

/// Columns: t, e, xbar, ybar, P11, P12, P22, Psi1, Psi2, chi.
inline void write_csv(std::ostream& os, const EquilibriumSolution& sol) {
  os << "t,e,xbar,ybar,P11,P12,P22,Psi1,Psi2,chi\n";
  const auto& r = sol.riccati;
  for (std::size_t k = 0; k < r.size(); ++k) {
    const Mat2& P = r.P[k];
    csv::row(os, {r.grid[k], sol.e_traj.e[k], sol.xbar.X[k](0), sol.xbar.X[k](1), P(0, 0), P(0, 1),
                  P(1, 1), r.Psi[k](0), r.Psi[k](1), r.chi[k]});
  }
}

}  // namespace tclmfg
