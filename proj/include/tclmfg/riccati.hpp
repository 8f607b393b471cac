#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "tclmfg/csv.hpp"
#include "tclmfg/grid.hpp"
#include "tclmfg/model.hpp"
#include "tclmfg/types.hpp"

namespace tclmfg {

enum class Integrator { kRk4, kEuler };

/// How the affine coefficient couples to the effective gain matrix M in the
/// worst-case variant. kPMPsi is P M Psi, the pattern of the noise-free
/// system and the one the HJI identity produces. kLiteralMPsi is M Psi
/// without the left factor P; it exists so the two readings can be compared.
enum class RobustPsiCoupling { kPMPsi, kLiteralMPsi };

/// M = -B R^-1 B^T, plus gamma^-2 D D^T for the worst-case variant.
inline Mat2 effective_gain_matrix(const SystemMatrices& m, Variant v) {
  Mat2 M = -m.control_gain();
  if (v == Variant::kRobust) M += m.D * m.D.transpose() / (m.gamma * m.gamma);
  return M;
}

inline Mat2 symmetrized(const Mat2& P) { return 0.5 * (P + P.transpose()); }

// ---------------------------------------------------------------------------
// Algebraic Riccati equation

/// Solves A^T X + X A + Qr = 0 through its Kronecker form.
inline Mat2 solve_lyapunov(const Mat2& A, const Mat2& Qr) {
  const Mat2 At = A.transpose();
  const Mat2 I = Mat2::Identity();
  Mat4 K;
  // vec(At X) = (I kron At) vec X, vec(X A) = (A^T kron I) vec X (column-major).
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      K.block<2, 2>(2 * i, 2 * j) = I(i, j) * At + At(i, j) * I;
  const Eigen::Vector4d rhs = -Eigen::Map<const Eigen::Vector4d>(Qr.data());
  Eigen::FullPivLU<Mat4> lu(K);
  if (!lu.isInvertible()) throw NumericalError(Stage::kRiccati, "singular Lyapunov operator");
  const Eigen::Vector4d x = lu.solve(rhs);
  return Eigen::Map<const Mat2>(x.data());
}

inline Mat2 care_residual(const Mat2& P, const Mat2& A, const Mat2& S, const Mat2& Q) {
  return P * A + A.transpose() * P - P * S * P + Q;
}

inline double max_real_eigenvalue(const Mat2& M) {
  return Eigen::EigenSolver<Mat2>(M, false).eigenvalues().real().maxCoeff();
}

/// Stabilizing solution of P A + A^T P - P S P + Q = 0.
///
/// The stable invariant subspace of the Hamiltonian [[A, -S], [-Q, -A^T]]
/// is extracted through the matrix sign function, P = U2 U1^-1 is formed
/// from a basis of that subspace and then polished by Newton-Kleinman
/// steps. The result is checked (residual, symmetry, Hurwitz closed loop
/// A - S P) before it is returned.
inline Mat2 solve_care(const Mat2& A, const Mat2& S, const Mat2& Q) {
  Mat4 H;
  H << A, -S, -Q, -A.transpose();
  const double scale = 1.0 + H.cwiseAbs().maxCoeff();

  const auto eig = Eigen::EigenSolver<Mat4>(H, false).eigenvalues();
  for (int i = 0; i < 4; ++i)
    if (std::abs(eig(i).real()) <= 1e-10 * scale)
      throw NoStabilizingSolution("Hamiltonian matrix has eigenvalues on the imaginary axis");

  Mat4 Z = H;
  bool converged = false;
  for (int it = 0; it < 100; ++it) {
    const double det = std::abs(Z.determinant());
    if (!(det > 0) || !std::isfinite(det))
      throw NoStabilizingSolution("matrix sign iteration broke down");
    Z *= std::pow(det, -0.25);
    const Mat4 next = 0.5 * (Z + Z.inverse());
    const double change = (next - Z).norm();
    Z = next;
    if (change <= 1e-13 * Z.norm()) {
      converged = true;
      break;
    }
  }
  if (!converged) throw NoStabilizingSolution("matrix sign iteration did not converge");

  // (I - sign(H)) / 2 projects onto the stable subspace.
  const Mat4 projector = 0.5 * (Mat4::Identity() - Z);
  Eigen::ColPivHouseholderQR<Mat4> qr(projector);
  qr.setThreshold(1e-8);
  if (qr.rank() != 2) throw NoStabilizingSolution("stable subspace does not have dimension 2");
  const Mat4 basis = qr.householderQ() * Mat4::Identity();
  const Mat2 U1 = basis.block<2, 2>(0, 0);
  const Mat2 U2 = basis.block<2, 2>(2, 0);
  Eigen::FullPivLU<Mat2> lu(U1);
  if (!lu.isInvertible() || lu.rcond() < 1e-12)
    throw NoStabilizingSolution("stable subspace is not a graph over the state space");
  Mat2 P = symmetrized(U2 * lu.inverse());

  // Newton-Kleinman refinement.
  double best = care_residual(P, A, S, Q).norm();
  for (int it = 0; it < 20 && best > 1e-14 * scale; ++it) {
    const Mat2 Ak = A - S * P;
    if (max_real_eigenvalue(Ak) >= 0) break;
    const Mat2 next = symmetrized(solve_lyapunov(Ak, Q + P * S * P));
    const double r = care_residual(next, A, S, Q).norm();
    if (!(r < best)) break;
    P = next;
    best = r;
  }

  if (!P.allFinite()) throw NoStabilizingSolution("non-finite solution");
  if (care_residual(P, A, S, Q).cwiseAbs().maxCoeff() >= 1e-9)
    throw NoStabilizingSolution("Riccati residual above 1e-9");
  if (max_real_eigenvalue(A - S * P) >= 0)
    throw NoStabilizingSolution("closed loop is not Hurwitz");
  return P;
}

/// The stabilizing P of the variant's algebraic equation with A frozen at
/// x_lin and Q regularized by eps_y on the y-mode. All non-robust variants
/// share the noise-free equation; the worst-case variant uses the
/// gamma-modified quadratic term.
inline Mat2 solve_are(const ModelParams& params, Variant variant, double x_lin, double eps_y) {
  const SystemMatrices m = assemble(params);
  Mat2 Qr = m.Q;
  Qr(1, 1) += eps_y;
  return solve_care(m.A(x_lin), -effective_gain_matrix(m, variant), Qr);
}

inline Mat2 solve_are(const ModelParams& params, double x_lin, double eps_y) {
  return solve_are(params, Variant::kDeterministic, x_lin, eps_y);
}

/// Stationary affine coefficient: solves A^T Psi + P C + P M Psi + L(e) = 0.
inline Vec2 steady_state_psi(const SystemMatrices& m, Variant variant, const Mat2& P,
                             double x_lin, double e) {
  const Mat2 M = effective_gain_matrix(m, variant);
  const Mat2 lhs = m.A(x_lin).transpose() + P * M;
  Eigen::FullPivLU<Mat2> lu(lhs);
  if (!lu.isInvertible())
    throw NumericalError(Stage::kRiccati, "stationary affine coefficient is not unique");
  return lu.solve(-(P * m.C + m.L(e)));
}

// ---------------------------------------------------------------------------
// Feedback laws

/// u* = -R^-1 B^T (P X + Psi).
inline ControlInput control_law(const Mat2& P, const Vec2& Psi, const Mat2& R, const Mat2& B,
                                const Vec2& X) {
  const Vec2 u = -R.inverse() * B.transpose() * (P * X + Psi);
  return {u(0), u(1)};
}

/// w* = gamma^-2 D^T (P X + Psi).
inline Vec2 worst_case_disturbance(const Mat2& P, const Vec2& Psi, const Mat2& D, double gamma,
                                   const Vec2& X) {
  return D.transpose() * (P * X + Psi) / (gamma * gamma);
}

/// grad^T (A X + B u + C) + 1/2 X^T Q X + 1/2 u^T R u + L^T X.
inline double control_hamiltonian(const SystemMatrices& m, const Mat2& A, const Vec2& grad,
                                  const Vec2& X, const Vec2& u, double e) {
  return grad.dot(A * X + m.B * u + m.C) + 0.5 * X.dot(m.Q * X) + 0.5 * u.dot(m.R * u) +
         m.L(e).dot(X);
}

/// Isaacs Hamiltonian: the control Hamiltonian plus grad^T D w - gamma^2/2 |w|^2.
inline double isaacs_hamiltonian(const SystemMatrices& m, const Mat2& A, const Vec2& grad,
                                 const Vec2& X, const Vec2& u, const Vec2& w, double e) {
  return control_hamiltonian(m, A, grad, X, u, e) + grad.dot(m.D * w) -
         0.5 * m.gamma * m.gamma * w.squaredNorm();
}

// ---------------------------------------------------------------------------
// Backward Riccati systems

/// Time samples of (P, Psi, chi) for one variant. Immutable once built.
struct RiccatiTrajectory {
  Variant variant = Variant::kDeterministic;
  std::vector<double> grid;
  std::vector<Mat2> P;
  std::vector<Vec2> Psi;
  std::vector<double> chi;
  ErrorTrajectory e;  // forcing that entered L(e(t))
  double x_lin = 0.0;
  RobustPsiCoupling coupling = RobustPsiCoupling::kPMPsi;

  std::size_t size() const { return grid.size(); }
  double horizon() const { return grid.back(); }
  Mat2 P_at(double t) const { return lerp_samples(grid, P, t); }
  Vec2 Psi_at(double t) const { return lerp_samples(grid, Psi, t); }
  double chi_at(double t) const { return lerp_samples(grid, chi, t); }
};

struct BackwardOptions {
  Integrator integrator = Integrator::kRk4;
  RobustPsiCoupling coupling = RobustPsiCoupling::kPMPsi;
  double overflow_guard = 1e12;
  // Terminal weight override; falls back to params.phi, then to the ARE solution.
  std::optional<Mat2> phi;
  double eps_y = 1e-6;
};

namespace detail {

struct RiccatiState {
  Mat2 P;
  Vec2 Psi;
  double chi;

  RiccatiState operator+(const RiccatiState& o) const { return {P + o.P, Psi + o.Psi, chi + o.chi}; }
  RiccatiState operator*(double s) const { return {P * s, Psi * s, chi * s}; }
};

/// d/dt of (P, Psi, chi) for one variant with A frozen.
class RiccatiField {
 public:
  RiccatiField(const SystemMatrices& m, Variant v, double x_lin, RobustPsiCoupling coupling)
      : m_(m), variant_(v), A_(m.A(x_lin)), M_(effective_gain_matrix(m, v)), coupling_(coupling) {}

  Mat2 dP(const Mat2& P) const {
    Mat2 rhs = P * A_ + A_.transpose() * P + P * M_ * P + m_.Q;
    if (variant_ == Variant::kStochasticStateDep) rhs += noise_correction(P);
    return -rhs;
  }

  Vec2 dPsi(const Mat2& P, const Vec2& Psi, double e) const {
    const Vec2 coupled = (variant_ == Variant::kRobust && coupling_ == RobustPsiCoupling::kLiteralMPsi)
                             ? Vec2(M_ * Psi)
                             : Vec2(P * (M_ * Psi));
    return -(A_.transpose() * Psi + P * m_.C + coupled + m_.L(e));
  }

  double dchi(const Mat2& P, const Vec2& Psi) const {
    double rhs = Psi.dot(m_.C) + 0.5 * Psi.dot(M_ * Psi);
    if (variant_ == Variant::kStochasticConst)
      rhs += 0.5 * (m_.sigma11 * m_.sigma11 * P(0, 0) + m_.sigma22 * m_.sigma22 * P(1, 1));
    return -rhs;
  }

  RiccatiState operator()(const RiccatiState& s, double e) const {
    return {dP(s.P), dPsi(s.P, s.Psi, e), dchi(s.P, s.Psi)};
  }

  /// Diag(sigma_ii^2 P_ii): the second-order term of the geometric-noise HJB.
  Mat2 noise_correction(const Mat2& P) const {
    return Vec2(m_.sigma11 * m_.sigma11 * P(0, 0), m_.sigma22 * m_.sigma22 * P(1, 1)).asDiagonal();
  }

 private:
  const SystemMatrices& m_;
  Variant variant_;
  Mat2 A_;
  Mat2 M_;
  RobustPsiCoupling coupling_;
};

}  // namespace detail

/// Integrates the coupled (P, Psi, chi) system backward from
/// P(T) = phi, Psi(T) = 0, chi(T) = 0 on a uniform K-step grid.
inline RiccatiTrajectory solve_backward(const ModelParams& params, Variant variant,
                                        const ErrorTrajectory& e_traj, double T, std::size_t K,
                                        double x_lin, const BackwardOptions& opt = {}) {
  if (K < 2) throw ConfigError(Stage::kRiccati, "solve_backward requires K >= 2");
  const SystemMatrices m = assemble(params);
  const detail::RiccatiField field(m, variant, x_lin, opt.coupling);

  Mat2 phi;
  if (opt.phi)
    phi = *opt.phi;
  else if (params.phi)
    phi = *params.phi;
  else
    phi = solve_are(params, variant, x_lin, opt.eps_y);

  RiccatiTrajectory traj;
  traj.variant = variant;
  traj.grid = uniform_grid(T, K);
  traj.P.resize(K + 1);
  traj.Psi.resize(K + 1);
  traj.chi.resize(K + 1);
  traj.e = e_traj;
  traj.x_lin = x_lin;
  traj.coupling = opt.coupling;

  detail::RiccatiState s{phi, Vec2::Zero(), 0.0};
  traj.P[K] = s.P;
  traj.Psi[K] = s.Psi;
  traj.chi[K] = s.chi;

  for (std::size_t k = K; k-- > 0;) {
    const double t1 = traj.grid[k + 1];
    const double t0 = traj.grid[k];
    const double h = t1 - t0;
    if (opt.integrator == Integrator::kEuler) {
      s = s + field(s, e_traj.at(t1)) * (-h);
    } else {
      const double e1 = e_traj.at(t1);
      const double em = e_traj.at(0.5 * (t0 + t1));
      const double e0 = e_traj.at(t0);
      const auto k1 = field(s, e1);
      const auto k2 = field(s + k1 * (-0.5 * h), em);
      const auto k3 = field(s + k2 * (-0.5 * h), em);
      const auto k4 = field(s + k3 * (-h), e0);
      s = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (-h / 6.0);
    }
    s.P = symmetrized(s.P);
    if (!s.P.allFinite() || s.P.cwiseAbs().maxCoeff() > opt.overflow_guard) throw FiniteTimeBlowUp(t0);
    traj.P[k] = s.P;
    traj.Psi[k] = s.Psi;
    traj.chi[k] = s.chi;
  }
  return traj;
}

// ---------------------------------------------------------------------------
// HJB residual

struct HjbSample {
  Vec2 X;
  double t;
};

namespace detail {

/// Value and first derivative weights of the 4-point Lagrange interpolant
/// through grid nodes i0..i0+3 at t.
struct LagrangeWeights {
  std::size_t i0;
  std::array<double, 4> value;
  std::array<double, 4> slope;
};

inline LagrangeWeights lagrange_weights(const std::vector<double>& g, double t) {
  const std::size_t k = interval_index(g, t);
  const std::size_t last = g.size() - 4;
  LagrangeWeights w{};
  w.i0 = std::min(k > 0 ? k - 1 : 0, last);
  const double* n = &g[w.i0];
  for (int j = 0; j < 4; ++j) {
    double num = 1.0, den = 1.0, dsum = 0.0;
    for (int i = 0; i < 4; ++i) {
      if (i == j) continue;
      num *= t - n[i];
      den *= n[j] - n[i];
    }
    // d/dt prod_{i != j}(t - n_i) = sum_m prod_{i != j, m}(t - n_i)
    for (int mdx = 0; mdx < 4; ++mdx) {
      if (mdx == j) continue;
      double prod = 1.0;
      for (int i = 0; i < 4; ++i)
        if (i != j && i != mdx) prod *= t - n[i];
      dsum += prod;
    }
    w.value[j] = num / den;
    w.slope[j] = dsum / den;
  }
  return w;
}

}  // namespace detail

/// Pointwise left-hand side of the variant's HJB (HJI) identity for the
/// value function v = 1/2 X^T P X + Psi^T X + chi. The time derivatives
/// come from a local cubic interpolant of the stored samples, never from
/// the ODE right-hand side, so the check is independent of the integrator.
inline double hjb_pointwise(const RiccatiTrajectory& traj, const SystemMatrices& m,
                            const HjbSample& s) {
  const auto w = detail::lagrange_weights(traj.grid, s.t);
  Mat2 P = Mat2::Zero(), dP = Mat2::Zero();
  Vec2 Psi = Vec2::Zero(), dPsi = Vec2::Zero();
  double chi = 0.0, dchi = 0.0;
  for (int j = 0; j < 4; ++j) {
    const std::size_t i = w.i0 + j;
    P += w.value[j] * traj.P[i];
    dP += w.slope[j] * traj.P[i];
    Psi += w.value[j] * traj.Psi[i];
    dPsi += w.slope[j] * traj.Psi[i];
    chi += w.value[j] * traj.chi[i];
    dchi += w.slope[j] * traj.chi[i];
  }

  const Vec2& X = s.X;
  const Mat2 A = m.A(traj.x_lin);
  const Vec2 grad = P * X + Psi;
  const double e = traj.e.at(s.t);
  const Vec2 u = control_law(P, Psi, m.R, m.B, X).vec();
  double H;
  if (traj.variant == Variant::kRobust) {
    const Vec2 w_star = worst_case_disturbance(P, Psi, m.D, m.gamma, X);
    H = isaacs_hamiltonian(m, A, grad, X, u, w_star, e);
  } else {
    H = control_hamiltonian(m, A, grad, X, u, e);
  }
  const double s11 = m.sigma11 * m.sigma11;
  const double s22 = m.sigma22 * m.sigma22;
  if (traj.variant == Variant::kStochasticStateDep)
    H += 0.5 * (s11 * X(0) * X(0) * P(0, 0) + s22 * X(1) * X(1) * P(1, 1));
  else if (traj.variant == Variant::kStochasticConst)
    H += 0.5 * (s11 * P(0, 0) + s22 * P(1, 1));

  return 0.5 * X.dot(dP * X) + dPsi.dot(X) + dchi + H;
}

/// Maximum magnitude of the HJB identity residual over the samples.
inline double hjb_residual(const RiccatiTrajectory& traj, const ModelParams& params,
                           std::span<const HjbSample> samples) {
  if (traj.size() < 4) throw ConfigError(Stage::kRiccati, "hjb_residual needs at least 4 grid points");
  const SystemMatrices m = assemble(params);
  double worst = 0.0;
  for (const auto& s : samples) worst = std::max(worst, std::abs(hjb_pointwise(traj, m, s)));
  return worst;
}

inline void write_csv(std::ostream& os, const RiccatiTrajectory& traj) {
  os << "t,P11,P12,P22,Psi1,Psi2,chi\n";
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const Mat2& P = traj.P[k];
    csv::row(os, {traj.grid[k], P(0, 0), P(0, 1), P(1, 1), traj.Psi[k](0), traj.Psi[k](1),
                  traj.chi[k]});
  }
}

}  // namespace tclmfg
