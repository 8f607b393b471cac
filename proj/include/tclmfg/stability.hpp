#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tclmfg/csv.hpp"
#include "tclmfg/simulate.hpp"
#include "tclmfg/types.hpp"

namespace tclmfg {

/// Solution set of M X + b = 0: a point when M is invertible, otherwise a
/// line, the whole plane, or nothing.
struct EquilibriumSet {
  enum class Kind { kPoint, kLine, kPlane, kEmpty };

  Kind kind = Kind::kPoint;
  Vec2 point = Vec2::Zero();      // the point, or a point on the line
  Vec2 direction = Vec2::Zero();  // unit direction of the line
  double residual = 0.0;          // |M point + b|

  Vec2 project(const Vec2& X) const {
    switch (kind) {
      case Kind::kPoint: return point;
      case Kind::kLine: return point + (X - point).dot(direction) * direction;
      case Kind::kPlane: return X;
      case Kind::kEmpty: break;
    }
    throw NumericalError(Stage::kStability, "projection onto an empty equilibrium set");
  }

  double distance(const Vec2& X) const { return (X - project(X)).norm(); }
};

inline EquilibriumSet equilibrium_point(const Mat2& M, const Vec2& b) {
  EquilibriumSet set;
  Eigen::FullPivLU<Mat2> lu(M);
  lu.setThreshold(1e-12);
  const double tol = 1e-10 * (1.0 + b.norm());
  if (lu.rank() == 2) {
    set.point = lu.solve(-b);
    set.residual = (M * set.point + b).norm();
    return set;
  }
  if (lu.rank() == 0) {
    set.kind = b.norm() <= tol ? EquilibriumSet::Kind::kPlane : EquilibriumSet::Kind::kEmpty;
    set.residual = b.norm();
    return set;
  }
  const Vec2 p = M.completeOrthogonalDecomposition().solve(-b);
  set.point = p;
  set.residual = (M * p + b).norm();
  if (set.residual > tol) {
    set.kind = EquilibriumSet::Kind::kEmpty;
    return set;
  }
  set.kind = EquilibriumSet::Kind::kLine;
  set.direction = lu.kernel().col(0).normalized();
  return set;
}

struct TimedState {
  double t = 0.0;
  Vec2 X = Vec2::Zero();
};

struct DriftSample {
  Vec2 X;
  double t;
  double lhs;
  double rhs;
  bool satisfied;  // lhs < rhs
};

inline constexpr const char* kSufficiencyNote =
    "drift conditions are sufficient only: a violated sample does not imply instability";

struct DriftReport {
  std::vector<DriftSample> samples;
  std::size_t excluded_count = 0;
  double fraction_satisfied = 0.0;
  double worst_margin = std::numeric_limits<double>::infinity();  // min of rhs - lhs
  bool vacuous = false;

  std::string summary() const {
    std::string s = "fraction_satisfied=" + csv::fmt(fraction_satisfied) +
                    " worst_margin=" + csv::fmt(worst_margin) +
                    " excluded_count=" + std::to_string(excluded_count);
    if (vacuous) s += " (vacuous: no samples to check)";
    return s + "; " + kSufficiencyNote;
  }
};

namespace detail {

inline void push_sample(DriftReport& r, const Vec2& X, double t, double lhs, double rhs) {
  r.samples.push_back({X, t, lhs, rhs, lhs < rhs});
  r.worst_margin = std::min(r.worst_margin, rhs - lhs);
}

inline void finish(DriftReport& r) {
  r.vacuous = r.samples.empty();
  if (r.vacuous) {
    r.fraction_satisfied = 0.0;
    return;
  }
  const auto ok = std::count_if(r.samples.begin(), r.samples.end(),
                                [](const DriftSample& s) { return s.satisfied; });
  r.fraction_satisfied = static_cast<double>(ok) / static_cast<double>(r.samples.size());
}

}  // namespace detail

/// Checks grad V^T f(X) < -dist(X, set)^2 with V = dist(X, set) along a
/// path. Samples within delta of the set are excluded: V is not
/// differentiable there.
template <typename DriftFn>
DriftReport check_asymptotic(std::span<const TimedState> traj, const EquilibriumSet& set,
                             DriftFn&& drift, double delta) {
  DriftReport r;
  for (const auto& s : traj) {
    const Vec2 offset = s.X - set.project(s.X);
    const double d = offset.norm();
    if (d <= delta) {
      ++r.excluded_count;
      continue;
    }
    const Vec2 f = drift(s.X);
    detail::push_sample(r, s.X, s.t, (offset / d).dot(f), -d * d);
  }
  detail::finish(r);
  return r;
}

/// Same test along a path driven by the worst-case disturbance; drift must
/// be the gamma-modified closed loop.
template <typename DriftFn>
DriftReport check_worst_case(std::span<const TimedState> traj, const EquilibriumSet& set,
                             DriftFn&& drift, double delta) {
  return check_asymptotic(traj, set, std::forward<DriftFn>(drift), delta);
}

/// Axis-aligned box in the state plane.
struct Box {
  Vec2 lo;
  Vec2 hi;
  bool contains(const Vec2& X) const {
    return X(0) >= lo(0) && X(0) <= hi(0) && X(1) >= lo(1) && X(1) <= hi(1);
  }
};

struct SecondMomentOptions {
  double fd_step = 1e-4;
  std::size_t stride = 1;  // check every stride-th recorded state
  std::optional<std::size_t> trend_lag;  // single run only; default newey_west_lag(n)
};

struct SecondMomentReport {
  DriftReport analytic;
  std::vector<double> times;
  std::vector<double> moment;  // ensemble mean of dist(X, set)^2
  double slope = 0.0;          // OLS trend over the final half of the horizon
  double slope_se = 0.0;       // across runs, or Newey-West for a single run
  bool trend_bounded = false;  // slope <= 3 SE
};

/// Newey-West lag floor(4 (n / 100)^(2/9)).
inline std::size_t newey_west_lag(std::size_t n) {
  return static_cast<std::size_t>(std::floor(4.0 * std::pow(static_cast<double>(n) / 100.0, 2.0 / 9.0)));
}

/// Ordinary least squares slope of y on x with its standard error. lag > 0
/// gives the Newey-West (Bartlett kernel) error, which stays honest when
/// successive residuals are correlated, as they are along a time series.
inline std::pair<double, double> ols_slope(std::span<const double> x, std::span<const double> y,
                                           std::size_t lag = 0) {
  const std::size_t n = x.size();
  if (n < 3) return {0.0, std::numeric_limits<double>::infinity()};
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  const double slope = sxy / sxx;
  std::vector<double> u(n);
  double sse = 0;
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = y[i] - my - slope * (x[i] - mx);
    sse += u[i] * u[i];
  }
  if (lag == 0) return {slope, std::sqrt(sse / static_cast<double>(n - 2) / sxx)};

  double s = 0;
  for (std::size_t l = 0; l <= std::min(lag, n - 1); ++l) {
    const double w = l == 0 ? 1.0 : 2.0 * (1.0 - static_cast<double>(l) / static_cast<double>(lag + 1));
    double g = 0;
    for (std::size_t i = l; i < n; ++i) g += u[i] * (x[i] - mx) * u[i - l] * (x[i - l] - mx);
    s += w * g;
  }
  const double dof = static_cast<double>(n) / static_cast<double>(n - 2);
  return {slope, std::sqrt(std::max(s, 0.0) * dof) / sxx};
}

/// Second-moment drift condition outside the compact set M:
///   grad V^T f(X) < -1/2 (s11(X)^2 V_xx + s22(X)^2 V_yy),
/// with central finite differences of V = dist(X, set), together with the
/// empirical ensemble moment and its trend.
template <typename DriftFn, typename NoiseFn>
SecondMomentReport check_second_moment(std::span<const RunRecord> runs, const Box& region,
                                       const EquilibriumSet& set, DriftFn&& drift,
                                       NoiseFn&& noise, const SecondMomentOptions& opt = {}) {
  if (runs.empty()) throw ConfigError(Stage::kStability, "empty ensemble");
  for (const auto& r : runs) {
    ScenarioConfig a = r.config, b = runs.front().config;
    a.seed = b.seed = 0;
    if (!(a == b)) throw ConfigError(Stage::kStability, "ensemble runs have mismatched configs");
    if (r.states.size() != runs.front().states.size())
      throw ConfigError(Stage::kStability, "ensemble runs have mismatched lengths");
  }
  const double h = opt.fd_step;
  auto V = [&](const Vec2& X) { return set.distance(X); };

  SecondMomentReport rep;
  const std::size_t K = runs.front().states.size();
  rep.times = runs.front().times;
  rep.moment.assign(K, 0.0);
  std::vector<std::vector<double>> per_run(runs.size(), std::vector<double>(K, 0.0));
  std::size_t counter = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t n = 0;
    for (std::size_t j = 0; j < runs.size(); ++j)
      for (const auto& a : runs[j].states[k]) {
        const Vec2 X = a.vec();
        const double d = V(X);
        rep.moment[k] += d * d;
        per_run[j][k] += d * d / static_cast<double>(runs[j].states[k].size());
        ++n;
        if (counter++ % opt.stride != 0) continue;
        if (region.contains(X)) {
          ++rep.analytic.excluded_count;
          continue;
        }
        const Vec2 ex(h, 0.0), ey(0.0, h);
        const double v0 = V(X);
        const double vxx = (V(X + ex) - 2.0 * v0 + V(X - ex)) / (h * h);
        const double vyy = (V(X + ey) - 2.0 * v0 + V(X - ey)) / (h * h);
        const Vec2 grad((V(X + ex) - V(X - ex)) / (2 * h), (V(X + ey) - V(X - ey)) / (2 * h));
        const Vec2 sig = noise(X);
        detail::push_sample(rep.analytic, X, rep.times[k], grad.dot(drift(X)),
                            -0.5 * (sig(0) * sig(0) * vxx + sig(1) * sig(1) * vyy));
      }
    rep.moment[k] /= static_cast<double>(n);
  }
  detail::finish(rep.analytic);

  // Seeds are independent, so with several runs the spread of per-run
  // slopes gives the error directly. Agents within a run share the mean
  // field, which leaves correlation a short HAC window misses.
  const std::size_t half = K / 2;
  const auto tail = std::span(rep.times).subspan(half);
  const std::size_t lag = opt.trend_lag.value_or(newey_west_lag(K - half));
  const auto [slope, se] = ols_slope(tail, std::span<const double>(rep.moment).subspan(half), lag);
  rep.slope = slope;
  rep.slope_se = se;
  if (runs.size() > 1) {
    std::vector<double> s(runs.size());
    for (std::size_t j = 0; j < runs.size(); ++j)
      s[j] = ols_slope(tail, std::span<const double>(per_run[j]).subspan(half)).first;
    double mean = 0, var = 0;
    for (double v : s) mean += v;
    mean /= static_cast<double>(s.size());
    for (double v : s) var += (v - mean) * (v - mean);
    var /= static_cast<double>(s.size() - 1);
    rep.slope_se = std::sqrt(var / static_cast<double>(s.size()));
  }
  rep.trend_bounded = rep.slope <= 3.0 * rep.slope_se;
  return rep;
}

/// One row per sample: t, x, y, lhs, rhs, satisfied.
inline void write_csv(std::ostream& os, const DriftReport& r) {
  os << "t,x,y,lhs,rhs,satisfied\n";
  for (const auto& s : r.samples)
    os << csv::fmt(s.t) << ',' << csv::fmt(s.X(0)) << ',' << csv::fmt(s.X(1)) << ','
       << csv::fmt(s.lhs) << ',' << csv::fmt(s.rhs) << ',' << (s.satisfied ? 1 : 0) << '\n';
}

}  // namespace tclmfg
