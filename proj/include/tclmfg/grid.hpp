#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace tclmfg {

/// t_k = k T / K, k = 0..K. The last point is pinned to T exactly.
inline std::vector<double> uniform_grid(double T, std::size_t K) {
  if (!(T > 0) || K < 1) throw std::invalid_argument("uniform_grid requires T > 0 and K >= 1");
  std::vector<double> g(K + 1);
  for (std::size_t k = 0; k <= K; ++k) g[k] = T * static_cast<double>(k) / static_cast<double>(K);
  g[K] = T;
  return g;
}

/// Index k of the interval [g[k], g[k+1]] containing t (clamped to the grid).
inline std::size_t interval_index(const std::vector<double>& g, double t) {
  if (g.size() < 2 || t <= g.front()) return 0;
  if (t >= g.back()) return g.size() - 2;
  auto it = std::upper_bound(g.begin(), g.end(), t);
  return static_cast<std::size_t>(it - g.begin()) - 1;
}

/// Piecewise-linear interpolation of samples on g, held constant outside.
template <typename T>
T lerp_samples(const std::vector<double>& g, const std::vector<T>& v, double t) {
  if (g.size() == 1) return v.front();
  if (t <= g.front()) return v.front();
  if (t >= g.back()) return v.back();
  const std::size_t k = interval_index(g, t);
  const double w = (t - g[k]) / (g[k + 1] - g[k]);
  return T((1.0 - w) * v[k] + w * v[k + 1]);
}

/// The mains-frequency error e(t) = m_on(t) - m_on_bar on a time grid.
struct ErrorTrajectory {
  std::vector<double> grid;
  std::vector<double> e;

  static ErrorTrajectory zeros(const std::vector<double>& grid) {
    return {grid, std::vector<double>(grid.size(), 0.0)};
  }

  double at(double t) const { return lerp_samples(grid, e, t); }

  double sup_distance(const ErrorTrajectory& other) const {
    double d = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) d = std::max(d, std::abs(e[i] - other.e[i]));
    return d;
  }
};

}  // namespace tclmfg
