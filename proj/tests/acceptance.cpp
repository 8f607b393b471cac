// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "tclmfg/experiment.hpp"

using namespace tclmfg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ExperimentConfig shipped(const std::string& name) {
  std::ifstream in(std::string(TCLMFG_CONFIG_DIR) + "/" + name + ".cfg");
  return parse_config(in);
}

ErrorTrajectory sine_error(double T, std::size_t K) {
  ErrorTrajectory e = ErrorTrajectory::zeros(uniform_grid(T, K));
  for (std::size_t k = 0; k < e.e.size(); ++k) e.e[k] = 0.1 * std::sin(e.grid[k]);
  return e;
}

double sup_diff(const RiccatiTrajectory& a, const RiccatiTrajectory& b, bool with_chi) {
  double d = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    d = std::max(d, (a.P[k] - b.P[k]).cwiseAbs().maxCoeff());
    d = std::max(d, (a.Psi[k] - b.Psi[k]).cwiseAbs().maxCoeff());
    if (with_chi) d = std::max(d, std::abs(a.chi[k] - b.chi[k]));
  }
  return d;
}

// 1
Outcome variant_lattice() {
  const double T = 10;
  const std::size_t K = 1000;
  const auto e = sine_error(T, K);
  bool ok = true;
  std::string detail;

  auto t0 = std::chrono::steady_clock::now();
  ModelParams quiet;
  quiet.sigma11 = quiet.sigma22 = 0;
  const double d1 = sup_diff(solve_backward(quiet, Variant::kDeterministic, e, T, K, 0),
                             solve_backward(quiet, Variant::kStochasticStateDep, e, T, K, 0), true);
  const double s1 = seconds_since(t0);
  ok &= d1 < 1e-10 && s1 < 1;

  t0 = std::chrono::steady_clock::now();
  const ModelParams p;
  const auto det = solve_backward(p, Variant::kDeterministic, e, T, K, 0);
  const auto sc = solve_backward(p, Variant::kStochasticConst, e, T, K, 0);
  const double d2 = sup_diff(det, sc, false);
  double chi_gap = 0;
  for (std::size_t k = 0; k < det.size(); ++k) chi_gap = std::max(chi_gap, std::abs(det.chi[k] - sc.chi[k]));
  const double s2 = seconds_since(t0);
  ok &= d2 == 0.0 && chi_gap > 0 && s2 < 1;

  t0 = std::chrono::steady_clock::now();
  ModelParams wide;
  wide.gamma = 1e6;
  const double d3 = sup_diff(solve_backward(wide, Variant::kDeterministic, e, T, K, 0),
                             solve_backward(wide, Variant::kRobust, e, T, K, 0), true);
  const double s3 = seconds_since(t0);
  ok &= d3 < 1e-6 && s3 < 1;

  detail = "state_dep(0) gap " + fmt("%.2e", d1) + ", const (P,Psi) gap " + fmt("%.1e", d2) +
           " chi gap " + fmt("%.2e", chi_gap) + ", robust(1e6) gap " + fmt("%.2e", d3) + ", max " +
           fmt("%.3f", std::max({s1, s2, s3})) + " s";
  return {ok, detail};
}

// 2
Outcome hjb() {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelParams p;
  const double T = 30;
  const std::size_t K = 10000;
  std::mt19937_64 gen(2024);
  std::uniform_real_distribution<double> x(p.x_on, p.x_off), y(0, 1), t(0, T);
  std::vector<HjbSample> samples(1000);
  for (auto& s : samples) s = {{x(gen), y(gen)}, t(gen)};
  double worst = 0;
  for (Variant v : kAllVariants) {
    const auto sol = fixed_point(p, v, {0, 0.5}, T, K);
    worst = std::max(worst, hjb_residual(sol.riccati, p, samples));
  }
  const double s = seconds_since(t0);
  return {worst < 1e-6 && s < 10, "max residual " + fmt("%.2e", worst) + ", " + fmt("%.2f", s) + " s"};
}

// 3
Outcome are() {
  const ModelParams p;
  const SystemMatrices m = assemble(p);
  double res = 0, eig = -1e300;
  for (Variant v : kAllVariants) {
    const Mat2 P = solve_are(p, v, 0, 1e-6);
    Mat2 Qr = m.Q;
    Qr(1, 1) += 1e-6;
    const Mat2 S = -effective_gain_matrix(m, v);
    res = std::max(res, care_residual(P, m.A(0), S, Qr).norm());
    eig = std::max(eig, max_real_eigenvalue(m.A(0) - S * P));
  }
  const Mat2 Ps = solve_care(-Mat2::Identity(), Mat2::Identity(), Mat2::Identity());
  const double syn = (Ps - (std::sqrt(2.0) - 1) * Mat2::Identity()).cwiseAbs().maxCoeff();
  return {res < 1e-9 && eig < 0 && syn < 1e-10,
          "residual " + fmt("%.2e", res) + ", max Re eig " + fmt("%.4f", eig) + ", synthetic error " +
              fmt("%.1e", syn)};
}

// 4
Outcome fixed_point_criterion() {
  const ModelParams p;
  FixedPointOptions opt;
  const auto sol = fixed_point(p, Variant::kDeterministic, {0, 0.5}, 30, 3000, opt);
  const Sweep s = mean_field_sweep(p, Variant::kDeterministic, {0, 0.5}, sol.e_traj,
                                   terminal_weight(p, Variant::kDeterministic, opt), opt);
  double moved = 0;
  for (std::size_t k = 0; k < s.e_hat.e.size(); ++k)
    moved = std::max(moved, opt.damping * std::abs(s.e_hat.e[k] - sol.e_traj.e[k]));
  ModelParams dec;
  dec.S = 0;
  const auto one = fixed_point(dec, Variant::kDeterministic, {0, 0.5}, 30, 3000, opt);
  const bool ok = sol.final_gap < 1e-8 && sol.iterations <= 200 && moved < 2e-8 && one.iterations == 1;
  return {ok, "iterations " + std::to_string(sol.iterations) + ", final_gap " + fmt("%.2e", sol.final_gap) +
                  ", extra sweep " + fmt("%.2e", moved) + ", S=0 iterations " +
                  std::to_string(one.iterations)};
}

std::vector<std::size_t> epoch_starts(const RunRecord& rec) {
  std::vector<std::size_t> s = {0};
  for (auto k : rec.impulse_steps) s.push_back(k);
  return s;
}

// 5
Outcome settle() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = shipped("table1_deterministic");
  const Feedback fb = make_feedback(cfg, nullptr);
  const RunRecord rec = run(cfg.scenario, cfg.params, fb);
  const auto [M, b] = closed_loop(fb.system(), cfg.scenario.variant, cfg.scenario.closure,
                                  fb.at(0, 0, cfg.solver.x_lin), cfg.solver.x_lin);
  const Vec2 Xs = equilibrium_point(M, b).point;
  const auto starts = epoch_starts(rec);
  double worst_fraction = 1;
  for (std::size_t j = 0; j < starts.size(); ++j) {
    const auto& begin = rec.states[starts[j]];
    const auto& end = j + 1 < starts.size() ? rec.pre_impulse[j] : rec.states.back();
    std::size_t ok = 0;
    for (std::size_t i = 0; i < begin.size(); ++i)
      ok += (end[i].vec() - Xs).norm() < 0.1 * (begin[i].vec() - Xs).norm();
    worst_fraction = std::min(worst_fraction, double(ok) / double(begin.size()));
  }
  const double s = seconds_since(t0);
  return {starts.size() == 3 && worst_fraction >= 0.95 && s < 5,
          std::to_string(starts.size()) + " epochs, worst fraction settled " + fmt("%.3f", worst_fraction) +
              ", " + fmt("%.2f", s) + " s"};
}

std::string record_bytes(const RunRecord& rec) {
  std::ostringstream os;
  write_agents_csv(os, rec);
  write_aggregates_csv(os, rec);
  for (auto k : rec.impulse_steps) os << k << '\n';
  return os.str();
}

// 6
Outcome zero_noise() {
  ExperimentConfig cfg = shipped("table1_deterministic");
  cfg.params.sigma11 = cfg.params.sigma22 = 0;
  const std::string det = record_bytes(run(cfg.scenario, cfg.params));
  bool ok = true;
  for (Variant v : {Variant::kStochasticConst, Variant::kStochasticStateDep}) {
    cfg.scenario.variant = v;
    ok &= record_bytes(run(cfg.scenario, cfg.params)) == det;
  }
  return {ok, "records compared byte for byte (" + std::to_string(det.size()) + " bytes)"};
}

// 7
Outcome mean_field_consistency() {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelParams p;
  const double T = 30;
  const std::size_t K = 3000;
  const auto sol = fixed_point(p, Variant::kDeterministic, {0, 0.5}, T, K);
  ScenarioConfig c;
  c.N = 10000;
  c.dt = T / K;
  c.steps = K;
  c.impulse_period = 0;
  c.closure = Closure::kFullMeanField;
  const RunRecord rec = run(c, p, Feedback::finite_horizon(p, sol.riccati));
  Vec2 m0 = Vec2::Zero();
  for (const auto& a : rec.states[0]) m0 += a.vec();
  m0 /= double(c.N);
  const auto path = propagate_macroscopic(sol.riccati, p, m0, Variant::kDeterministic);
  double worst = 0;
  for (std::size_t k = 0; k < rec.states.size(); ++k) {
    Vec2 mean = Vec2::Zero();
    for (const auto& a : rec.states[k]) mean += a.vec();
    mean /= double(c.N);
    worst = std::max(worst, (mean - path.X[k]).cwiseAbs().maxCoeff());
  }
  const double s = seconds_since(t0);
  return {worst < 1e-2 && s < 30, "sup gap " + fmt("%.2e", worst) + ", " + fmt("%.2f", s) + " s"};
}

// Stationary covariance of dX = M X dt + G dW: M S + S M^T + G G^T = 0,
// solved as a linear system in (s11, s12, s22).
Mat2 stationary_covariance(const Mat2& M, const Vec2& g) {
  Eigen::Matrix3d A;
  Eigen::Vector3d rhs;
  A << 2 * M(0, 0), 2 * M(0, 1), 0,  //
      M(1, 0), M(0, 0) + M(1, 1), M(0, 1),  //
      0, 2 * M(1, 0), 2 * M(1, 1);
  rhs << -g(0) * g(0), 0, -g(1) * g(1);
  const Eigen::Vector3d s = A.fullPivLu().solve(rhs);
  Mat2 S;
  S << s(0), s(1), s(1), s(2);
  return S;
}

// 8
Outcome langevin() {
  const ModelParams p;
  ScenarioConfig c;
  c.variant = Variant::kStochasticConst;
  c.impulse_period = 0;
  c.closure = Closure::kFullMeanField;
  const Feedback fb = Feedback::algebraic(p, c.variant, 0, 1e-6);
  const auto [M, b] = closed_loop(fb.system(), c.variant, c.closure, fb.at(0, 0, 0), 0);
  const auto set = equilibrium_point(M, b);
  c.init = {set.point(0), 0.0, YInit::kFixed, set.point(1)};
  std::vector<RunRecord> runs;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    c.seed = seed;
    runs.push_back(run(c, p, fb));
  }
  const Box box{set.point - Vec2(1, 0.1), set.point + Vec2(1, 0.1)};
  const auto r = check_second_moment(runs, box, set, [&](const Vec2& X) { return Vec2(M * X + b); },
                                     [&](const Vec2& X) { return noise_intensity(p, c.variant, AgentState::from(X)); });
  const double oracle = stationary_covariance(M, Vec2(p.sigma11, p.sigma22)).trace();
  const double peak = *std::max_element(r.moment.begin(), r.moment.end());
  const bool hurwitz = max_real_eigenvalue(M) < 0;
  return {hurwitz && r.trend_bounded && peak <= 2 * oracle,
          "slope " + fmt("%.2e", r.slope) + " (3 SE " + fmt("%.2e", 3 * r.slope_se) + "), peak moment " +
              fmt("%.4f", peak) + " vs oracle " + fmt("%.4f", oracle)};
}

// 9
Outcome geometric_attenuation() {
  const ExperimentConfig cfg = shipped("table1_deterministic");
  const ComparisonTable t = compare_variants(cfg);
  std::vector<std::size_t> ends;
  for (auto k : t.impulse_steps) ends.push_back(k - 1);
  ends.push_back(t.times.size() - 1);
  int wins = 0;
  std::string vals;
  for (auto k : ends) {
    // columns: 1 = constant noise, 2 = geometric noise
    wins += t.std_x[2][k] < t.std_x[1][k];
    vals += " " + fmt("%.3g", t.std_x[2][k]) + "<" + fmt("%.3g", t.std_x[1][k]);
  }
  return {wins >= 2, std::to_string(wins) + "/" + std::to_string(ends.size()) + " epochs (geometric<const):" + vals};
}

// 10
Outcome hamiltonian() {
  const ModelParams p;
  const SystemMatrices m = assemble(p);
  const double T = 30;
  const auto det = fixed_point(p, Variant::kDeterministic, {0, 0.5}, T, 3000);
  const auto rob = fixed_point(p, Variant::kRobust, {0, 0.5}, T, 3000);
  const Mat2 A = m.A(0);
  std::mt19937_64 gen(10);
  std::uniform_real_distribution<double> x(p.x_on, p.x_off), y(0, 1), t(0, T);
  int violations = 0, checks = 0;
  for (int i = 0; i < 100; ++i) {
    const Vec2 X(x(gen), y(gen));
    const double ti = t(gen);
    for (int k = 0; k < 8; ++k) {
      const Vec2 d = 1e-2 * Vec2(std::cos(k * M_PI / 4), std::sin(k * M_PI / 4));
      for (const auto* sol : {&det, &rob}) {
        const auto& r = sol->riccati;
        const Mat2 P = r.P_at(ti);
        const Vec2 Psi = r.Psi_at(ti);
        const Vec2 grad = P * X + Psi;
        const double e = sol->e_traj.at(ti);
        const Vec2 u = control_law(P, Psi, m.R, m.B, X).vec();
        if (sol == &det) {
          ++checks;
          violations += !(control_hamiltonian(m, A, grad, X, u + d, e) > control_hamiltonian(m, A, grad, X, u, e));
        } else {
          const Vec2 w = worst_case_disturbance(P, Psi, m.D, m.gamma, X);
          const double H = isaacs_hamiltonian(m, A, grad, X, u, w, e);
          checks += 2;
          violations += !(isaacs_hamiltonian(m, A, grad, X, u + d, w, e) > H);
          violations += !(isaacs_hamiltonian(m, A, grad, X, u, w + d, e) < H);
        }
      }
    }
  }
  return {violations == 0, std::to_string(checks) + " perturbations, " + std::to_string(violations) + " violations"};
}

// 11
Outcome scalar_oracle() {
  const auto origin = equilibrium_point(-Mat2::Identity(), Vec2::Zero());
  std::vector<TimedState> traj;
  for (int i = -400; i <= 400; ++i) traj.push_back({0.0, Vec2(i / 100.0, 0.0)});
  const auto r = check_asymptotic(traj, origin, [](const Vec2& X) { return Vec2(-X(0), 0.0); }, 1e-6);
  std::size_t mismatches = 0;
  for (const auto& s : r.samples) mismatches += s.satisfied != (std::abs(s.X(0)) < 1.0);
  return {mismatches == 0 && r.excluded_count == 1,
          std::to_string(r.samples.size()) + " samples, " + std::to_string(mismatches) + " mismatches"};
}

// 12
Outcome reproducibility() {
  int identical = 0, total = 0;
  std::string failed;
  for (const char* name : {"table1_deterministic", "table1_stochastic_const", "table1_stochastic_state_dep",
                           "table1_robust"}) {
    ExperimentConfig cfg = shipped(name);
    nlohmann::json sums[2];
    for (int i = 0; i < 2; ++i) {
      cfg.output.dir = (fs::temp_directory_path() / ("tclmfg_acceptance_" + std::to_string(i))).string();
      fs::remove_all(cfg.output.dir);
      const auto r = run_experiment(cfg);
      if (r.exit_code != 0) failed += std::string(" ") + name + ":" + r.stage;
      sums[i] = r.manifest["artifacts"];
    }
    ++total;
    identical += !sums[0].is_null() && sums[0] == sums[1];
  }
  return {identical == total, std::to_string(identical) + "/" + std::to_string(total) + " configs identical" + failed};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"variant reduction lattice", variant_lattice},
      {"HJB residual", hjb},
      {"ARE correctness", are},
      {"mean-field fixed point", fixed_point_criterion},
      {"agents settle between impulses", settle},
      {"zero-noise equivalence", zero_noise},
      {"mean-field consistency", mean_field_consistency},
      {"Langevin boundedness", langevin},
      {"geometric-noise attenuation", geometric_attenuation},
      {"Hamiltonian optimality", hamiltonian},
      {"stability-checker soundness", scalar_oracle},
      {"reproducibility", reproducibility},
  };
  int failures = 0;
  int n = 0;
  for (const auto& [name, fn] : criteria) {
    ++n;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", n - failures, n);
  return failures == 0 ? 0 : 1;
}
