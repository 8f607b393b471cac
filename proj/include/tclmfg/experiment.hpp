#pragma once

#include <openssl/evp.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tclmfg/config.hpp"
#include "tclmfg/meanfield.hpp"
#include "tclmfg/riccati.hpp"
#include "tclmfg/simulate.hpp"
#include "tclmfg/stability.hpp"

namespace tclmfg {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error(Stage::kIo, "sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

/// Writes to path.tmp and renames over path, so readers never see a
/// partial file.
inline void write_atomic(const fs::path& path, const std::string& body) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Stage::kIo, "cannot open " + tmp.string() + " for writing");
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    out.flush();
    if (!out) throw Error(Stage::kIo, "write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(Stage::kIo, "rename to " + path.string() + " failed: " + ec.message());
}

inline int exit_code_for(const Error& e) {
  if (e.stage() == Stage::kIo) return 4;
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  return 3;
}

struct ExperimentResult {
  int exit_code = 0;
  std::string stage;  // failing stage, empty on success
  std::string message;
  std::vector<fs::path> files;
  nlohmann::json manifest;

  nlohmann::json error_record() const {
    return {{"status", "error"}, {"stage", stage}, {"message", message}, {"exit_code", exit_code}};
  }
};

/// Feedback source used by the simulator for the configured solver mode.
inline Feedback make_feedback(const ExperimentConfig& cfg, const EquilibriumSolution* sol) {
  if (cfg.solver.mode == SolverMode::kFiniteHorizon) return Feedback::finite_horizon(cfg.params, sol->riccati);
  return Feedback::algebraic(cfg.params, cfg.scenario.variant, cfg.solver.x_lin, cfg.solver.eps_y,
                             cfg.scenario.relinearize);
}

inline FixedPointOptions fixed_point_options(const ExperimentConfig& cfg) {
  FixedPointOptions o;
  o.damping = cfg.meanfield.damping;
  o.tol = cfg.meanfield.tol;
  o.max_iter = cfg.meanfield.max_iter;
  o.x_lin = cfg.solver.x_lin;
  o.eps_y = cfg.solver.eps_y;
  o.integrator = cfg.solver.integrator;
  return o;
}

inline double time_average(const ErrorTrajectory& e) {
  if (e.e.empty()) return 0.0;
  return std::accumulate(e.e.begin(), e.e.end(), 0.0) / static_cast<double>(e.e.size());
}

/// Closed loop used by the stability checks: gains at t = 0 with the error
/// held at the time average of the converged equilibrium error.
inline std::pair<Mat2, Vec2> reference_closed_loop(const ExperimentConfig& cfg, const Feedback& fb,
                                                   const EquilibriumSolution& sol) {
  const Gains g = fb.at(0.0, time_average(sol.e_traj), fb.x_lin());
  return closed_loop(fb.system(), cfg.scenario.variant, cfg.scenario.closure, g, fb.x_lin());
}

struct StabilitySummary {
  std::string check;
  DriftReport report;
  double moment_slope = 0.0;
  double moment_slope_se = 0.0;
  bool trend_bounded = true;
  EquilibriumSet set;
};

inline StabilitySummary run_stability(const ExperimentConfig& cfg, const RunRecord& rec,
                                      const std::pair<Mat2, Vec2>& loop) {
  StabilitySummary s;
  const auto& [M, b] = loop;
  s.set = equilibrium_point(M, b);
  if (s.set.kind == EquilibriumSet::Kind::kEmpty)
    throw NumericalError(Stage::kStability, "closed loop has no equilibrium");
  auto drift = [&](const Vec2& X) -> Vec2 { return M * X + b; };
  const Variant v = cfg.scenario.variant;
  if (is_stochastic(v)) {
    s.check = "second_moment";
    const Vec2 c = s.set.project(Vec2::Zero());
    const Box box{c - Vec2(cfg.stability.box_x, cfg.stability.box_y),
                  c + Vec2(cfg.stability.box_x, cfg.stability.box_y)};
    auto noise = [&](const Vec2& X) { return noise_intensity(cfg.params, v, AgentState::from(X)); };
    SecondMomentOptions o;
    o.fd_step = cfg.stability.fd_step;
    const SecondMomentReport r =
        check_second_moment(std::span<const RunRecord>(&rec, 1), box, s.set, drift, noise, o);
    s.report = r.analytic;
    s.moment_slope = r.slope;
    s.moment_slope_se = r.slope_se;
    s.trend_bounded = r.trend_bounded;
    return s;
  }
  std::vector<TimedState> traj;
  for (std::size_t k = 0; k < rec.states.size(); ++k)
    for (const auto& a : rec.states[k]) traj.push_back({rec.times[k], a.vec()});
  const double delta = cfg.stability.delta_scale * (cfg.params.x_off - cfg.params.x_on);
  s.check = v == Variant::kRobust ? "worst_case" : "asymptotic";
  s.report = v == Variant::kRobust ? check_worst_case(traj, s.set, drift, delta)
                                   : check_asymptotic(traj, s.set, drift, delta);
  return s;
}

inline std::string stability_summary_csv(const StabilitySummary& s) {
  std::ostringstream os;
  os << "check,samples,excluded_count,fraction_satisfied,worst_margin,vacuous,x_star,y_star,"
        "moment_slope,moment_slope_se,trend_bounded,note\n";
  os << s.check << ',' << s.report.samples.size() << ',' << s.report.excluded_count << ','
     << csv::fmt(s.report.fraction_satisfied) << ',' << csv::fmt(s.report.worst_margin) << ','
     << (s.report.vacuous ? 1 : 0) << ',' << csv::fmt(s.set.point(0) + 0.0) << ','
     << csv::fmt(s.set.point(1) + 0.0) << ',' << csv::fmt(s.moment_slope) << ','
     << csv::fmt(s.moment_slope_se) << ',' << (s.trend_bounded ? 1 : 0) << ",\"" << kSufficiencyNote
     << "\"\n";
  return os.str();
}

template <typename F>
std::string to_text(F&& writer) {
  std::ostringstream os;
  writer(os);
  return os.str();
}

/// assemble -> fixed point -> simulate -> stability, then the artifacts and
/// manifest.json in cfg.output.dir. Never throws; failures come back as an
/// exit code and the stage that failed.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  ExperimentResult res;
  Stage stage = Stage::kAssemble;
  try {
    validate(cfg);
    const Variant v = cfg.scenario.variant;

    stage = Stage::kMeanfield;
    const EquilibriumSolution sol =
        fixed_point(cfg.params, v, cfg.scenario.init.mean(), cfg.solver.T, cfg.solver.K,
                    fixed_point_options(cfg));

    stage = Stage::kRiccati;
    const Feedback fb = make_feedback(cfg, &sol);

    stage = Stage::kSimulate;
    const RunRecord rec = run(cfg.scenario, cfg.params, fb);

    stage = Stage::kStability;
    const StabilitySummary stab = run_stability(cfg, rec, reference_closed_loop(cfg, fb, sol));

    stage = Stage::kIo;
    std::vector<std::pair<std::string, std::string>> artifacts = {
        {"riccati.csv", to_text([&](std::ostream& os) { write_csv(os, sol.riccati); })},
        {"equilibrium.csv", to_text([&](std::ostream& os) { write_csv(os, sol); })},
    };
    if (cfg.output.emit_agents)
      artifacts.emplace_back("agents.csv",
                             to_text([&](std::ostream& os) { write_agents_csv(os, rec); }));
    artifacts.emplace_back("aggregates.csv",
                           to_text([&](std::ostream& os) { write_aggregates_csv(os, rec); }));
    artifacts.emplace_back("stability_summary.csv", stability_summary_csv(stab));

    const fs::path dir = cfg.output.dir;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(Stage::kIo, "cannot create " + dir.string() + ": " + ec.message());

    nlohmann::json checksums = nlohmann::json::object();
    for (const auto& [name, body] : artifacts) {
      const fs::path p = dir / (cfg.output.prefix + name);
      write_atomic(p, body);
      res.files.push_back(p);
      checksums[name] = sha256_hex(body);
    }
    res.manifest = {{"config_sha256", sha256_hex(serialize_config(cfg))},
                    {"seed", cfg.scenario.seed},
                    {"variant", std::string(to_string(v))},
                    {"iterations", sol.iterations},
                    {"final_gap", sol.final_gap},
                    {"artifacts", checksums}};
    const fs::path mp = dir / (cfg.output.prefix + "manifest.json");
    write_atomic(mp, res.manifest.dump(2) + "\n");
    res.files.push_back(mp);
  } catch (const Error& e) {
    res.exit_code = exit_code_for(e);
    res.stage = std::string(to_string(e.stage()));
    res.message = e.what();
  } catch (const std::exception& e) {
    res.exit_code = stage == Stage::kIo ? 4 : 3;
    res.stage = std::string(to_string(stage));
    res.message = e.what();
  }
  return res;
}

/// Per-time aggregate dispersion of the noise-free, constant-noise and
/// geometric-noise runs on one seed.
struct ComparisonTable {
  static constexpr Variant kVariants[] = {Variant::kDeterministic, Variant::kStochasticConst,
                                          Variant::kStochasticStateDep};
  std::vector<double> times;
  std::array<std::vector<double>, 3> std_x;
  std::array<std::vector<double>, 3> std_y;
  std::vector<std::size_t> impulse_steps;
};

inline ComparisonTable compare_variants(const ExperimentConfig& base) {
  validate(base);
  ComparisonTable table;
  for (std::size_t j = 0; j < 3; ++j) {
    ExperimentConfig cfg = base;
    cfg.scenario.variant = ComparisonTable::kVariants[j];
    std::optional<EquilibriumSolution> sol;
    if (cfg.solver.mode == SolverMode::kFiniteHorizon)
      sol = fixed_point(cfg.params, cfg.scenario.variant, cfg.scenario.init.mean(), cfg.solver.T,
                        cfg.solver.K, fixed_point_options(cfg));
    const RunRecord rec =
        run(cfg.scenario, cfg.params, make_feedback(cfg, sol ? &*sol : nullptr), {false});
    if (j == 0) {
      table.times = rec.times;
      table.impulse_steps = rec.impulse_steps;
    }
    for (const auto& a : rec.aggregates) {
      table.std_x[j].push_back(a.std_x);
      table.std_y[j].push_back(a.std_y);
    }
  }
  return table;
}

/// Columns: t, then std_x and std_y for each variant.
inline void write_csv(std::ostream& os, const ComparisonTable& t) {
  os << "t";
  for (Variant v : ComparisonTable::kVariants) os << ",std_x_" << to_string(v) << ",std_y_" << to_string(v);
  os << '\n';
  for (std::size_t k = 0; k < t.times.size(); ++k)
    csv::row(os, {t.times[k], t.std_x[0][k], t.std_y[0][k], t.std_x[1][k], t.std_y[1][k],
                  t.std_x[2][k], t.std_y[2][k]});
}

/// compare_variants plus comparison.csv in cfg.output.dir.
inline ExperimentResult run_comparison(const ExperimentConfig& cfg) {
  ExperimentResult res;
  try {
    const ComparisonTable t = compare_variants(cfg);
    const fs::path dir = cfg.output.dir;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(Stage::kIo, "cannot create " + dir.string() + ": " + ec.message());
    const fs::path p = dir / (cfg.output.prefix + "comparison.csv");
    const std::string body = to_text([&](std::ostream& os) { write_csv(os, t); });
    write_atomic(p, body);
    res.files.push_back(p);
    res.manifest = {{"config_sha256", sha256_hex(serialize_config(cfg))},
                    {"seed", cfg.scenario.seed},
                    {"artifacts", {{"comparison.csv", sha256_hex(body)}}}};
  } catch (const Error& e) {
    res.exit_code = exit_code_for(e);
    res.stage = std::string(to_string(e.stage()));
    res.message = e.what();
  } catch (const std::exception& e) {
    res.exit_code = 3;
    res.stage = "simulate";
    res.message = e.what();
  }
  return res;
}

}  // namespace tclmfg
