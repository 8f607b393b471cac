#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tclmfg/csv.hpp"
#include "tclmfg/meanfield.hpp"
#include "tclmfg/model.hpp"
#include "tclmfg/simulate.hpp"

namespace tclmfg {

enum class SolverMode { kFiniteHorizon, kAre };

struct SolverConfig {
  SolverMode mode = SolverMode::kAre;
  double T = 30.0;
  std::size_t K = 3000;
  double x_lin = 0.0;
  double eps_y = 1e-6;
  Integrator integrator = Integrator::kRk4;
  bool operator==(const SolverConfig&) const = default;
};

struct MeanfieldConfig {
  double damping = 0.5;
  double tol = 1e-8;
  std::size_t max_iter = 200;
  bool operator==(const MeanfieldConfig&) const = default;
};

struct OutputConfig {
  std::string dir = "out";
  std::string prefix;
  bool emit_agents = true;
  bool operator==(const OutputConfig&) const = default;
};

/// delta = delta_scale (x_off - x_on) is the exclusion radius around the
/// equilibrium set; the compact set of the second-moment check is the box
/// X* +- (box_x, box_y).
struct StabilityConfig {
  double delta_scale = 1e-6;
  double fd_step = 1e-4;
  double box_x = 1.0;
  double box_y = 0.1;
  bool operator==(const StabilityConfig&) const = default;
};

struct ExperimentConfig {
  ModelParams params;
  ScenarioConfig scenario;
  SolverConfig solver;
  MeanfieldConfig meanfield;
  OutputConfig output;
  StabilityConfig stability;
  bool operator==(const ExperimentConfig&) const = default;
};

inline void validate(const ExperimentConfig& c) {
  validate(c.params);
  validate(c.scenario);
  auto fail = [](const std::string& msg) { throw ConfigError(Stage::kParse, msg); };
  if (!(c.solver.T > 0)) fail("solver.T must be positive");
  if (c.solver.K < 3) fail("solver.K must be at least 3");
  if (!(c.solver.eps_y >= 0)) fail("solver.eps_y must be non-negative");
  if (!(c.meanfield.damping > 0 && c.meanfield.damping <= 1)) fail("meanfield.damping must lie in (0, 1]");
  if (!(c.meanfield.tol > 0)) fail("meanfield.tol must be positive");
  if (c.meanfield.max_iter < 1) fail("meanfield.max_iter must be at least 1");
  if (c.solver.mode == SolverMode::kFiniteHorizon &&
      static_cast<double>(c.scenario.steps) * c.scenario.dt > c.solver.T * (1 + 1e-12))
    fail("simulation horizon steps*dt exceeds solver.T in finite_horizon mode");
  if (c.solver.mode == SolverMode::kFiniteHorizon && c.scenario.relinearize)
    fail("scenario.relinearize requires solver.mode = are");
  if (c.stability.fd_step <= 0 || c.stability.delta_scale < 0 || c.stability.box_x < 0 ||
      c.stability.box_y < 0)
    fail("invalid stability settings");
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(std::string_view v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(Stage::kParse, "not a number: '" + std::string(v) + "'");
  return out;
}

template <typename Int>
Int parse_int(std::string_view v) {
  Int out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(Stage::kParse, "not a non-negative integer: '" + std::string(v) + "'");
  return out;
}

inline bool parse_bool(std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(Stage::kParse, "not a boolean: '" + std::string(v) + "'");
}

template <typename E, std::size_t N>
E parse_enum(std::string_view v, const std::pair<E, const char*> (&names)[N]) {
  for (const auto& [e, n] : names)
    if (v == n) return e;
  throw ConfigError(Stage::kParse, "unknown option: '" + std::string(v) + "'");
}

template <typename E, std::size_t N>
std::string enum_name(E v, const std::pair<E, const char*> (&names)[N]) {
  for (const auto& [e, n] : names)
    if (e == v) return n;
  return "?";
}

inline constexpr std::pair<Variant, const char*> kVariantNames[] = {
    {Variant::kDeterministic, "deterministic"},
    {Variant::kStochasticStateDep, "stochastic_state_dep"},
    {Variant::kStochasticConst, "stochastic_const"},
    {Variant::kRobust, "robust"}};
inline constexpr std::pair<Closure, const char*> kClosureNames[] = {
    {Closure::kSimplified, "simplified"}, {Closure::kFullMeanField, "full"}};
inline constexpr std::pair<ImpulseRule, const char*> kImpulseNames[] = {
    {ImpulseRule::kUniformOffset, "uniform_offset"}, {ImpulseRule::kResampleFromM0, "resample_from_m0"}};
inline constexpr std::pair<YInit, const char*> kYInitNames[] = {{YInit::kUniform, "uniform"},
                                                                {YInit::kFixed, "fixed"}};
inline constexpr std::pair<NoiseScaling, const char*> kNoiseScalingNames[] = {
    {NoiseScaling::kSqrtDt, "sqrt_dt"}, {NoiseScaling::kLiteralDt, "literal_dt"}};
inline constexpr std::pair<SolverMode, const char*> kModeNames[] = {
    {SolverMode::kFiniteHorizon, "finite_horizon"}, {SolverMode::kAre, "are"}};
inline constexpr std::pair<Integrator, const char*> kIntegratorNames[] = {
    {Integrator::kRk4, "rk4"}, {Integrator::kEuler, "euler"}};

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

#define TCLMFG_DOUBLE(KEY, MEMBER)                                                       \
  Field {                                                                                \
    KEY, [](const ExperimentConfig& c) { return csv::fmt(c.MEMBER); },                   \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = parse_double(v); }      \
  }
#define TCLMFG_INT(KEY, MEMBER)                                                               \
  Field {                                                                                     \
    KEY, [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); },                  \
        [](ExperimentConfig& c, std::string_view v) {                                         \
          c.MEMBER = parse_int<std::remove_cvref_t<decltype(c.MEMBER)>>(v);                   \
        }                                                                                     \
  }
#define TCLMFG_BOOL(KEY, MEMBER)                                                              \
  Field {                                                                                     \
    KEY, [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); },  \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = parse_bool(v); }             \
  }
#define TCLMFG_ENUM(KEY, MEMBER, NAMES)                                                       \
  Field {                                                                                     \
    KEY, [](const ExperimentConfig& c) { return enum_name(c.MEMBER, NAMES); },                \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = parse_enum(v, NAMES); }      \
  }
#define TCLMFG_STRING(KEY, MEMBER)                                                            \
  Field {                                                                                     \
    KEY, [](const ExperimentConfig& c) { return c.MEMBER; },                                  \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = std::string(v); }            \
  }

inline std::string phi_to_string(const ExperimentConfig& c) {
  if (!c.params.phi) return "auto";
  const Mat2& p = *c.params.phi;
  return csv::fmt(p(0, 0)) + " " + csv::fmt(p(0, 1)) + " " + csv::fmt(p(1, 1));
}

inline void phi_from_string(ExperimentConfig& c, std::string_view v) {
  if (v == "auto") {
    c.params.phi.reset();
    return;
  }
  std::vector<double> xs;
  std::size_t pos = 0;
  while (pos < v.size()) {
    const auto next = v.find(' ', pos);
    const auto tok = trim(v.substr(pos, next == std::string_view::npos ? v.size() - pos : next - pos));
    if (!tok.empty()) xs.push_back(parse_double(tok));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  if (xs.size() != 3) throw ConfigError(Stage::kParse, "params.phi expects 'auto' or 'p11 p12 p22'");
  Mat2 p;
  p << xs[0], xs[1], xs[1], xs[2];
  c.params.phi = p;
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      TCLMFG_DOUBLE("params.alpha", params.alpha),
      TCLMFG_DOUBLE("params.beta", params.beta),
      TCLMFG_DOUBLE("params.x_on", params.x_on),
      TCLMFG_DOUBLE("params.x_off", params.x_off),
      TCLMFG_DOUBLE("params.q", params.q),
      TCLMFG_DOUBLE("params.r_on", params.r_on),
      TCLMFG_DOUBLE("params.r_off", params.r_off),
      TCLMFG_DOUBLE("params.S", params.S),
      TCLMFG_DOUBLE("params.W", params.W),
      TCLMFG_DOUBLE("params.gamma", params.gamma),
      TCLMFG_DOUBLE("params.sigma11", params.sigma11),
      TCLMFG_DOUBLE("params.sigma22", params.sigma22),
      TCLMFG_DOUBLE("params.d11", params.d11),
      TCLMFG_DOUBLE("params.d12", params.d12),
      TCLMFG_DOUBLE("params.d21", params.d21),
      TCLMFG_DOUBLE("params.d22", params.d22),
      TCLMFG_DOUBLE("params.m_on_bar", params.m_on_bar),
      Field{"params.phi", phi_to_string, phi_from_string},
      TCLMFG_ENUM("scenario.variant", scenario.variant, kVariantNames),
      TCLMFG_INT("scenario.N", scenario.N),
      TCLMFG_DOUBLE("scenario.dt", scenario.dt),
      TCLMFG_INT("scenario.steps", scenario.steps),
      TCLMFG_DOUBLE("scenario.impulse_period", scenario.impulse_period),
      TCLMFG_ENUM("scenario.impulse_rule", scenario.impulse.rule, kImpulseNames),
      TCLMFG_DOUBLE("scenario.impulse_ax", scenario.impulse.ax),
      TCLMFG_DOUBLE("scenario.impulse_ay", scenario.impulse.ay),
      TCLMFG_INT("scenario.seed", scenario.seed),
      TCLMFG_ENUM("scenario.closure", scenario.closure, kClosureNames),
      TCLMFG_DOUBLE("scenario.x_mean", scenario.init.x_mean),
      TCLMFG_DOUBLE("scenario.x_std", scenario.init.x_std),
      TCLMFG_ENUM("scenario.y_init", scenario.init.y_init, kYInitNames),
      TCLMFG_DOUBLE("scenario.y_value", scenario.init.y_value),
      TCLMFG_ENUM("scenario.noise_scaling", scenario.noise_scaling, kNoiseScalingNames),
      TCLMFG_BOOL("scenario.relinearize", scenario.relinearize),
      TCLMFG_ENUM("solver.mode", solver.mode, kModeNames),
      TCLMFG_DOUBLE("solver.T", solver.T),
      TCLMFG_INT("solver.K", solver.K),
      TCLMFG_DOUBLE("solver.x_lin", solver.x_lin),
      TCLMFG_DOUBLE("solver.eps_y", solver.eps_y),
      TCLMFG_ENUM("solver.integrator", solver.integrator, kIntegratorNames),
      TCLMFG_DOUBLE("meanfield.damping", meanfield.damping),
      TCLMFG_DOUBLE("meanfield.tol", meanfield.tol),
      TCLMFG_INT("meanfield.max_iter", meanfield.max_iter),
      TCLMFG_STRING("output.dir", output.dir),
      TCLMFG_STRING("output.prefix", output.prefix),
      TCLMFG_BOOL("output.emit_agents", output.emit_agents),
      TCLMFG_DOUBLE("stability.delta_scale", stability.delta_scale),
      TCLMFG_DOUBLE("stability.fd_step", stability.fd_step),
      TCLMFG_DOUBLE("stability.box_x", stability.box_x),
      TCLMFG_DOUBLE("stability.box_y", stability.box_y),
  };
  return table;
}

#undef TCLMFG_DOUBLE
#undef TCLMFG_INT
#undef TCLMFG_BOOL
#undef TCLMFG_ENUM
#undef TCLMFG_STRING

}  // namespace detail

/// Parses `section.key = value` lines. '#' starts a comment; keys absent
/// from the file keep their defaults. Unknown keys are errors.
inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(Stage::kParse, "line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(s.substr(0, eq));
    const auto value = detail::trim(s.substr(eq + 1));
    bool known = false;
    for (const auto& f : detail::fields()) {
      if (key != f.key) continue;
      try {
        f.set(cfg, value);
      } catch (const ConfigError& e) {
        throw ConfigError(Stage::kParse, "line " + std::to_string(lineno) + ": " + e.what());
      }
      known = true;
      break;
    }
    if (!known)
      throw ConfigError(Stage::kParse,
                        "line " + std::to_string(lineno) + ": unknown key '" + std::string(key) + "'");
  }
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

/// Every key, in schema order, one per line. Sections are separated by a
/// blank line.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string_view section;
  for (const auto& f : detail::fields()) {
    const std::string_view key = f.key;
    const auto sec = key.substr(0, key.find('.'));
    if (!section.empty() && sec != section) out += '\n';
    section = sec;
    out += f.key;
    out += " = ";
    out += f.get(cfg);
    out += '\n';
  }
  return out;
}

}  // namespace tclmfg
