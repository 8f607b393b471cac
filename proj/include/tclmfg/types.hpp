#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tclmfg {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Mat4 = Eigen::Matrix4d;

/// The four model variants: noise-free, geometric (state-dependent) noise,
/// constant (Langevin) noise, and worst-case deterministic disturbance.
enum class Variant { kDeterministic, kStochasticStateDep, kStochasticConst, kRobust };

inline constexpr Variant kAllVariants[] = {Variant::kDeterministic, Variant::kStochasticStateDep,
                                           Variant::kStochasticConst, Variant::kRobust};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kDeterministic: return "deterministic";
    case Variant::kStochasticStateDep: return "stochastic_state_dep";
    case Variant::kStochasticConst: return "stochastic_const";
    case Variant::kRobust: return "robust";
  }
  return "?";
}

inline bool is_stochastic(Variant v) {
  return v == Variant::kStochasticStateDep || v == Variant::kStochasticConst;
}

/// Pipeline stage an error originates from. The CLI reports it verbatim.
enum class Stage { kParse, kAssemble, kRiccati, kMeanfield, kSimulate, kStability, kIo };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kParse: return "parse";
    case Stage::kAssemble: return "assemble";
    case Stage::kRiccati: return "riccati";
    case Stage::kMeanfield: return "meanfield";
    case Stage::kSimulate: return "simulate";
    case Stage::kStability: return "stability";
    case Stage::kIo: return "io";
  }
  return "?";
}

class Error : public std::runtime_error {
 public:
  Error(Stage stage, const std::string& what) : std::runtime_error(what), stage_(stage) {}
  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

/// Malformed or inconsistent input (parameters, configuration).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure failed to produce a valid answer.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class FiniteTimeBlowUp : public NumericalError {
 public:
  explicit FiniteTimeBlowUp(double t)
      : NumericalError(Stage::kRiccati,
                       "finite-time blow-up of the Riccati solution at t = " + std::to_string(t)),
        time_(t) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

class NoStabilizingSolution : public NumericalError {
 public:
  explicit NoStabilizingSolution(const std::string& why)
      : NumericalError(Stage::kRiccati, "no stabilizing solution: " + why) {}
};

class NonConvergence : public NumericalError {
 public:
  explicit NonConvergence(std::vector<double> gaps)
      : NumericalError(Stage::kMeanfield,
                       "mean-field iteration did not converge after " +
                           std::to_string(gaps.size()) + " iterations (last gap " +
                           (gaps.empty() ? std::string("n/a") : std::to_string(gaps.back())) + ")"),
        gaps_(std::move(gaps)) {}
  const std::vector<double>& gap_history() const noexcept { return gaps_; }

 private:
  std::vector<double> gaps_;
};

}  // namespace tclmfg
