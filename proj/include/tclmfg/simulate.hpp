#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <random>
#include <variant>
#include <vector>

#include "tclmfg/csv.hpp"
#include "tclmfg/meanfield.hpp"
#include "tclmfg/model.hpp"
#include "tclmfg/riccati.hpp"

namespace tclmfg {

// ---------------------------------------------------------------------------
// Random streams

/// SplitMix64 output function over (key, counter). Every (seed, agent,
/// purpose) triple owns its own stream, so agents can be advanced in any
/// order and still produce the same draws.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng(std::uint64_t key, std::uint64_t& counter) : key_(key), counter_(&counter) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++*counter_); }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_;
  std::uint64_t* counter_;
};

enum class StreamPurpose : std::uint64_t { kInit = 1, kNoise = 2, kImpulse = 3 };

inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t agent, StreamPurpose purpose) {
  std::uint64_t k = CounterRng::mix(seed ^ 0xD1B54A32D192ED03ULL);
  k = CounterRng::mix(k ^ (agent * 0x9E3779B97F4A7C15ULL));
  return CounterRng::mix(k ^ static_cast<std::uint64_t>(purpose));
}

inline double standard_normal(CounterRng& rng) { return std::normal_distribution<double>{}(rng); }

inline double uniform(CounterRng& rng, double a, double b) {
  return std::uniform_real_distribution<double>{a, b}(rng);
}

// ---------------------------------------------------------------------------
// Scenario

enum class Closure { kSimplified, kFullMeanField };
enum class ImpulseRule { kUniformOffset, kResampleFromM0 };
enum class YInit { kUniform, kFixed };
enum class NoiseScaling { kSqrtDt, kLiteralDt };

/// Re-excitation applied at every impulse epoch. The uniform rule adds an
/// independent offset in [-ax, ax] x [-ay, ay] to each agent.
struct ImpulseDist {
  ImpulseRule rule = ImpulseRule::kUniformOffset;
  double ax = 3.0;  // 0.3 (x_off - x_on) / 2 for the reference parameters
  double ay = 0.3;
  bool operator==(const ImpulseDist&) const = default;
};

inline ImpulseDist default_impulse(const ModelParams& p) {
  return {ImpulseRule::kUniformOffset, 0.3 * (p.x_off - p.x_on) / 2.0, 0.3};
}

/// x ~ N(x_mean, x_std^2); y uniform on [0, 1] or fixed at y_value.
struct InitialDistribution {
  double x_mean = 0.0;
  double x_std = 1.0;
  YInit y_init = YInit::kUniform;
  double y_value = 0.5;

  Vec2 mean() const { return {x_mean, y_init == YInit::kUniform ? 0.5 : y_value}; }
  bool operator==(const InitialDistribution&) const = default;
};

struct ScenarioConfig {
  Variant variant = Variant::kDeterministic;
  std::size_t N = 100;
  double dt = 0.1;
  std::size_t steps = 300;
  double impulse_period = 10.0;  // 0 disables impulses
  ImpulseDist impulse;
  std::uint64_t seed = 1;
  Closure closure = Closure::kSimplified;
  InitialDistribution init;
  NoiseScaling noise_scaling = NoiseScaling::kSqrtDt;
  bool relinearize = false;  // per-agent A(x) and ARE gain each step

  bool operator==(const ScenarioConfig&) const = default;
};

inline void validate(const ScenarioConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError(Stage::kSimulate, msg); };
  if (!(c.dt > 0)) fail("dt must be positive");
  if (c.steps < 1) fail("steps must be at least 1");
  if (c.N < 1) fail("N must be at least 1");
  if (c.impulse_period < 0) fail("impulse_period must be non-negative");
  if (c.impulse.ax < 0 || c.impulse.ay < 0) fail("impulse amplitudes must be non-negative");
  if (c.init.x_std < 0) fail("x_std must be non-negative");
}

// ---------------------------------------------------------------------------
// Population

struct PopulationState {
  double t = 0.0;
  std::vector<AgentState> agents;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> noise_counter;
  std::vector<std::uint64_t> impulse_counter;

  std::size_t size() const { return agents.size(); }

  CounterRng noise_rng(std::size_t i) {
    return {stream_key(seed, i, StreamPurpose::kNoise), noise_counter[i]};
  }
  CounterRng impulse_rng(std::size_t i) {
    return {stream_key(seed, i, StreamPurpose::kImpulse), impulse_counter[i]};
  }
};

inline double empirical_m_on(const PopulationState& pop) { return empirical_m_on(pop.agents); }

inline AgentState draw_initial(const InitialDistribution& d, CounterRng& rng) {
  AgentState a;
  a.x = d.x_mean + d.x_std * standard_normal(rng);
  a.y = d.y_init == YInit::kUniform ? uniform(rng, 0.0, 1.0) : d.y_value;
  return a;
}

inline PopulationState initial_population(const ModelParams& params, const InitialDistribution& d,
                                          std::size_t N, std::uint64_t seed) {
  PopulationState pop;
  pop.seed = seed;
  pop.agents.resize(N);
  pop.noise_counter.assign(N, 0);
  pop.impulse_counter.assign(N, 0);
  for (std::size_t i = 0; i < N; ++i) {
    std::uint64_t counter = 0;
    CounterRng rng(stream_key(seed, i, StreamPurpose::kInit), counter);
    pop.agents[i] = clamp_feasible(params, draw_initial(d, rng));
  }
  return pop;
}

/// X + dt (M X + b), projected onto the feasible box.
inline AgentState euler_step(const ModelParams& params, const AgentState& a, const Mat2& gain,
                             const Vec2& affine, double dt) {
  const Vec2 X = a.vec();
  return clamp_feasible(params, AgentState::from(X + dt * (gain * X + affine)));
}

inline PopulationState step_deterministic(const PopulationState& pop, const Mat2& gain,
                                          const Vec2& affine, double dt, const ModelParams& params) {
  PopulationState next = pop;
  next.t = pop.t + dt;
  for (std::size_t i = 0; i < pop.size(); ++i)
    next.agents[i] = euler_step(params, pop.agents[i], gain, affine, dt);
  return next;
}

/// Noise intensity Sigma for one agent: constant diag(sigma11, sigma22) or
/// geometric diag(sigma11 x, sigma22 y) at the pre-step state.
inline Vec2 noise_intensity(const ModelParams& params, Variant noise, const AgentState& a) {
  if (noise == Variant::kStochasticStateDep) return {params.sigma11 * a.x, params.sigma22 * a.y};
  if (noise == Variant::kStochasticConst) return {params.sigma11, params.sigma22};
  return Vec2::Zero();
}

/// Euler-Maruyama increment added to an already-advanced agent. Components
/// with zero intensity are left untouched so the noise-free case reproduces
/// the deterministic step bit for bit.
inline AgentState add_noise(const ModelParams& params, const AgentState& pre, AgentState post,
                            Variant noise, double dt, NoiseScaling scaling, CounterRng& rng) {
  const Vec2 sig = noise_intensity(params, noise, pre);
  const double h = scaling == NoiseScaling::kSqrtDt ? std::sqrt(dt) : dt;
  const double xi1 = standard_normal(rng);
  const double xi2 = standard_normal(rng);
  Vec2 X = post.vec();
  if (sig(0) != 0.0) X(0) += sig(0) * h * xi1;
  if (sig(1) != 0.0) X(1) += sig(1) * h * xi2;
  return clamp_feasible(params, AgentState::from(X));
}

inline PopulationState step_sde(const PopulationState& pop, const Mat2& gain, const Vec2& affine,
                                double dt, Variant noise, const ModelParams& params,
                                NoiseScaling scaling = NoiseScaling::kSqrtDt) {
  PopulationState next = pop;
  next.t = pop.t + dt;
  for (std::size_t i = 0; i < pop.size(); ++i) {
    const AgentState det = euler_step(params, pop.agents[i], gain, affine, dt);
    CounterRng rng = next.noise_rng(i);
    next.agents[i] = add_noise(params, pop.agents[i], det, noise, dt, scaling, rng);
  }
  return next;
}

inline PopulationState inject_impulse(const PopulationState& pop, const ImpulseDist& rule,
                                      const InitialDistribution& m0, const ModelParams& params) {
  PopulationState next = pop;
  for (std::size_t i = 0; i < pop.size(); ++i) {
    CounterRng rng = next.impulse_rng(i);
    AgentState a = pop.agents[i];
    if (rule.rule == ImpulseRule::kUniformOffset) {
      a.x += uniform(rng, -rule.ax, rule.ax);
      a.y += uniform(rng, -rule.ay, rule.ay);
    } else {
      a = draw_initial(m0, rng);
    }
    next.agents[i] = clamp_feasible(params, a);
  }
  return next;
}

// ---------------------------------------------------------------------------
// Feedback

struct Gains {
  Mat2 P;
  Vec2 Psi;
};

/// Source of (P, Psi) during a simulation: either the stationary ARE gain
/// with Psi re-solved from the current error, or a finite-horizon Riccati
/// trajectory read at the current time.
class Feedback {
 public:
  static Feedback algebraic(const ModelParams& params, Variant variant, double x_lin, double eps_y,
                            bool relinearize = false) {
    Feedback f;
    f.params_ = params;
    f.sys_ = assemble(params);
    f.variant_ = variant;
    f.x_lin_ = x_lin;
    f.eps_y_ = eps_y;
    f.relinearize_ = relinearize;
    f.P_ = solve_are(params, variant, x_lin, eps_y);
    return f;
  }

  static Feedback finite_horizon(const ModelParams& params, RiccatiTrajectory traj) {
    Feedback f;
    f.params_ = params;
    f.sys_ = assemble(params);
    f.variant_ = traj.variant;
    f.x_lin_ = traj.x_lin;
    f.traj_ = std::move(traj);
    return f;
  }

  bool relinearize() const { return relinearize_; }
  double x_lin() const { return x_lin_; }
  const SystemMatrices& system() const { return sys_; }
  Variant variant() const { return variant_; }

  /// Gains at time t under the current error e. x is the agent temperature,
  /// used only when relinearizing.
  Gains at(double t, double e, double x) const {
    if (traj_) return {traj_->P_at(t), traj_->Psi_at(t)};
    if (relinearize_) {
      const Mat2 P = solve_are(params_, variant_, x, eps_y_);
      return {P, steady_state_psi(sys_, variant_, P, x, e)};
    }
    return {P_, steady_state_psi(sys_, variant_, P_, x_lin_, e)};
  }

 private:
  ModelParams params_;
  SystemMatrices sys_;
  Variant variant_ = Variant::kDeterministic;
  double x_lin_ = 0.0;
  double eps_y_ = 1e-6;
  bool relinearize_ = false;
  Mat2 P_ = Mat2::Zero();
  std::optional<RiccatiTrajectory> traj_;
};

/// Closed-loop (gain, affine) for one agent. The simplified closure keeps
/// only the linear feedback part, which is what remains when
/// B R^-1 B^T Psi cancels C.
inline std::pair<Mat2, Vec2> closed_loop(const SystemMatrices& m, Variant variant, Closure closure,
                                         const Gains& g, double x_lin) {
  auto [M, b] = closed_loop_at(m, variant, g.P, g.Psi, x_lin);
  if (closure == Closure::kSimplified) b.setZero();
  return {M, b};
}

// ---------------------------------------------------------------------------
// Runner

struct Aggregate {
  double t = 0.0;
  double m_on = 0.0;
  double e = 0.0;
  double mean_x = 0.0;
  double std_x = 0.0;
  double std_y = 0.0;
};

inline Aggregate aggregate(const PopulationState& pop, double m_on_bar) {
  Aggregate a;
  a.t = pop.t;
  const double n = static_cast<double>(pop.size());
  double sx = 0, sy = 0;
  for (const auto& s : pop.agents) {
    sx += s.x;
    sy += s.y;
  }
  a.mean_x = sx / n;
  a.m_on = sy / n;
  a.e = a.m_on - m_on_bar;
  double vx = 0, vy = 0;
  for (const auto& s : pop.agents) {
    vx += (s.x - a.mean_x) * (s.x - a.mean_x);
    vy += (s.y - a.m_on) * (s.y - a.m_on);
  }
  a.std_x = std::sqrt(vx / n);
  a.std_y = std::sqrt(vy / n);
  return a;
}

struct RunOptions {
  bool keep_states = true;  // false keeps aggregates only
};

/// Full history of one scenario. Index k of each per-time vector belongs
/// to t = k dt, k = 0..steps. States recorded at an impulse step are the
/// post-impulse states; the pre-impulse population is kept separately.
struct RunRecord {
  ScenarioConfig config;
  std::vector<double> times;
  std::vector<std::vector<AgentState>> states;
  std::vector<std::vector<ControlInput>> controls;
  std::vector<Aggregate> aggregates;
  std::vector<std::size_t> impulse_steps;
  std::vector<std::vector<AgentState>> pre_impulse;
};

inline std::size_t impulse_period_steps(const ScenarioConfig& c) {
  if (c.impulse_period <= 0) return 0;
  return static_cast<std::size_t>(std::llround(c.impulse_period / c.dt));
}

/// The simulation loop: aggregates, per-agent feedback, Euler (-Maruyama)
/// update, and impulses on schedule.
inline RunRecord run(const ScenarioConfig& config, const ModelParams& params,
                     const Feedback& feedback, const RunOptions& opt = {}) {
  validate(params);
  validate(config);
  const SystemMatrices& m = feedback.system();
  const Variant variant = config.variant;
  const std::size_t period = impulse_period_steps(config);

  RunRecord rec;
  rec.config = config;
  PopulationState pop = initial_population(params, config.init, config.N, config.seed);

  std::vector<ControlInput> controls(config.N);
  std::vector<std::pair<Mat2, Vec2>> loops(config.N);

  auto evaluate = [&](const Aggregate& agg) {
    Gains shared;
    if (!feedback.relinearize()) shared = feedback.at(pop.t, agg.e, feedback.x_lin());
    for (std::size_t i = 0; i < config.N; ++i) {
      const AgentState& a = pop.agents[i];
      const double x_lin = feedback.relinearize() ? a.x : feedback.x_lin();
      const Gains g = feedback.relinearize() ? feedback.at(pop.t, agg.e, a.x) : shared;
      controls[i] = control_law(g.P, g.Psi, m.R, m.B, a.vec());
      loops[i] = closed_loop(m, variant, config.closure, g, x_lin);
    }
  };
  auto record = [&](const Aggregate& agg) {
    rec.times.push_back(pop.t);
    rec.aggregates.push_back(agg);
    if (opt.keep_states) {
      rec.states.push_back(pop.agents);
      rec.controls.push_back(controls);
    }
  };

  for (std::size_t n = 0; n < config.steps; ++n) {
    pop.t = static_cast<double>(n) * config.dt;
    const Aggregate agg = aggregate(pop, params.m_on_bar);
    evaluate(agg);
    record(agg);

    PopulationState next = pop;
    for (std::size_t i = 0; i < config.N; ++i) {
      const AgentState det =
          euler_step(params, pop.agents[i], loops[i].first, loops[i].second, config.dt);
      if (is_stochastic(variant)) {
        CounterRng rng = next.noise_rng(i);
        next.agents[i] = add_noise(params, pop.agents[i], det, variant, config.dt,
                                   config.noise_scaling, rng);
      } else {
        next.agents[i] = det;
      }
    }
    pop = std::move(next);
    pop.t = static_cast<double>(n + 1) * config.dt;

    if (period > 0 && (n + 1) % period == 0 && n + 1 < config.steps) {
      rec.impulse_steps.push_back(n + 1);
      if (opt.keep_states) rec.pre_impulse.push_back(pop.agents);
      pop = inject_impulse(pop, config.impulse, config.init, params);
    }
  }
  const Aggregate last = aggregate(pop, params.m_on_bar);
  evaluate(last);
  record(last);
  return rec;
}

inline RunRecord run(const ScenarioConfig& config, const ModelParams& params) {
  return run(config, params, Feedback::algebraic(params, config.variant, 0.0, 1e-6, config.relinearize));
}

/// Columns: t, agent_id, x, y, u_on, u_off.
inline void write_agents_csv(std::ostream& os, const RunRecord& rec) {
  os << "t,agent_id,x,y,u_on,u_off\n";
  for (std::size_t k = 0; k < rec.states.size(); ++k)
    for (std::size_t i = 0; i < rec.states[k].size(); ++i) {
      const auto& s = rec.states[k][i];
      const auto& u = rec.controls[k][i];
      os << csv::fmt(rec.times[k]) << ',' << i << ',' << csv::fmt(s.x) << ',' << csv::fmt(s.y)
         << ',' << csv::fmt(u.u_on) << ',' << csv::fmt(u.u_off) << '\n';
    }
}

/// Columns: t, m_on, e, std_x, std_y.
inline void write_aggregates_csv(std::ostream& os, const RunRecord& rec) {
  os << "t,m_on,e,std_x,std_y\n";
  for (const auto& a : rec.aggregates) csv::row(os, {a.t, a.m_on, a.e, a.std_x, a.std_y});
}

}  // namespace tclmfg
