#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tclmfg/simulate.hpp"

using namespace tclmfg;

namespace {

PopulationState single(const AgentState& a, std::uint64_t seed = 1) {
  PopulationState pop;
  pop.seed = seed;
  pop.agents = {a};
  pop.noise_counter = {0};
  pop.impulse_counter = {0};
  return pop;
}

PopulationState crowd(std::size_t n, const AgentState& a, std::uint64_t seed) {
  PopulationState pop;
  pop.seed = seed;
  pop.agents.assign(n, a);
  pop.noise_counter.assign(n, 0);
  pop.impulse_counter.assign(n, 0);
  return pop;
}

Mat2 hurwitz_gain() {
  Mat2 M;
  M << -1.0, 0.5, -0.2, -0.8;
  return M;
}

double median_norm(const std::vector<AgentState>& agents, const Vec2& center) {
  std::vector<double> d;
  for (const auto& a : agents) d.push_back((a.vec() - center).norm());
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  return d[d.size() / 2];
}

}  // namespace

TEST(CounterRng, StreamsAreIndependentOfOrder) {
  std::uint64_t c1 = 0, c2 = 0;
  CounterRng a(stream_key(5, 3, StreamPurpose::kNoise), c1);
  CounterRng b(stream_key(5, 4, StreamPurpose::kNoise), c2);
  const auto a1 = a();
  b();
  b();
  const auto a2 = a();
  std::uint64_t c3 = 0;
  CounterRng again(stream_key(5, 3, StreamPurpose::kNoise), c3);
  EXPECT_EQ(again(), a1);
  EXPECT_EQ(again(), a2);
  EXPECT_NE(stream_key(5, 3, StreamPurpose::kNoise), stream_key(5, 3, StreamPurpose::kImpulse));
  EXPECT_NE(stream_key(5, 3, StreamPurpose::kNoise), stream_key(6, 3, StreamPurpose::kNoise));
}

TEST(StepDeterministic, OneStepMatrixOracle) {
  const ModelParams p;
  const Mat2 M = hurwitz_gain();
  const Vec2 X0(2.0, 0.4);
  const auto next = step_deterministic(single(AgentState::from(X0)), M, Vec2::Zero(), 0.05, p);
  const Vec2 expected = (Mat2::Identity() + 0.05 * M) * X0;
  EXPECT_LT((next.agents[0].vec() - expected).norm(), 1e-15);
  EXPECT_DOUBLE_EQ(next.agents[0].vec().norm(), expected.norm());
  EXPECT_DOUBLE_EQ(next.t, 0.05);
}

TEST(StepDeterministic, EquilibriumAndZeroStep) {
  const ModelParams p;
  const Mat2 M = hurwitz_gain();
  const Vec2 Xs(1.0, 0.5);
  const Vec2 b = -M * Xs;
  const auto at_eq = step_deterministic(single(AgentState::from(Xs)), M, b, 0.1, p);
  EXPECT_LT((at_eq.agents[0].vec() - Xs).norm(), 1e-15);

  const AgentState a{3.0, 0.7};
  const auto same = step_deterministic(single(a), M, b, 0.0, p);
  EXPECT_EQ(same.agents[0], a);
}

TEST(StepSde, ZeroNoiseIsBitIdentical) {
  ModelParams p;
  p.sigma11 = p.sigma22 = 0;
  PopulationState pop = crowd(20, {1.0, 0.3}, 9);
  for (std::size_t i = 0; i < 20; ++i) pop.agents[i].x += 0.1 * static_cast<double>(i);
  PopulationState a = pop, b = pop;
  for (int k = 0; k < 50; ++k) {
    a = step_deterministic(a, hurwitz_gain(), Vec2(0.3, 0.05), 0.1, p);
    b = step_sde(b, hurwitz_gain(), Vec2(0.3, 0.05), 0.1, Variant::kStochasticConst, p);
  }
  EXPECT_EQ(a.agents, b.agents);
}

TEST(StepSde, GeometricNoiseVanishesAtOrigin) {
  const ModelParams p;
  PopulationState pop = crowd(10, {0.0, 0.0}, 4);
  for (int k = 0; k < 20; ++k)
    pop = step_sde(pop, Mat2::Zero(), Vec2::Zero(), 0.1, Variant::kStochasticStateDep, p);
  for (const auto& a : pop.agents) EXPECT_EQ(a, (AgentState{0.0, 0.0}));
}

TEST(StepSde, BrownianVarianceLaw) {
  const ModelParams p;
  const std::size_t n = 10000, k = 20;
  const double dt = 0.1;
  PopulationState pop = crowd(n, {0.0, 0.5}, 12);
  for (std::size_t s = 0; s < k; ++s)
    pop = step_sde(pop, Mat2::Zero(), Vec2::Zero(), dt, Variant::kStochasticConst, p);
  double mean = 0;
  for (const auto& a : pop.agents) mean += a.x;
  mean /= n;
  double var = 0;
  for (const auto& a : pop.agents) var += (a.x - mean) * (a.x - mean);
  var /= (n - 1);
  const double expected = p.sigma11 * p.sigma11 * k * dt;
  const double se = expected * std::sqrt(2.0 / (n - 1));
  EXPECT_NEAR(var, expected, 3 * se);
}

TEST(InjectImpulse, ZeroAmplitudeAndDeterminism) {
  const ModelParams p;
  const InitialDistribution m0;
  const PopulationState pop = initial_population(p, m0, 50, 3);
  const auto same = inject_impulse(pop, {ImpulseRule::kUniformOffset, 0.0, 0.0}, m0, p);
  EXPECT_EQ(same.agents, pop.agents);

  const auto a = inject_impulse(pop, default_impulse(p), m0, p);
  const auto b = inject_impulse(pop, default_impulse(p), m0, p);
  EXPECT_EQ(a.agents, b.agents);
  EXPECT_NE(a.agents, pop.agents);
}

TEST(InjectImpulse, ResampleMeanWithinCltBound) {
  const ModelParams p;
  InitialDistribution m0;
  m0.x_mean = 2.0;
  m0.x_std = 1.5;
  const std::size_t N = 4000;
  const PopulationState pop = crowd(N, {-5.0, 0.9}, 21);
  const auto next = inject_impulse(pop, {ImpulseRule::kResampleFromM0, 0, 0}, m0, p);
  Vec2 mean = Vec2::Zero();
  for (const auto& a : next.agents) mean += a.vec();
  mean /= static_cast<double>(N);
  EXPECT_LT(std::abs(mean(0) - m0.mean()(0)), 3 * m0.x_std / std::sqrt(double(N)));
  EXPECT_LT(std::abs(mean(1) - m0.mean()(1)), 3 * std::sqrt(1.0 / 12) / std::sqrt(double(N)));
}

TEST(Run, SingleStepComposition) {
  ModelParams p;
  p.sigma11 = p.sigma22 = 0;
  ScenarioConfig c;
  c.N = 1;
  c.steps = 1;
  c.impulse_period = 0;
  const Feedback fb = Feedback::algebraic(p, c.variant, 0, 1e-6);
  const RunRecord rec = run(c, p, fb);
  ASSERT_EQ(rec.states.size(), 2u);

  const PopulationState pop0 = initial_population(p, c.init, 1, c.seed);
  const Gains g = fb.at(0, rec.aggregates[0].e, 0);
  const auto [M, b] = closed_loop(fb.system(), c.variant, c.closure, g, 0);
  const auto next = step_deterministic(pop0, M, b, c.dt, p);
  EXPECT_EQ(rec.states[0], pop0.agents);
  EXPECT_EQ(rec.states[1], next.agents);
}

TEST(Run, SameSeedSameRecord) {
  const ModelParams p;
  ScenarioConfig c;
  c.variant = Variant::kStochasticStateDep;
  c.N = 30;
  const RunRecord a = run(c, p);
  const RunRecord b = run(c, p);
  EXPECT_EQ(a.states, b.states);
  EXPECT_EQ(a.times, b.times);
  c.seed = 2;
  EXPECT_NE(run(c, p).states, a.states);
}

TEST(Run, StatesStayFeasible) {
  ModelParams p;
  p.sigma11 = 3.0;
  p.sigma22 = 0.5;
  ScenarioConfig c;
  c.variant = Variant::kStochasticConst;
  c.N = 50;
  c.init.x_std = 8.0;
  const RunRecord rec = run(c, p);
  for (const auto& snap : rec.states)
    for (const auto& a : snap) {
      EXPECT_GE(a.x, p.x_on);
      EXPECT_LE(a.x, p.x_off);
      EXPECT_GE(a.y, 0.0);
      EXPECT_LE(a.y, 1.0);
    }
}

TEST(Run, ZeroNoiseStochasticEqualsDeterministic) {
  ModelParams p;
  p.sigma11 = p.sigma22 = 0;
  ScenarioConfig c;
  c.N = 40;
  const RunRecord det = run(c, p);
  for (Variant v : {Variant::kStochasticConst, Variant::kStochasticStateDep}) {
    c.variant = v;
    const RunRecord sto = run(c, p);
    EXPECT_EQ(sto.states, det.states);
    EXPECT_EQ(sto.times, det.times);
    EXPECT_EQ(sto.impulse_steps, det.impulse_steps);
  }
}

TEST(Run, ScheduleAndRecordLength) {
  const ModelParams p;
  ScenarioConfig c;
  c.N = 5;
  const RunRecord rec = run(c, p);
  EXPECT_EQ(rec.times.size(), c.steps + 1);
  EXPECT_EQ(rec.aggregates.size(), c.steps + 1);
  EXPECT_EQ(rec.impulse_steps, (std::vector<std::size_t>{100, 200}));
  EXPECT_DOUBLE_EQ(rec.times.back(), 30.0);
}

TEST(Run, DeterministicAgentsSettleWithinEachEpoch) {
  const ModelParams p;
  ScenarioConfig c;
  const Feedback fb = Feedback::algebraic(p, c.variant, 0, 1e-6);
  const RunRecord rec = run(c, p, fb);
  const Gains g = fb.at(0, 0, 0);
  const auto [M, b] = closed_loop(fb.system(), c.variant, c.closure, g, 0);
  const Vec2 Xs = M.fullPivLu().solve(-b);
  std::vector<std::size_t> starts = {0};
  for (auto s : rec.impulse_steps) starts.push_back(s);
  for (std::size_t j = 0; j < starts.size(); ++j) {
    const std::size_t end = j + 1 < starts.size() ? starts[j + 1] - 1 : rec.states.size() - 1;
    for (std::size_t i = 0; i < c.N; ++i)
      EXPECT_LT((rec.states[end][i].vec() - Xs).norm(), (rec.states[starts[j]][i].vec() - Xs).norm());
  }
}

TEST(Run, GeometricNoiseMedianShrinksWithinEpochs) {
  ModelParams p;
  p.sigma11 = 0.05;
  p.sigma22 = 0.05;
  ScenarioConfig c;
  c.variant = Variant::kStochasticStateDep;
  const RunRecord rec = run(c, p);
  std::vector<std::size_t> starts = {0};
  for (auto s : rec.impulse_steps) starts.push_back(s);
  for (std::size_t j = 0; j < starts.size(); ++j) {
    const std::size_t end = j + 1 < starts.size() ? starts[j + 1] - 1 : rec.states.size() - 1;
    EXPECT_LT(median_norm(rec.states[end], Vec2::Zero()), median_norm(rec.states[starts[j]], Vec2::Zero()));
  }
}

TEST(Run, RelinearizedFeedbackRuns) {
  const ModelParams p;
  ScenarioConfig c;
  c.N = 10;
  c.steps = 50;
  c.relinearize = true;
  const RunRecord rec = run(c, p);
  for (const auto& a : rec.states.back()) EXPECT_TRUE(std::isfinite(a.x) && std::isfinite(a.y));
}

TEST(Run, InvalidScenarioRejected) {
  ScenarioConfig c;
  c.dt = 0;
  EXPECT_THROW(run(c, ModelParams{}), ConfigError);
}

TEST(Csv, AgentsAndAggregatesLayout) {
  const ModelParams p;
  ScenarioConfig c;
  c.N = 3;
  c.steps = 4;
  const RunRecord rec = run(c, p);
  std::ostringstream a, g;
  write_agents_csv(a, rec);
  write_aggregates_csv(g, rec);
  const std::string as = a.str(), gs = g.str();
  EXPECT_EQ(as.substr(0, as.find('\n')), "t,agent_id,x,y,u_on,u_off");
  EXPECT_EQ(gs.substr(0, gs.find('\n')), "t,m_on,e,std_x,std_y");
  EXPECT_EQ(std::count(as.begin(), as.end(), '\n'), 1 + 3 * 5);
  EXPECT_EQ(std::count(gs.begin(), gs.end(), '\n'), 1 + 5);
}
