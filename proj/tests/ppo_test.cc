// Copyright 2026 The StableFlow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "stableflow/ppo.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace stableflow {
namespace {

using ::stableflow::testing::central_gradient;
using ::stableflow::testing::relative_error;
using ::stableflow::testing::to_eigen;
using ::stableflow::testing::to_std;

// Direct double sum, O(T^2).
std::vector<double> brute_force_gae(const std::vector<double>& r, const std::vector<double>& v, double gamma,
                                    double lambda) {
  const std::size_t T = r.size();
  std::vector<double> adv(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double w = 1.0;
    for (std::size_t k = t; k < T; ++k) {
      adv[t] += w * (r[k] + gamma * v[k + 1] - v[k]);
      w *= gamma * lambda;
    }
  }
  return adv;
}

TEST(GaeTest, LambdaZeroIsOneStepTd) {
  const std::vector<double> r = {1.0, -2.0, 0.5};
  const std::vector<double> v = {0.3, 0.1, -0.4, 2.0};
  const GaeResult g = compute_gae(r, v, 0.9, 0.0);
  for (std::size_t t = 0; t < r.size(); ++t) {
    EXPECT_DOUBLE_EQ(g.advantages[t], r[t] + 0.9 * v[t + 1] - v[t]);
    EXPECT_DOUBLE_EQ(g.returns[t], g.advantages[t] + v[t]);
  }
}

TEST(GaeTest, LambdaOneZeroValuesIsRewardToGo) {
  const std::vector<double> r = {1.0, 2.0, 3.0, 4.0};
  const std::vector<double> v(5, 0.0);
  const GaeResult g = compute_gae(r, v, 1.0, 1.0);
  EXPECT_EQ(g.advantages, (std::vector<double>{10.0, 9.0, 7.0, 4.0}));
}

TEST(GaeTest, MatchesBruteForce) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> r(200), v(201);
    for (double& x : r) x = n(rng);
    for (double& x : v) x = n(rng);
    const GaeResult g = compute_gae(r, v, 0.99, 0.95);
    const std::vector<double> oracle = brute_force_gae(r, v, 0.99, 0.95);
    for (std::size_t t = 0; t < r.size(); ++t) ASSERT_NEAR(g.advantages[t], oracle[t], 1e-10);
  }
}

TEST(GaeTest, LengthMismatch) {
  const std::vector<double> r(3, 0.0), v(3, 0.0);
  EXPECT_THROW(compute_gae(r, v, 0.99, 0.95), ShapeError);
}

TEST(PPOConfigTest, Validation) {
  PPOConfig c;
  EXPECT_NO_THROW(c.validate());
  c.gamma = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.gamma = 1.0;
  EXPECT_NO_THROW(c.validate());
  c.gae_lambda = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.clip_epsilon = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.minibatch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(MlpTest, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  Mlp net = Mlp::random({4, 6, 5, 3}, rng);
  const Eigen::VectorXd in = Eigen::Vector4d(0.3, -0.2, 0.8, 1.1);
  const Eigen::VectorXd g_out = Eigen::Vector3d(0.7, -1.3, 0.4);
  std::vector<double> grad(net.num_params(), 0.0);
  net.backward(in, g_out, grad);
  const auto f = [&](const Eigen::VectorXd& p) {
    Mlp m = net;
    m.set_params(to_std(p));
    return g_out.dot(m.forward(in));
  };
  const Eigen::VectorXd fd = central_gradient(f, to_eigen(net.params()), 1e-6);
  for (std::size_t k = 0; k < grad.size(); ++k) EXPECT_LT(relative_error(grad[k], fd[k]), 1e-6) << k;
}

TEST(MlpTest, JsonRoundTrip) {
  std::mt19937_64 rng(2);
  const Mlp net = Mlp::random({2, 3, 1}, rng);
  const Mlp back = nlohmann::json(net).get<Mlp>();
  EXPECT_EQ(back.sizes(), net.sizes());
  EXPECT_EQ(back.params(), net.params());
}

FlowPolicy random_flow_policy(std::uint64_t seed, double sigma = 2.0) {
  std::mt19937_64 rng(seed);
  return FlowPolicy(make_policy(init_flow(2, 2, 8, rng, 0.5), Eigen::Vector2d::Zero(), sigma),
                    Gains::identity(2));
}

BaselinePolicy random_baseline_policy(std::uint64_t seed, double sigma = 2.0) {
  std::mt19937_64 rng(seed);
  BaselinePolicyParams p = make_baseline_params(2, Eigen::Vector2d::Zero(), sigma, rng);
  // Larger output weights than the default init so the mean is not ~0.
  p.mean_net = Mlp::random({4, 32, 32, 2}, rng, 1.0);
  return BaselinePolicy(p);
}

PlantState some_state(double a) { return {Eigen::Vector2d(0.1 * a, -0.05), Eigen::Vector2d(0.2, 0.3 * a)}; }

TEST(BaselinePolicyTest, LogProbGradientMatchesFiniteDifferences) {
  BaselinePolicy pol = random_baseline_policy(3);
  const PlantState s = some_state(1.0);
  const Eigen::VectorXd a = Eigen::Vector2d(0.4, -1.1);
  const LogProbGradient g = pol.log_prob_grad(s, a);
  EXPECT_NEAR(g.log_prob, gaussian_log_density(a, pol.mean(s), pol.log_std()), 1e-14);
  const auto f = [&](const Eigen::VectorXd& p) {
    BaselinePolicy q = pol;
    q.set_params(to_std(p));
    return q.log_prob_grad(s, a).log_prob;
  };
  const Eigen::VectorXd fd = central_gradient(f, to_eigen(pol.params()), 1e-6);
  for (std::size_t k = 0; k < g.grad.size(); ++k) EXPECT_LT(relative_error(g.grad[k], fd[k]), 1e-5) << k;
}

std::vector<Sample> make_batch(const Policy& pol, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Sample> batch;
  for (int i = 0; i < n; ++i) {
    const PlantState s = some_state(normal(rng));
    const PolicySample a = pol.act(s, rng, true);
    batch.push_back({s, a.action, a.log_prob, normal(rng), normal(rng)});
  }
  return batch;
}

TEST(AdvantageNormalizationTest, ZeroMeanUnitStd) {
  const FlowPolicy pol = random_flow_policy(1);
  std::vector<Sample> batch = make_batch(pol, 300, 4);
  for (auto& s : batch) s.advantage = 50.0 + 7.0 * s.advantage;
  normalize_advantages(batch);
  double mean = 0.0, var = 0.0;
  for (const auto& s : batch) mean += s.advantage;
  mean /= batch.size();
  for (const auto& s : batch) var += (s.advantage - mean) * (s.advantage - mean);
  EXPECT_LT(std::abs(mean), 1e-10);
  EXPECT_NEAR(std::sqrt(var / batch.size()), 1.0, 1e-10);
}

TEST(SurrogateTest, RatioIsOneBeforeAnyUpdate) {
  const FlowPolicy nf = random_flow_policy(2);
  const BaselinePolicy bl = random_baseline_policy(2);
  for (const Policy* pol : {static_cast<const Policy*>(&nf), static_cast<const Policy*>(&bl)}) {
    for (const Sample& s : make_batch(*pol, 50, 6)) {
      EXPECT_NEAR(pol->log_prob_grad(s.state, s.action).log_prob, s.log_prob, 1e-10) << pol->kind();
    }
  }
}

TEST(SurrogateTest, ClippedSampleHasZeroGradient) {
  const FlowPolicy pol = random_flow_policy(3);
  std::vector<Sample> one = make_batch(pol, 1, 7);
  // rho = e^{-1} < 1 - eps with a negative advantage.
  one[0].log_prob += 1.0;
  one[0].advantage = -1.0;
  SurrogateEval e = surrogate(pol, one, 0.2);
  EXPECT_EQ(e.n_clipped, 1);
  for (double g : e.grad) EXPECT_EQ(g, 0.0);
  // rho = e > 1 + eps with a positive advantage.
  one[0].log_prob -= 2.0;
  one[0].advantage = 1.0;
  e = surrogate(pol, one, 0.2);
  EXPECT_EQ(e.n_clipped, 1);
  for (double g : e.grad) EXPECT_EQ(g, 0.0);
  // Same ratio, favourable sign: the unclipped branch is active.
  one[0].advantage = -1.0;
  e = surrogate(pol, one, 0.2);
  EXPECT_EQ(e.n_clipped, 0);
  EXPECT_GT(to_eigen(e.grad).norm(), 0.0);
}

TEST(SurrogateTest, GradientMatchesFiniteDifferences) {
  for (int kind = 0; kind < 2; ++kind) {
    const FlowPolicy nf = random_flow_policy(4);
    const BaselinePolicy bl = random_baseline_policy(4);
    const Policy& pol = kind == 0 ? static_cast<const Policy&>(nf) : bl;
    std::vector<Sample> one = make_batch(pol, 1, 8);
    one[0].log_prob += 0.05;  // rho inside the clip band
    one[0].advantage = 1.3;
    const SurrogateEval e = surrogate(pol, one, 0.2);
    const auto f = [&](const Eigen::VectorXd& p) {
      std::unique_ptr<Policy> q = pol.clone();
      q->set_params(to_std(p));
      return surrogate(*q, one, 0.2).objective;
    };
    const Eigen::VectorXd fd = central_gradient(f, to_eigen(pol.params()), 1e-6);
    for (std::size_t k = 0; k < e.grad.size(); ++k) {
      EXPECT_LT(relative_error(e.grad[k], fd[k]), 1e-4) << pol.kind() << " param " << k;
    }
  }
}

TEST(SurrogateTest, EntropyBonusOnlyMovesLogStd) {
  const FlowPolicy pol = random_flow_policy(5);
  const std::vector<Sample> batch = make_batch(pol, 5, 9);
  const SurrogateEval a = surrogate(pol, batch, 0.2, 0.0);
  const SurrogateEval b = surrogate(pol, batch, 0.2, 0.01);
  const std::size_t n = a.grad.size();
  for (std::size_t k = 0; k + 2 < n; ++k) EXPECT_EQ(a.grad[k], b.grad[k]);
  EXPECT_NEAR(b.grad[n - 1] - a.grad[n - 1], 0.01, 1e-15);
}

TEST(PPOUpdateTest, ZeroLearningRateLeavesParameters) {
  FlowPolicy pol = random_flow_policy(6);
  std::mt19937_64 rng(1);
  ValueFn v = make_value_fn(2, Eigen::Vector2d::Zero(), rng);
  const std::vector<double> before = pol.params();
  const std::vector<double> vbefore = v.net.params();
  PPOConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.value_learning_rate = 0.0;
  cfg.epochs_per_iter = 2;
  cfg.minibatch_size = 8;
  std::vector<Sample> batch = make_batch(pol, 20, 10);
  normalize_advantages(batch);
  Optimizers opt(cfg);
  const UpdateStats st = ppo_update(pol, v, batch, cfg, opt, rng);
  EXPECT_EQ(pol.params(), before);
  EXPECT_EQ(v.net.params(), vbefore);
  EXPECT_EQ(st.minibatches, 6);
  EXPECT_EQ(st.clip_fraction, 0.0);
}

TEST(PPOUpdateTest, InfiniteClipEqualsUnclippedStep) {
  FlowPolicy pol = random_flow_policy(7);
  std::mt19937_64 rng(2);
  ValueFn v = make_value_fn(2, Eigen::Vector2d::Zero(), rng);
  std::vector<Sample> batch = make_batch(pol, 16, 11);
  // Behaviour log-probs far from the current ones: every ratio is far outside
  // any finite clip band.
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i].log_prob += (i % 2 ? 2.0 : -2.0);
  normalize_advantages(batch);

  // Oracle: Adam's first step along the unclipped surrogate gradient.
  std::vector<double> g(pol.num_params(), 0.0);
  for (const Sample& s : batch) {
    const LogProbGradient lp = pol.log_prob_grad(s.state, s.action);
    const double w = s.advantage * std::exp(lp.log_prob - s.log_prob) / batch.size();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += w * lp.grad[k];
  }
  PPOConfig cfg;
  cfg.clip_epsilon = std::numeric_limits<double>::infinity();
  cfg.max_grad_norm = 0.0;
  cfg.epochs_per_iter = 1;
  cfg.minibatch_size = 16;
  std::vector<double> expected = pol.params();
  for (std::size_t k = 0; k < g.size(); ++k) expected[k] += cfg.learning_rate * g[k] / (std::abs(g[k]) + 1e-8);

  Optimizers opt(cfg);
  const UpdateStats st = ppo_update(pol, v, batch, cfg, opt, rng);
  EXPECT_EQ(st.clip_fraction, 0.0);
  const std::vector<double> got = pol.params();
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], expected[k], 1e-12) << k;
}

TEST(PPOUpdateTest, GradientNormClipRescalesBeforeAdam) {
  FlowPolicy pol = random_flow_policy(7);
  std::mt19937_64 rng(2);
  ValueFn v = make_value_fn(2, Eigen::Vector2d::Zero(), rng);
  std::vector<Sample> batch = make_batch(pol, 16, 11);
  normalize_advantages(batch);

  // Oracle: unclipped-ratio surrogate gradient (all ratios are 1 on the first
  // step), rescaled to the norm bound, then Adam's first step.
  std::vector<double> g(pol.num_params(), 0.0);
  for (const Sample& s : batch) {
    const LogProbGradient lp = pol.log_prob_grad(s.state, s.action);
    const double w = s.advantage * std::exp(lp.log_prob - s.log_prob) / batch.size();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += w * lp.grad[k];
  }
  double norm = 0.0;
  for (double gk : g) norm += gk * gk;
  norm = std::sqrt(norm);
  PPOConfig cfg;
  cfg.epochs_per_iter = 1;
  cfg.minibatch_size = 16;
  cfg.max_grad_norm = 0.25 * norm;
  std::vector<double> expected = pol.params();
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double gc = g[k] * cfg.max_grad_norm / norm;
    expected[k] += cfg.learning_rate * gc / (std::abs(gc) + 1e-8);
  }

  Optimizers opt(cfg);
  ppo_update(pol, v, batch, cfg, opt, rng);
  const std::vector<double> got = pol.params();
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], expected[k], 1e-12) << k;
}

TEST(PPOUpdateTest, NonFiniteLossAborts) {
  FlowPolicy pol = random_flow_policy(8);
  std::mt19937_64 rng(3);
  ValueFn v = make_value_fn(2, Eigen::Vector2d::Zero(), rng);
  std::vector<Sample> batch = make_batch(pol, 4, 12);
  batch[2].ret = std::numeric_limits<double>::quiet_NaN();
  PPOConfig cfg;
  cfg.minibatch_size = 4;
  Optimizers opt(cfg);
  try {
    ppo_update(pol, v, batch, cfg, opt, rng);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("minibatch 0"), std::string::npos);
  }
}

TEST(PPOUpdateTest, LogStdRespectsFloor) {
  BaselinePolicy pol = random_baseline_policy(9, 1.5e-3);
  std::mt19937_64 rng(4);
  ValueFn v = make_value_fn(2, Eigen::Vector2d::Zero(), rng);
  std::vector<Sample> batch = make_batch(pol, 64, 13);
  normalize_advantages(batch);
  PPOConfig cfg;
  cfg.learning_rate = 0.5;
  Optimizers opt(cfg);
  ppo_update(pol, v, batch, cfg, opt, rng);
  for (Eigen::Index i = 0; i < 2; ++i) EXPECT_GE(pol.log_std()[i], kLogStdFloor);
}

Environment block_env() {
  auto block = std::make_shared<BlockInsertionPlant>();
  return {block, [block](std::mt19937_64& r) { return block->sample_start(r); }, block->x_ref()};
}

PPOConfig small_config() {
  PPOConfig cfg;
  cfg.n_rollouts_per_iter = 3;
  cfg.horizon_steps = 20;
  cfg.max_iters = 2;
  cfg.epochs_per_iter = 2;
  cfg.seed = 17;
  return cfg;
}

TEST(TrainTest, ZeroIterations) {
  const FlowPolicy pol = random_flow_policy(10);
  PPOConfig cfg = small_config();
  cfg.max_iters = 0;
  const TrainResult r = train(block_env(), pol, cfg);
  EXPECT_TRUE(r.metrics.empty());
  EXPECT_EQ(r.policy->params(), pol.params());
}

TEST(TrainTest, SeededRunIsDeterministic) {
  const Environment env = block_env();
  for (int kind = 0; kind < 2; ++kind) {
    const FlowPolicy nf = random_flow_policy(11);
    const BaselinePolicy bl = random_baseline_policy(11);
    const Policy& pol = kind == 0 ? static_cast<const Policy&>(nf) : bl;
    TrainOptions one, two;
    two.jobs = 2;
    const TrainResult a = train(env, pol, small_config(), one);
    const TrainResult b = train(env, pol, small_config(), two);
    std::ostringstream ca, cb;
    write_metrics_csv(ca, a.metrics);
    write_metrics_csv(cb, b.metrics);
    EXPECT_EQ(ca.str(), cb.str());
    EXPECT_EQ(a.policy->params(), b.policy->params());
    ASSERT_EQ(a.metrics.size(), 2u);
    EXPECT_NE(a.policy->params(), pol.params());
    for (const auto& m : a.metrics) {
      EXPECT_GE(m.success_rate, 0.0);
      EXPECT_LE(m.success_rate, 1.0);
    }
  }
}

TEST(TrainTest, DivergedEpisodesAreDiscarded) {
  const FlowPolicy pol = random_flow_policy(12);
  PPOConfig cfg = small_config();
  cfg.max_iters = 1;
  TrainOptions opts;
  opts.rollout.workspace_bound = 0.2;  // cuts through the start distribution
  int logged = 0;
  opts.log = [&](const std::string&) { ++logged; };
  const TrainResult r = train(block_env(), pol, cfg, opts);
  ASSERT_EQ(r.metrics.size(), 1u);
  EXPECT_GT(r.metrics[0].diverged_episodes, 0);
  EXPECT_LT(r.metrics[0].diverged_episodes, cfg.n_rollouts_per_iter);
  EXPECT_EQ(logged, r.metrics[0].diverged_episodes);
}

TEST(TrainTest, IterationWithOnlyDivergedEpisodesIsFatal) {
  const FlowPolicy pol = random_flow_policy(12, 200.0);
  PPOConfig cfg = small_config();
  cfg.max_iters = 1;
  TrainOptions opts;
  opts.rollout.workspace_bound = 1e-6;  // every start already lies outside after one step
  EXPECT_THROW(train(block_env(), pol, cfg, opts), DivergenceError);
}

TEST(MetricsTest, IterationsToSuccessNeedsThreeInARow) {
  std::vector<IterationMetrics> ms(8);
  const double rates[] = {0.2, 0.9, 1.0, 0.8, 0.9, 0.95, 1.0, 0.4};
  for (int i = 0; i < 8; ++i) {
    ms[i].iteration = i;
    ms[i].success_rate = rates[i];
  }
  EXPECT_EQ(iterations_to_success(ms), 4);
  ms[5].success_rate = 0.6;
  EXPECT_FALSE(iterations_to_success(ms).has_value());
}

TEST(MetricsTest, CsvHeader) {
  std::ostringstream os;
  write_metrics_csv(os, {IterationMetrics{3, -1.5, 0.25, 2.0, 1.0, 0.125}});
  EXPECT_EQ(os.str(),
            "iteration,mean_return,success_rate,mean_policy_std,mean_abs_u,mean_dist\n"
            "3,-1.5,0.25,2,1,0.125\n");
}

TEST(CheckpointTest, RoundTripBothKinds) {
  const FlowPolicy nf = random_flow_policy(13);
  const BaselinePolicy bl = random_baseline_policy(13);
  for (const Policy* pol : {static_cast<const Policy*>(&nf), static_cast<const Policy*>(&bl)}) {
    const std::unique_ptr<Policy> back = policy_from_json(nlohmann::json::parse(pol->to_json().dump()));
    EXPECT_EQ(back->kind(), pol->kind());
    EXPECT_EQ(back->params(), pol->params());
    const PlantState s = some_state(0.7);
    EXPECT_EQ(back->mean(s), pol->mean(s));
  }
}

TEST(CheckpointTest, NegativeDampingRejected) {
  nlohmann::json j = random_flow_policy(14).to_json();
  j["gains"]["D"] = {{-1.0, 0.0}, {0.0, -1.0}};
  EXPECT_THROW(policy_from_json(j), NumericError);
  j = random_flow_policy(14).to_json();
  j["kind"] = "mystery";
  EXPECT_THROW(policy_from_json(j), ConfigError);
}

}  // namespace
}  // namespace stableflow
