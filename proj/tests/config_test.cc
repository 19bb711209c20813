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

#include "stableflow/config.hpp"

#include <string>

#include <gtest/gtest.h>

namespace stableflow {
namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(ConfigTest, EmptyDocumentGivesDefaults) {
  const ExperimentConfig c = parse_config("");
  EXPECT_EQ(c.task.name, "block2d");
  EXPECT_EQ(c.policy.kind, "nf");
  EXPECT_EQ(c.ppo.max_iters, 100);
  EXPECT_EQ(c.ppo.n_rollouts_per_iter, 15);
  EXPECT_EQ(c.ppo.horizon_steps, 200);
  EXPECT_DOUBLE_EQ(c.ppo.gamma, 0.99);
  EXPECT_DOUBLE_EQ(c.ppo.clip_epsilon, 0.2);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(ConfigTest, ParsesEverySection) {
  const ExperimentConfig c = parse_config(R"(
task:
  name: free-point
  dim: 3
  x_ref: [0.5, -0.25, 1.0]
  start_spread: 0.1
policy:
  kind: baseline
  sigma_init: 1.5
ppo:
  learning_rate: 1.0e-3
  seeds: [7, 8]
reward:
  w_u: 0.5
output:
  dir: elsewhere
  jobs: 2
)");
  EXPECT_EQ(c.task.name, "free-point");
  EXPECT_EQ(c.task.dim, 3);
  EXPECT_EQ(c.task.x_ref, (std::vector<double>{0.5, -0.25, 1.0}));
  EXPECT_EQ(c.policy.kind, "baseline");
  EXPECT_DOUBLE_EQ(c.policy.sigma_init, 1.5);
  EXPECT_DOUBLE_EQ(c.ppo.learning_rate, 1e-3);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{7, 8}));
  EXPECT_DOUBLE_EQ(c.reward.w_u, 0.5);
  EXPECT_EQ(c.output.dir, "elsewhere");
  EXPECT_EQ(c.output.jobs, 2);
}

TEST(ConfigTest, RoundTripIsExact) {
  ExperimentConfig c = parse_config("task: {name: arm2link, x_ref: [0.3, 1.1]}\n");
  c.ppo.learning_rate = 0.1 + 0.2;  // not exactly representable in short decimal
  c.policy.sigma_init = 1.0 / 3.0;
  c.seeds = {5, 18446744073709551615ULL};
  const std::string text = serialize_config(c);
  const ExperimentConfig back = parse_config(text);
  EXPECT_EQ(back.ppo.learning_rate, c.ppo.learning_rate);
  EXPECT_EQ(back.policy.sigma_init, c.policy.sigma_init);
  EXPECT_EQ(back.seeds, c.seeds);
  EXPECT_EQ(back.task.x_ref, c.task.x_ref);
  EXPECT_EQ(serialize_config(back), text);
}

TEST(ConfigTest, UnknownKeyIsRejectedByName) {
  EXPECT_NE(error_of("ppo:\n  learning_rat: 0.1\n").find("unknown key 'ppo.learning_rat'"), std::string::npos);
  EXPECT_NE(error_of("trainer:\n  x: 1\n").find("unknown section 'trainer'"), std::string::npos);
}

TEST(ConfigTest, FieldLevelErrors) {
  EXPECT_NE(error_of("ppo:\n  gamma: 1.5\n").find("ppo.gamma"), std::string::npos);
  EXPECT_NE(error_of("ppo:\n  epochs_per_iter: ten\n").find("ppo.epochs_per_iter"), std::string::npos);
  EXPECT_NE(error_of("policy:\n  kind: mlp\n").find("policy.kind"), std::string::npos);
  EXPECT_NE(error_of("task:\n  name: free-point\n  dim: 2\n  x_ref: [1]\n").find("task.x_ref"), std::string::npos);
  EXPECT_NE(error_of("task:\n  x_ref: 3\n").find("task.x_ref"), std::string::npos);
  EXPECT_NE(error_of("output:\n  jobs: 0\n").find("output.jobs"), std::string::npos);
  EXPECT_NE(error_of("task: [1, 2]\n").find("section 'task'"), std::string::npos);
  EXPECT_NE(error_of("task: {name: [oops\n").find("malformed"), std::string::npos);
}

TEST(ConfigTest, MissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/stableflow.yaml"), ConfigError);
}

}  // namespace
}  // namespace stableflow
