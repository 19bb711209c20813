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

#ifndef STABLEFLOW_CONFIG_HPP_
#define STABLEFLOW_CONFIG_HPP_

// Experiment configuration: one YAML file with the flat sections task,
// policy, ppo, reward and output. Every key is bound to a field through one
// table, which drives parsing, validation of unknown keys and serialization.

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "stableflow/dynamics.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/ppo.hpp"

namespace stableflow {

struct TaskConfig {
  std::string name = "block2d";  // block2d | arm2link | free-point
  int dim = 2;                   // free-point only
  double dt_control = 0.01;
  int n_substeps = 10;
  double workspace_bound = 10.0;
  std::vector<double> x_ref;  // arm2link / free-point; empty means the origin
  double start_spread = 0.5;  // arm2link / free-point: uniform start half-range
  BlockGeometry geometry;
  ArmParams arm;
};

struct PolicyConfig {
  std::string kind = "nf";  // nf | baseline
  int n_flow = 2;
  int n_h = 8;
  double sigma_init = 2.0;
  double s_scale = 1.0;
  double d_scale = 1.0;
  double init_std = 0.1;
};

struct OutputConfig {
  std::string dir = "runs";
  int jobs = 1;
};

struct ExperimentConfig {
  TaskConfig task;
  PolicyConfig policy;
  PPOConfig ppo;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int n_eval_starts = 5;
  std::uint64_t eval_seed = 20260101;
  RewardConfig reward;
  OutputConfig output;

  void validate() const;
};

namespace detail {

using FieldRef = std::variant<double*, int*, std::uint64_t*, std::string*, std::vector<double>*,
                              std::vector<std::uint64_t>*>;

struct Binding {
  std::string section;
  std::string key;
  FieldRef field;
};

inline std::vector<Binding> bindings(ExperimentConfig& c) {
  BlockGeometry& g = c.task.geometry;
  return {
      {"task", "name", &c.task.name},
      {"task", "dim", &c.task.dim},
      {"task", "dt_control", &c.task.dt_control},
      {"task", "n_substeps", &c.task.n_substeps},
      {"task", "workspace_bound", &c.task.workspace_bound},
      {"task", "x_ref", &c.task.x_ref},
      {"task", "start_spread", &c.task.start_spread},
      {"task", "block_mass", &g.mass},
      {"task", "block_half_width", &g.half_width},
      {"task", "clearance", &g.clearance},
      {"task", "slot_depth", &g.slot_depth},
      {"task", "success_depth", &g.success_depth},
      {"task", "wall_stiffness", &g.wall_stiffness},
      {"task", "wall_damping", &g.wall_damping},
      {"task", "friction", &g.friction},
      {"task", "stiction_velocity", &g.stiction_velocity},
      {"task", "start_x", &g.start_x},
      {"task", "start_y", &g.start_y},
      {"task", "start_std_x", &g.start_std_x},
      {"task", "start_std_y", &g.start_std_y},
      {"task", "arm_m1", &c.task.arm.m1},
      {"task", "arm_m2", &c.task.arm.m2},
      {"task", "arm_l1", &c.task.arm.l1},
      {"task", "arm_l2", &c.task.arm.l2},
      {"policy", "kind", &c.policy.kind},
      {"policy", "n_flow", &c.policy.n_flow},
      {"policy", "n_h", &c.policy.n_h},
      {"policy", "sigma_init", &c.policy.sigma_init},
      {"policy", "s_scale", &c.policy.s_scale},
      {"policy", "d_scale", &c.policy.d_scale},
      {"policy", "init_std", &c.policy.init_std},
      {"ppo", "gamma", &c.ppo.gamma},
      {"ppo", "gae_lambda", &c.ppo.gae_lambda},
      {"ppo", "clip_epsilon", &c.ppo.clip_epsilon},
      {"ppo", "epochs_per_iter", &c.ppo.epochs_per_iter},
      {"ppo", "minibatch_size", &c.ppo.minibatch_size},
      {"ppo", "learning_rate", &c.ppo.learning_rate},
      {"ppo", "value_learning_rate", &c.ppo.value_learning_rate},
      {"ppo", "n_rollouts_per_iter", &c.ppo.n_rollouts_per_iter},
      {"ppo", "horizon_steps", &c.ppo.horizon_steps},
      {"ppo", "max_iters", &c.ppo.max_iters},
      {"ppo", "entropy_coef", &c.ppo.entropy_coef},
      {"ppo", "max_grad_norm", &c.ppo.max_grad_norm},
      {"ppo", "checkpoint_every", &c.ppo.checkpoint_every},
      {"ppo", "seeds", &c.seeds},
      {"ppo", "n_eval_starts", &c.n_eval_starts},
      {"ppo", "eval_seed", &c.eval_seed},
      {"reward", "w_q", &c.reward.w_q},
      {"reward", "w_log", &c.reward.w_log},
      {"reward", "alpha", &c.reward.alpha},
      {"reward", "w_u", &c.reward.w_u},
      {"output", "dir", &c.output.dir},
      {"output", "jobs", &c.output.jobs},
  };
}

inline const std::vector<std::string>& sections() {
  static const std::vector<std::string> s = {"task", "policy", "ppo", "reward", "output"};
  return s;
}

template <class T>
T scalar_as(const YAML::Node& n, const std::string& where) {
  if (!n.IsScalar()) throw ConfigError("config: " + where + ": expected a scalar");
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config: " + where + ": cannot parse '" + n.Scalar() + "'");
  }
}

template <class T>
std::vector<T> sequence_as(const YAML::Node& n, const std::string& where) {
  if (!n.IsSequence()) throw ConfigError("config: " + where + ": expected a list");
  std::vector<T> out;
  for (std::size_t i = 0; i < n.size(); ++i) out.push_back(scalar_as<T>(n[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (task.name != "block2d" && task.name != "arm2link" && task.name != "free-point") {
    fail("task.name must be one of block2d, arm2link, free-point (got '" + task.name + "')");
  }
  if (task.name == "free-point" && task.dim < 1) fail("task.dim must be >= 1");
  const int d = task.name == "free-point" ? task.dim : 2;
  if (!task.x_ref.empty() && static_cast<int>(task.x_ref.size()) != d) {
    fail("task.x_ref must have " + std::to_string(d) + " entries");
  }
  if (task.name == "block2d" && !task.x_ref.empty()) fail("task.x_ref is fixed by the block geometry");
  if (!(task.dt_control > 0.0)) fail("task.dt_control must be positive");
  if (task.n_substeps < 1) fail("task.n_substeps must be >= 1");
  if (!(task.workspace_bound > 0.0)) fail("task.workspace_bound must be positive");
  if (!(task.start_spread >= 0.0)) fail("task.start_spread must be >= 0");
  if (policy.kind != "nf" && policy.kind != "baseline") {
    fail("policy.kind must be nf or baseline (got '" + policy.kind + "')");
  }
  if (policy.n_flow < 1) fail("policy.n_flow must be >= 1");
  if (policy.n_h < 1) fail("policy.n_h must be >= 1");
  if (d < 2 && policy.kind == "nf") fail("policy.kind nf needs task dimension >= 2");
  if (!(policy.sigma_init > 0.0)) fail("policy.sigma_init must be positive");
  if (!(policy.s_scale > 0.0)) fail("policy.s_scale must be positive");
  if (!(policy.d_scale > 0.0)) fail("policy.d_scale must be positive");
  if (!(policy.init_std >= 0.0)) fail("policy.init_std must be >= 0");
  try {
    ppo.validate();
  } catch (const ConfigError& e) {
    fail(e.what());
  }
  if (seeds.empty()) fail("ppo.seeds must not be empty");
  if (n_eval_starts < 1) fail("ppo.n_eval_starts must be >= 1");
  if (!(reward.w_q >= 0.0 && reward.w_log >= 0.0 && reward.w_u >= 0.0)) fail("reward weights must be >= 0");
  if (!(reward.alpha > 0.0)) fail("reward.alpha must be positive");
  if (output.dir.empty()) fail("output.dir must not be empty");
  if (output.jobs < 1) fail("output.jobs must be >= 1");
  try {
    BlockInsertionPlant{task.geometry};
    TwoLinkArmPlant{task.arm};
  } catch (const NumericError& e) {
    fail(std::string("task: ") + e.what());
  }
}

// Parses YAML text; unknown sections or keys are errors. The result is
// validated.
inline ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: malformed YAML: ") + e.what());
  }
  ExperimentConfig c;
  if (root.IsNull()) {
    c.validate();
    return c;
  }
  if (!root.IsMap()) throw ConfigError("config: top level must be a mapping of sections");
  const std::vector<detail::Binding> table = detail::bindings(c);
  for (const auto& sec : root) {
    const std::string name = sec.first.as<std::string>();
    if (std::find(detail::sections().begin(), detail::sections().end(), name) == detail::sections().end()) {
      throw ConfigError("config: unknown section '" + name + "'");
    }
    if (sec.second.IsNull()) continue;
    if (!sec.second.IsMap()) throw ConfigError("config: section '" + name + "' must be a mapping");
    for (const auto& kv : sec.second) {
      const std::string key = kv.first.as<std::string>();
      const std::string where = name + "." + key;
      auto it = std::find_if(table.begin(), table.end(),
                             [&](const detail::Binding& b) { return b.section == name && b.key == key; });
      if (it == table.end()) throw ConfigError("config: unknown key '" + where + "'");
      std::visit(
          [&](auto* field) {
            using T = std::remove_pointer_t<decltype(field)>;
            if constexpr (std::is_same_v<T, std::vector<double>>) {
              *field = detail::sequence_as<double>(kv.second, where);
            } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
              *field = detail::sequence_as<std::uint64_t>(kv.second, where);
            } else {
              *field = detail::scalar_as<T>(kv.second, where);
            }
          },
          it->field);
    }
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string serialize_config(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  for (const std::string& sec : detail::sections()) {
    out << YAML::Key << sec << YAML::Value << YAML::BeginMap;
    for (const auto& b : detail::bindings(c)) {
      if (b.section != sec) continue;
      out << YAML::Key << b.key << YAML::Value;
      std::visit(
          [&](auto* field) {
            using T = std::remove_pointer_t<decltype(field)>;
            if constexpr (std::is_same_v<T, std::vector<double>> || std::is_same_v<T, std::vector<std::uint64_t>>) {
              out << YAML::Flow << YAML::BeginSeq;
              for (const auto& v : *field) out << v;
              out << YAML::EndSeq;
            } else {
              out << *field;
            }
          },
          b.field);
    }
    out << YAML::EndMap;
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace stableflow

#endif  // STABLEFLOW_CONFIG_HPP_
