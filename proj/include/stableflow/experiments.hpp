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

#ifndef STABLEFLOW_EXPERIMENTS_HPP_
#define STABLEFLOW_EXPERIMENTS_HPP_

// Experiment drivers shared by the command-line tool and the acceptance
// suite: task construction, training runs with on-disk artifacts,
// verification batteries, evaluation, energy grids and the sigma sweep.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>
#include "json.hpp"

#include "stableflow/config.hpp"
#include "stableflow/controller.hpp"
#include "stableflow/dynamics.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/flow.hpp"
#include "stableflow/ppo.hpp"
#include "stableflow/verify.hpp"

namespace stableflow {

inline constexpr const char* kVersion = "0.1.0";

// ---- Files -----------------------------------------------------------------

// Writes via a temporary file in the same directory and renames it over the
// target, so readers never observe a truncated file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out << content;
    out.flush();
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <class F>
std::string to_text(F&& writer) {
  std::ostringstream os;
  writer(os);
  return os.str();
}

// ---- Tasks and policies ----------------------------------------------------

inline int task_dim(const ExperimentConfig& c) { return c.task.name == "free-point" ? c.task.dim : 2; }

inline Eigen::VectorXd task_x_ref(const ExperimentConfig& c) {
  if (c.task.name == "block2d") return BlockInsertionPlant(c.task.geometry).x_ref();
  if (c.task.x_ref.empty()) return Eigen::VectorXd::Zero(task_dim(c));
  return Eigen::Map<const Eigen::VectorXd>(c.task.x_ref.data(), static_cast<Eigen::Index>(c.task.x_ref.size()));
}

inline Environment make_environment(const ExperimentConfig& c) {
  const Eigen::VectorXd x_ref = task_x_ref(c);
  if (c.task.name == "block2d") {
    auto block = std::make_shared<const BlockInsertionPlant>(c.task.geometry);
    return {block, [block](std::mt19937_64& r) { return block->sample_start(r); }, x_ref};
  }
  std::shared_ptr<const PlantModel> plant;
  if (c.task.name == "arm2link") {
    plant = std::make_shared<const TwoLinkArmPlant>(c.task.arm);
  } else {
    plant = std::make_shared<const FreePointMass>(c.task.dim);
  }
  const double spread = c.task.start_spread;
  return {plant,
          [x_ref, spread](std::mt19937_64& r) {
            std::uniform_real_distribution<double> u(-spread, spread);
            PlantState s{x_ref, Eigen::VectorXd::Zero(x_ref.size())};
            for (Eigen::Index i = 0; i < s.x.size(); ++i) s.x[i] += u(r);
            return s;
          },
          x_ref};
}

inline RolloutConfig rollout_config(const ExperimentConfig& c) {
  RolloutConfig r;
  r.dt_control = c.task.dt_control;
  r.n_substeps = c.task.n_substeps;
  r.workspace_bound = c.task.workspace_bound;
  r.horizon = c.ppo.horizon_steps * c.task.dt_control;
  r.reward = c.reward;
  return r;
}

inline Gains config_gains(const ExperimentConfig& c) {
  return Gains::scaled(task_dim(c), c.policy.s_scale, c.policy.d_scale);
}

inline std::unique_ptr<Policy> make_initial_policy(const ExperimentConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int d = task_dim(c);
  if (c.policy.kind == "nf") {
    return std::make_unique<FlowPolicy>(
        make_policy(init_flow(d, c.policy.n_flow, c.policy.n_h, rng, c.policy.init_std), task_x_ref(c),
                    c.policy.sigma_init),
        config_gains(c));
  }
  return std::make_unique<BaselinePolicy>(make_baseline_params(d, task_x_ref(c), c.policy.sigma_init, rng));
}

// Checkpoint I/O; any malformed or invariant-violating checkpoint is a
// configuration error.
inline std::unique_ptr<Policy> load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint '" + path.string() + "': " + e.what());
  }
  try {
    return policy_from_json(j);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("checkpoint '" + path.string() + "' rejected: " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Policy& p) {
  write_file_atomic(path, p.to_json().dump(1) + "\n");
}

// ---- Training --------------------------------------------------------------

struct RunSummary {
  std::uint64_t seed = 0;
  std::string kind;
  double sigma_init = 0.0;
  std::vector<IterationMetrics> metrics;
  std::filesystem::path dir;
};

inline nlohmann::json run_manifest(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                                   const std::string& command) {
  const std::string text = serialize_config(c);
  return {{"command", command}, {"version", kVersion}, {"config_hash", fnv1a_hex(text)},
          {"seeds", seeds},     {"config", text}};
}

// One training run; writes metrics.csv, timing.csv, policy.json and
// periodic checkpoints into `dir`. The metrics file is rewritten
// atomically after every iteration.
inline RunSummary run_training(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& dir,
                               const std::function<void(const std::string&)>& log = {}, int jobs = 1) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const Environment env = make_environment(c);
  const std::unique_ptr<Policy> initial = make_initial_policy(c, seed);
  PPOConfig ppo = c.ppo;
  ppo.seed = seed;
  TrainOptions opts;
  opts.rollout = rollout_config(c);
  opts.n_eval_starts = c.n_eval_starts;
  opts.eval_seed = c.eval_seed;
  opts.jobs = jobs;
  opts.log = log;
  RunSummary sum{seed, c.policy.kind, c.policy.sigma_init, {}, dir};
  write_file_atomic(dir / "metrics.csv", to_text([&](std::ostream& os) { write_metrics_csv(os, {}); }));
  opts.on_iteration = [&](const IterationMetrics& m, const Policy& p) {
    sum.metrics.push_back(m);
    write_file_atomic(dir / "metrics.csv", to_text([&](std::ostream& os) { write_metrics_csv(os, sum.metrics); }));
    write_file_atomic(dir / "timing.csv", to_text([&](std::ostream& os) { write_timing_csv(os, sum.metrics); }));
    if (ppo.checkpoint_every > 0 && (m.iteration + 1) % ppo.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "checkpoint_%04d.json", m.iteration);
      save_checkpoint(dir / "checkpoints" / name, p);
    }
    if (log) {
      std::ostringstream os;
      os << "seed " << seed << " iteration " << m.iteration << ": return " << m.mean_return << ", success "
         << m.success_rate << ", std " << m.mean_policy_std;
      log(os.str());
    }
  };
  const TrainResult res = train(env, *initial, ppo, opts);
  save_checkpoint(dir / "policy.json", *res.policy);
  return sum;
}

// ---- Verification battery --------------------------------------------------

struct VerifyRequest {
  int random_flows = 0;       // used when no checkpoint is given
  int n_starts = 10;
  std::uint64_t seed = 0;     // first flow seed; flows use seed, seed+1, ...
  VerifyConfig settings;
  int structure_trajectories = 10;
};

inline std::vector<PlantState> verification_starts(const ExperimentConfig& c, const Environment& env, int n,
                                                   std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed ^ 0x7374617274ULL));
  std::vector<PlantState> out;
  for (int i = 0; i < n; ++i) {
    PlantState s = env.sample_start(rng);
    if (c.task.name != "block2d") {
      // Non-zero initial velocities exercise the kinetic part of V.
      std::uniform_real_distribution<double> u(-0.5, 0.5);
      for (Eigen::Index k = 0; k < s.xdot.size(); ++k) s.xdot[k] = u(rng);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Flow policies to certify: the checkpoint, or `random_flows` default-init
// flows with seeds seed, seed+1, ...
inline std::vector<FlowPolicy> verification_policies(const ExperimentConfig& c, const Policy* checkpoint,
                                                     const VerifyRequest& req) {
  std::vector<FlowPolicy> out;
  if (checkpoint) {
    const auto* nf = dynamic_cast<const FlowPolicy*>(checkpoint);
    if (!nf) throw ConfigError("verify: only normalizing-flow checkpoints carry a stability certificate");
    require_shape(nf->dim() == task_dim(c), "verify: checkpoint dimension does not match the task");
    out.push_back(*nf);
    return out;
  }
  if (req.random_flows < 1) throw ConfigError("verify: need a checkpoint or --random-flows N with N > 0");
  ExperimentConfig flow_cfg = c;
  flow_cfg.policy.kind = "nf";
  for (int i = 0; i < req.random_flows; ++i) {
    auto p = make_initial_policy(flow_cfg, req.seed + static_cast<std::uint64_t>(i));
    out.push_back(dynamic_cast<const FlowPolicy&>(*p));
  }
  return out;
}

// Decrease + convergence (free space), passivity (contact task), skew
// symmetry (arm) and full-rank Jacobian (planar flows). Reports of the same
// property are merged by worst violation.
inline std::vector<VerificationReport> run_verification(const ExperimentConfig& c, const Policy* checkpoint,
                                                        const VerifyRequest& req, int jobs = 1) {
  const Environment env = make_environment(c);
  const std::vector<FlowPolicy> policies = verification_policies(c, checkpoint, req);
  const std::size_t n = policies.size();
  const bool contact = c.task.name == "block2d";
  std::vector<std::vector<VerificationReport>> per(n);
  detail::parallel_for(static_cast<int>(n), jobs, [&](int i) {
    const PolicyParams& p = policies[i].policy_params();
    const Gains& g = policies[i].gains();
    const std::vector<PlantState> starts = verification_starts(c, env, req.n_starts, req.seed + i);
    auto tag = [&](VerificationReport r) {
      if (!r.witness.is_object()) r.witness = nlohmann::json::object();
      r.witness["policy"] = i;
      return r;
    };
    if (contact) {
      per[i].push_back(tag(verify_passivity(*env.plant, p, g, starts, req.settings)));
    } else {
      per[i].push_back(tag(verify_lyapunov_decrease(*env.plant, p, g, starts, req.settings)));
      per[i].push_back(tag(verify_convergence(*env.plant, p, g, starts, req.settings)));
    }
    if (p.dim() == 2) {
      const Window w{p.x_ref[0] - 1.0, p.x_ref[0] + 1.0, p.x_ref[1] - 1.0, p.x_ref[1] + 1.0};
      per[i].push_back(tag(verify_jacobian_rank(p.flow, w, 21)));
    }
  });
  std::vector<VerificationReport> out;
  for (std::size_t k = 0; k < per.front().size(); ++k) {
    std::vector<VerificationReport> same;
    for (const auto& v : per) same.push_back(v[k]);
    out.push_back(merge_reports(same));
  }
  if (c.task.name == "arm2link") {
    // Skew symmetry along closed-loop trajectories sampled at 20 kHz.
    std::vector<VerificationReport> skew;
    RolloutConfig rc;
    rc.horizon = 1.0;
    rc.dt_control = 5e-5;
    rc.n_substeps = 1;
    rc.workspace_bound = c.task.workspace_bound;
    for (int t = 0; t < req.structure_trajectories; ++t) {
      const FlowPolicy& fp = policies[t % n];
      std::mt19937_64 rng(splitmix64(req.seed + 1000 + t));
      PlantState s = env.sample_start(rng);
      std::uniform_real_distribution<double> u(-2.0, 2.0);
      for (Eigen::Index k = 0; k < s.xdot.size(); ++k) s.xdot[k] = u(rng);
      try {
        skew.push_back(verify_structure(*env.plant, rollout(*env.plant, fp.policy_params(), fp.gains(), s, rc, false, rng)));
      } catch (const NumericError& e) {
        VerificationReport r{"skew_symmetry", true, 0.0, 1e-6, {}};
        r.record_failure(e.what(), {{"trajectory", t}});
        skew.push_back(r);
      }
    }
    if (!skew.empty()) out.push_back(merge_reports(skew));
  }
  return out;
}

// ---- Evaluation ------------------------------------------------------------

struct EvalResult {
  PlantState start;
  bool success = false;
  bool diverged = false;
  double final_dist = 0.0;
  std::string error;
  Trajectory trajectory;
};

inline std::vector<EvalResult> evaluate_policy(const Environment& env, const Policy& policy,
                                               const std::vector<PlantState>& starts, const RolloutConfig& rc,
                                               int jobs = 1) {
  std::vector<EvalResult> out(starts.size());
  detail::parallel_for(static_cast<int>(starts.size()), jobs, [&](int i) {
    EvalResult& r = out[i];
    r.start = starts[i];
    std::mt19937_64 rng(0);
    try {
      r.trajectory = policy_rollout(env, policy, starts[i], rc, false, rng);
      r.success = r.trajectory.success;
      r.final_dist = (r.trajectory.states.back().x - env.x_ref).norm();
    } catch (const NumericError& e) {
      r.diverged = true;
      r.error = e.what();
      r.final_dist = std::numeric_limits<double>::infinity();
    }
  });
  return out;
}

inline std::vector<PlantState> starts_from_json(const nlohmann::json& j, int dim) {
  if (!j.is_array()) throw ConfigError("starts file: expected a JSON array");
  std::vector<PlantState> out;
  try {
    for (const auto& e : j) {
      PlantState s{detail::vector_from_json(e.at("x")), Eigen::VectorXd::Zero(dim)};
      if (e.contains("xdot")) s.xdot = detail::vector_from_json(e.at("xdot"));
      if (s.x.size() != dim || s.xdot.size() != dim) throw ConfigError("starts file: state dimension mismatch");
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("starts file: ") + e.what());
  }
  return out;
}

// ---- Energy grid and overlays ----------------------------------------------

// One record per sample: x-space and y-space (y = phi(x)) positions and the
// potential V|xdot=0 at x.
inline void write_overlay_jsonl(std::ostream& os, const FlowPolicy& policy, std::size_t start_index,
                                const Trajectory& tr) {
  const PolicyParams& p = policy.policy_params();
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    const Eigen::VectorXd& x = tr.states[k].x;
    nlohmann::json rec{{"start", start_index},
                       {"t", tr.times[k]},
                       {"x", detail::vector_to_json(x)},
                       {"y", detail::vector_to_json(flow_forward(p.flow, x))},
                       {"V", lyapunov_potential(p, policy.gains(), x)}};
    os << rec.dump() << '\n';
  }
}

// Default plotting window around x_ref for each task.
inline Window default_window(const ExperimentConfig& c) {
  const Eigen::VectorXd r = task_x_ref(c);
  if (c.task.name == "block2d") return {r[0] - 0.2, r[0] + 0.2, r[1] - 0.1, r[1] + 0.3};
  return {r[0] - 1.0, r[0] + 1.0, r[1] - 1.0, r[1] + 1.0};
}

// ---- Sigma sweep -----------------------------------------------------------

struct SweepRow {
  std::string policy_kind;
  double sigma_init = 0.0;
  std::uint64_t seed = 0;
  std::optional<int> itr90;
  double mean_dist = 0.0;   // over the first 10 iterations
  double mean_abs_u = 0.0;  // over the first 10 iterations
};

inline SweepRow summarize_run(const RunSummary& run) {
  SweepRow row{run.kind, run.sigma_init, run.seed, iterations_to_success(run.metrics), 0.0, 0.0};
  const std::size_t n = std::min<std::size_t>(10, run.metrics.size());
  for (std::size_t i = 0; i < n; ++i) {
    row.mean_dist += run.metrics[i].mean_dist / n;
    row.mean_abs_u += run.metrics[i].mean_abs_u / n;
  }
  return row;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os.precision(17);
  os << "policy_kind,sigma_init,seed,itr90,mean_dist,mean_abs_u\n";
  for (const auto& r : rows) {
    os << r.policy_kind << ',' << r.sigma_init << ',' << r.seed << ',';
    if (r.itr90) os << *r.itr90;
    os << ',' << r.mean_dist << ',' << r.mean_abs_u << '\n';
  }
}

}  // namespace stableflow

#endif  // STABLEFLOW_EXPERIMENTS_HPP_
