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

// Command-line front end: train, verify, eval, grid, sweep-sigma.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or configuration
// error, 3 fatal numeric divergence.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stableflow/config.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/experiments.hpp"

namespace fs = std::filesystem;
using namespace stableflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int jobs = 0;
  bool quiet = false;
};

class Logger {
 public:
  explicit Logger(bool quiet) : quiet_(quiet) {}
  void operator()(const std::string& m) const {
    if (quiet_) return;
    std::lock_guard<std::mutex> lock(mu_);
    std::cerr << m << '\n';
  }
  std::function<void(const std::string&)> fn() const {
    return [this](const std::string& m) { (*this)(m); };
  }

 private:
  bool quiet_;
  mutable std::mutex mu_;
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig c = g.config.empty() ? parse_config("") : load_config(g.config);
  if (g.seed) c.seeds = {*g.seed};
  if (g.jobs > 0) c.output.jobs = g.jobs;
  if (const char* env = std::getenv("STABLEFLOW_OUT"); env && *env) {
    c.output.dir = env;
  } else if (!g.out.empty()) {
    c.output.dir = g.out;
  }
  return c;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

void override_task(ExperimentConfig& c, const std::string& task) {
  if (task.empty()) return;
  c.task.name = task;
  c.task.x_ref.clear();
  c.validate();
}

std::string run_name(const std::string& kind, std::uint64_t seed) {
  return kind + "_seed" + std::to_string(seed);
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::optional<int> iters;
  std::string kind;
  std::optional<double> sigma;
};

int cmd_train(const Globals& g, const TrainArgs& a, const Logger& log) {
  ExperimentConfig c = resolve_config(g);
  if (a.iters) c.ppo.max_iters = *a.iters;
  if (!a.kind.empty()) c.policy.kind = a.kind;
  if (a.sigma) c.policy.sigma_init = *a.sigma;
  c.validate();
  const fs::path root(c.output.dir);
  fs::create_directories(root);
  write_file_atomic(root / "config.yaml", serialize_config(c));
  write_json(root / "manifest.json", run_manifest(c, c.seeds, "train"));
  const int n = static_cast<int>(c.seeds.size());
  // Seeds run concurrently when there are several; a single seed spreads its
  // rollouts over the workers instead.
  const int outer = std::min(c.output.jobs, n);
  const int inner = n == 1 ? c.output.jobs : 1;
  std::vector<RunSummary> runs(n);
  detail::parallel_for(n, outer, [&](int i) {
    runs[i] = run_training(c, c.seeds[i], root / run_name(c.policy.kind, c.seeds[i]), log.fn(), inner);
  });
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& r : runs) {
    const auto itr = iterations_to_success(r.metrics);
    summary.push_back({{"seed", r.seed},
                       {"kind", r.kind},
                       {"iterations", r.metrics.size()},
                       {"final_success_rate", r.metrics.empty() ? 0.0 : r.metrics.back().success_rate},
                       {"itr90", itr ? nlohmann::json(*itr) : nlohmann::json(nullptr)},
                       {"dir", r.dir.string()}});
    std::cout << "seed " << r.seed << ": " << r.metrics.size() << " iterations, itr90 "
              << (itr ? std::to_string(*itr) : std::string("none")) << ", outputs in " << r.dir.string() << '\n';
  }
  write_json(root / "train_summary.json", summary);
  return kExitOk;
}

// ---- verify ------------------------------------------------------------------

struct VerifyArgs {
  std::string checkpoint;
  int random_flows = 0;
  std::string task;
  int starts = 10;
};

int cmd_verify(const Globals& g, const VerifyArgs& a, const Logger& log) {
  ExperimentConfig c = resolve_config(g);
  override_task(c, a.task);
  if (a.checkpoint.empty() == (a.random_flows == 0)) {
    throw ConfigError("verify: give exactly one of --checkpoint or --random-flows");
  }
  std::unique_ptr<Policy> ckpt;
  if (!a.checkpoint.empty()) ckpt = load_checkpoint(a.checkpoint);
  VerifyRequest req;
  req.random_flows = a.random_flows;
  req.n_starts = a.starts;
  req.seed = c.seeds.front();
  log("verify: task " + c.task.name + ", " +
      (ckpt ? "checkpoint " + a.checkpoint : std::to_string(a.random_flows) + " random flows"));
  const std::vector<VerificationReport> reports = run_verification(c, ckpt.get(), req, c.output.jobs);
  const fs::path root(c.output.dir);
  nlohmann::json out = reports;
  write_json(root / "verify_report.json", out);
  bool ok = true;
  for (const auto& r : reports) {
    ok = ok && r.pass;
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.property << ": worst violation " << r.worst_violation
              << " (tolerance " << r.tolerance << ")\n";
  }
  std::cout << "report written to " << (root / "verify_report.json").string() << '\n';
  return ok ? kExitOk : kExitVerifyFailed;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string task;
  std::string starts_file;
  int n_random = 0;
};


int cmd_eval(const Globals& g, const EvalArgs& a, const Logger& log) {
  ExperimentConfig c = resolve_config(g);
  override_task(c, a.task);
  const std::unique_ptr<Policy> policy = load_checkpoint(a.checkpoint);
  require_shape(policy->dim() == task_dim(c), "eval: checkpoint dimension does not match the task");
  const Environment env = make_environment(c);
  std::vector<PlantState> starts;
  if (!a.starts_file.empty()) {
    try {
      starts = starts_from_json(nlohmann::json::parse(read_file(a.starts_file)), task_dim(c));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("starts file: ") + e.what());
    }
  } else {
    starts = evaluation_starts(env, a.n_random > 0 ? a.n_random : c.n_eval_starts, c.eval_seed);
  }
  log("eval: " + std::to_string(starts.size()) + " starts");
  RolloutConfig rc = rollout_config(c);
  const std::vector<EvalResult> results = evaluate_policy(env, *policy, starts, rc, c.output.jobs);
  const fs::path root(c.output.dir);
  std::ostringstream traj;
  nlohmann::json per = nlohmann::json::array();
  int successes = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const EvalResult& r = results[i];
    successes += r.success;
    nlohmann::json e{{"start", i},
                     {"x0", detail::vector_to_json(r.start.x)},
                     {"success", r.success},
                     {"diverged", r.diverged},
                     {"final_dist", r.diverged ? nlohmann::json("inf") : nlohmann::json(r.final_dist)}};
    if (r.diverged) e["error"] = r.error;
    per.push_back(e);
    if (!r.diverged) {
      traj << nlohmann::json{{"start", i}}.dump() << '\n';
      write_trajectory_jsonl(traj, r.trajectory);
    }
    std::cout << "start " << i << ": " << (r.success ? "success" : (r.diverged ? "diverged" : "no success"))
              << ", final distance " << r.final_dist << '\n';
  }
  const double rate = results.empty() ? 0.0 : static_cast<double>(successes) / results.size();
  write_file_atomic(root / "eval_trajectories.jsonl", traj.str());
  write_json(root / "eval_summary.json", {{"checkpoint", a.checkpoint}, {"success_rate", rate}, {"starts", per}});
  std::cout << "success rate " << rate << '\n';
  return kExitOk;
}

// ---- grid --------------------------------------------------------------------

struct GridArgs {
  std::string checkpoint;
  int resolution = 101;
  std::vector<double> window;
  int overlay_starts = 5;
};

int cmd_grid(const Globals& g, const GridArgs& a, const Logger& log) {
  ExperimentConfig c = resolve_config(g);
  std::unique_ptr<Policy> loaded;
  if (!a.checkpoint.empty()) {
    loaded = load_checkpoint(a.checkpoint);
  } else {
    ExperimentConfig nf = c;
    nf.policy.kind = "nf";
    loaded = make_initial_policy(nf, c.seeds.front());
  }
  const auto* policy = dynamic_cast<const FlowPolicy*>(loaded.get());
  if (!policy) throw ConfigError("grid: an energy landscape needs a normalizing-flow policy");
  if (policy->dim() != 2 || task_dim(c) != 2) {
    std::cerr << "error: grid: unsupported dimension " << policy->dim() << " (energy grids are planar)\n";
    return kExitVerifyFailed;
  }
  Window w = default_window(c);
  if (!a.window.empty()) {
    if (a.window.size() != 4) throw ConfigError("grid: --window takes x_min x_max y_min y_max");
    w = {a.window[0], a.window[1], a.window[2], a.window[3]};
  }
  if (!(w.x_max > w.x_min && w.y_max > w.y_min)) throw ConfigError("grid: empty window");
  if (a.resolution < 2) throw ConfigError("grid: --resolution must be >= 2");
  log("grid: " + std::to_string(a.resolution) + "x" + std::to_string(a.resolution));
  const EnergyGrid grid = energy_grid(policy->policy_params(), policy->gains(), w, a.resolution);
  const fs::path root(c.output.dir);
  write_file_atomic(root / "grid.csv", to_text([&](std::ostream& os) { write_energy_grid_csv(os, grid); }));

  const Environment env = make_environment(c);
  const std::vector<PlantState> starts = evaluation_starts(env, a.overlay_starts, c.eval_seed);
  const std::vector<EvalResult> results = evaluate_policy(env, *policy, starts, rollout_config(c), c.output.jobs);
  std::ostringstream overlay;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!results[i].diverged) write_overlay_jsonl(overlay, *policy, i, results[i].trajectory);
  }
  write_file_atomic(root / "overlay.jsonl", overlay.str());

  const PolicyParams& p = policy->policy_params();
  const auto [r, col] = grid.argmin();
  write_json(root / "grid_meta.json",
             {{"x_ref", detail::vector_to_json(p.x_ref)},
              {"y_ref", detail::vector_to_json(flow_forward(p.flow, p.x_ref))},
              {"S", detail::matrix_to_json(policy->gains().S())},
              {"window", {w.x_min, w.x_max, w.y_min, w.y_max}},
              {"resolution", a.resolution},
              {"argmin", {grid.xs[col], grid.ys[r]}}});
  std::cout << "grid written to " << (root / "grid.csv").string() << "; minimum at (" << grid.xs[col] << ", "
            << grid.ys[r] << ")\n";
  return kExitOk;
}

// ---- sweep-sigma -------------------------------------------------------------

struct SweepArgs {
  std::vector<double> sigmas = {1.0, 2.0, 3.0};
  std::vector<std::string> kinds = {"nf", "baseline"};
  std::optional<int> iters;
};

int cmd_sweep(const Globals& g, const SweepArgs& a, const Logger& log) {
  ExperimentConfig base = resolve_config(g);
  if (a.iters) base.ppo.max_iters = *a.iters;
  struct Point {
    ExperimentConfig cfg;
    std::uint64_t seed;
    fs::path dir;
  };
  const fs::path root(base.output.dir);
  std::vector<Point> points;
  for (const std::string& kind : a.kinds) {
    for (double sigma : a.sigmas) {
      for (std::uint64_t seed : base.seeds) {
        ExperimentConfig c = base;
        c.policy.kind = kind;
        c.policy.sigma_init = sigma;
        c.validate();
        std::ostringstream name;
        name << kind << "_sigma" << sigma << "_seed" << seed;
        points.push_back({c, seed, root / "sweep" / name.str()});
      }
    }
  }
  fs::create_directories(root);
  write_file_atomic(root / "config.yaml", serialize_config(base));
  write_json(root / "manifest.json", run_manifest(base, base.seeds, "sweep-sigma"));
  std::vector<SweepRow> rows(points.size());
  detail::parallel_for(static_cast<int>(points.size()), base.output.jobs, [&](int i) {
    rows[i] = summarize_run(run_training(points[i].cfg, points[i].seed, points[i].dir, log.fn(), 1));
  });
  write_file_atomic(root / "sweep.csv", to_text([&](std::ostream& os) { write_sweep_csv(os, rows); }));
  write_sweep_csv(std::cout, rows);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stable normalizing-flow controllers: training, verification and analysis"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kVersion));
  Globals g;
  app.add_option("--config", g.config, "YAML experiment configuration")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "output directory (STABLEFLOW_OUT takes precedence)");
  app.add_option("--seed", g.seed, "run a single seed instead of the configured list");
  app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "suppress progress logging");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a policy with PPO for each seed");
  train->add_option("--iters", ta.iters, "override ppo.max_iters")->check(CLI::NonNegativeNumber);
  train->add_option("--kind", ta.kind, "override policy.kind")->check(CLI::IsMember({"nf", "baseline"}));
  train->add_option("--sigma", ta.sigma, "override policy.sigma_init")->check(CLI::PositiveNumber);

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "check stability properties of a checkpoint or random flows");
  auto* vck = verify->add_option("--checkpoint", va.checkpoint, "policy checkpoint (JSON)");
  auto* vrf =
      verify->add_option("--random-flows", va.random_flows, "verify N default-initialized flows")
          ->check(CLI::PositiveNumber);
  vck->excludes(vrf);
  verify->add_option("--task", va.task, "override task.name")
      ->check(CLI::IsMember({"block2d", "arm2link", "free-point"}));
  verify->add_option("--starts", va.starts, "initial states per flow")->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "deterministic rollouts of a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "policy checkpoint (JSON)")->required();
  eval->add_option("--task", ea.task, "override task.name")
      ->check(CLI::IsMember({"block2d", "arm2link", "free-point"}));
  auto* sf = eval->add_option("--starts", ea.starts_file, "JSON array of {x, xdot} start states");
  eval->add_option("--n-random", ea.n_random, "number of starts drawn from the task distribution")
      ->check(CLI::PositiveNumber)
      ->excludes(sf);

  GridArgs ga;
  auto* grid = app.add_subcommand("grid", "potential-energy landscape with trajectory overlays");
  grid->add_option("--checkpoint", ga.checkpoint, "flow checkpoint; default-initialized flow when omitted");
  grid->add_option("--resolution", ga.resolution, "lattice points per axis");
  grid->add_option("--window", ga.window, "x_min x_max y_min y_max")->expected(4);
  grid->add_option("--overlay-starts", ga.overlay_starts, "trajectories to overlay")
      ->check(CLI::NonNegativeNumber);

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep-sigma", "train over initial exploration levels");
  sweep->add_option("--sigmas", sa.sigmas, "sigma_init values")->delimiter(',');
  sweep->add_option("--kinds", sa.kinds, "policy kinds")->delimiter(',')->check(CLI::IsMember({"nf", "baseline"}));
  sweep->add_option("--iters", sa.iters, "override ppo.max_iters")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  const Logger log(g.quiet);
  try {
    if (*train) return cmd_train(g, ta, log);
    if (*verify) return cmd_verify(g, va, log);
    if (*eval) return cmd_eval(g, ea, log);
    if (*grid) return cmd_grid(g, ga, log);
    if (*sweep) return cmd_sweep(g, sa, log);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "fatal: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
