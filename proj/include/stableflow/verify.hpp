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

#ifndef STABLEFLOW_VERIFY_HPP_
#define STABLEFLOW_VERIFY_HPP_

// Numerical certificates for the closed loop: Lyapunov decrease, convergence
// to x_ref, passivity under external force, and the structural properties
// the argument relies on (skew symmetry of Mdot - 2C, full-rank J).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "stableflow/controller.hpp"
#include "stableflow/dynamics.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/flow.hpp"

namespace stableflow {

struct VerificationReport {
  std::string property;
  bool pass = true;
  double worst_violation = 0.0;
  double tolerance = 0.0;
  nlohmann::json witness;  // where the worst case occurred

  // Folds `violation` in, keeping the witness of the worst case.
  void record(double violation, const nlohmann::json& where) {
    if (witness.is_null() || violation > worst_violation) {
      worst_violation = violation;
      witness = where;
    }
    pass = worst_violation <= tolerance;
  }
  void record_failure(const std::string& reason, const nlohmann::json& where) {
    worst_violation = std::numeric_limits<double>::infinity();
    witness = where;
    witness["error"] = reason;
    pass = false;
  }
};

inline void to_json(nlohmann::json& j, const VerificationReport& r) {
  j = nlohmann::json{{"property", r.property},
                     {"pass", r.pass},
                     {"worst_violation", std::isfinite(r.worst_violation) ? nlohmann::json(r.worst_violation)
                                                                          : nlohmann::json("inf")},
                     {"tolerance", r.tolerance},
                     {"witness", r.witness}};
}

// Merges reports of the same property by worst violation.
inline VerificationReport merge_reports(const std::vector<VerificationReport>& rs) {
  require_shape(!rs.empty(), "merge_reports: nothing to merge");
  VerificationReport out = rs.front();
  for (const auto& r : rs) {
    if ((!r.pass && out.pass) || (r.pass == out.pass && r.worst_violation > out.worst_violation)) out = r;
  }
  return out;
}

struct VerifyConfig {
  double dt_physics = 1e-4;     // the controller is re-evaluated every physics step
  double check_interval = 0.01;  // V sampled at the control rate
  double eps_int = 1e-6;        // J per check interval
  double horizon = 2.0;
  double horizon_long = 30.0;
  double dt_long = 1e-3;  // physics step for the long convergence runs
  double delta_pos = 1e-3;
  double delta_vel = 1e-3;
  double workspace_bound = 10.0;
};

namespace detail {

inline nlohmann::json state_witness(std::size_t start, std::size_t check, double t, const PlantState& s) {
  return {{"start", start}, {"check", check}, {"t", t}, {"x", vector_to_json(s.x)}, {"xdot", vector_to_json(s.xdot)}};
}

inline int checked_ratio(double a, double b, const char* what) {
  const double n = a / b;
  const long r = std::lround(n);
  if (!(b > 0.0) || r < 1 || std::abs(n - static_cast<double>(r)) > 1e-9 * n) {
    throw ConfigError(std::string("verify: ") + what + " must be a positive integer multiple of the step");
  }
  return static_cast<int>(r);
}

// Deterministic closed loop with the controller evaluated every physics step.
// visit(check_index, t, state, cumulative external work) is called at t = 0
// and every `every` steps.
template <class Visit>
void closed_loop(const PlantModel& plant, const PolicyParams& policy, const Gains& gains, const PlantState& start,
                 double horizon, double h, int every, double bound, Visit&& visit) {
  const int n_checks = checked_ratio(horizon, h * every, "horizon");
  PlantState s = start;
  double work = 0.0;
  const Eigen::VectorXd phi_ref = flow_forward(policy.flow, policy.x_ref);
  visit(0, 0.0, s, work);
  for (int c = 1; c <= n_checks; ++c) {
    for (int k = 0; k < every; ++k) {
      const Eigen::VectorXd u = controller_mean(policy, gains, s, phi_ref);
      StepResult r = step_detailed(plant, s, u, h, 1);
      if (r.state.x.cwiseAbs().maxCoeff() > bound) {
        throw DivergenceError("closed loop left the workspace bound, x = " + describe(r.state.x));
      }
      work += r.work;
      s = std::move(r.state);
    }
    visit(c, c * every * h, s, work);
  }
}

}  // namespace detail

// V(t_{k+1}) <= V(t_k) + eps_int on a plant without external force; the
// reported violation is the largest jump V(t_{k+1}) - V(t_k).
inline VerificationReport verify_lyapunov_decrease(const PlantModel& plant, const PolicyParams& policy,
                                                   const Gains& gains, const std::vector<PlantState>& starts,
                                                   const VerifyConfig& cfg = {}) {
  VerificationReport rep{"lyapunov_decrease", true, -std::numeric_limits<double>::infinity(), cfg.eps_int, {}};
  const int every = detail::checked_ratio(cfg.check_interval, cfg.dt_physics, "check_interval");
  for (std::size_t i = 0; i < starts.size(); ++i) {
    double v_prev = 0.0;
    try {
      detail::closed_loop(plant, policy, gains, starts[i], cfg.horizon, cfg.dt_physics, every, cfg.workspace_bound,
                          [&](int c, double t, const PlantState& s, double work) {
                            if (work != 0.0) throw Error("verify_lyapunov_decrease: plant applies external force");
                            const double v = lyapunov_total(policy, gains, s, plant.mass_matrix(s.x));
                            if (c > 0) rep.record(v - v_prev, detail::state_witness(i, c, t, s));
                            v_prev = v;
                          });
    } catch (const NumericError& e) {
      rep.record_failure(e.what(), {{"start", i}});
      return rep;
    }
  }
  if (rep.witness.is_null()) rep.worst_violation = 0.0;
  return rep;
}

// V(start) - V(after one check interval) under the deterministic controller.
inline double lyapunov_drop(const PlantModel& plant, const PolicyParams& policy, const Gains& gains,
                            const PlantState& start, const VerifyConfig& cfg = {}) {
  const int every = detail::checked_ratio(cfg.check_interval, cfg.dt_physics, "check_interval");
  double v0 = 0.0, v1 = 0.0;
  detail::closed_loop(plant, policy, gains, start, cfg.check_interval, cfg.dt_physics, every, cfg.workspace_bound,
                      [&](int c, double, const PlantState& s, double) {
                        (c == 0 ? v0 : v1) = lyapunov_total(policy, gains, s, plant.mass_matrix(s.x));
                      });
  return v0 - v1;
}

// ||x(T) - x_ref|| < delta_pos and ||xdot(T)|| < delta_vel after horizon_long.
// The violation is max(|e_x| / delta_pos, |e_v| / delta_vel), tolerance 1.
inline VerificationReport verify_convergence(const PlantModel& plant, const PolicyParams& policy,
                                             const Gains& gains, const std::vector<PlantState>& starts,
                                             const VerifyConfig& cfg = {}) {
  VerificationReport rep{"convergence", true, 0.0, 1.0, {}};
  const int steps = detail::checked_ratio(cfg.horizon_long, cfg.dt_long, "horizon_long");
  for (std::size_t i = 0; i < starts.size(); ++i) {
    try {
      detail::closed_loop(plant, policy, gains, starts[i], cfg.horizon_long, cfg.dt_long, steps, cfg.workspace_bound,
                          [&](int c, double t, const PlantState& s, double) {
                            if (c == 0) return;
                            const double ex = (s.x - policy.x_ref).norm(), ev = s.xdot.norm();
                            nlohmann::json w = detail::state_witness(i, c, t, s);
                            w["position_error"] = ex;
                            w["velocity_error"] = ev;
                            rep.record(std::max(ex / cfg.delta_pos, ev / cfg.delta_vel), w);
                          });
    } catch (const NumericError& e) {
      rep.record_failure(e.what(), {{"start", i}});
      return rep;
    }
  }
  return rep;
}

// V(t) - V(0) <= W(t) + eps_int * (t / check_interval) with W the work done by
// the external force. The violation is the largest excess over the work.
inline VerificationReport verify_passivity(const PlantModel& plant, const PolicyParams& policy, const Gains& gains,
                                           const std::vector<PlantState>& starts, const VerifyConfig& cfg = {}) {
  VerificationReport rep{"passivity", true, -std::numeric_limits<double>::infinity(), 0.0, {}};
  const int every = detail::checked_ratio(cfg.check_interval, cfg.dt_physics, "check_interval");
  for (std::size_t i = 0; i < starts.size(); ++i) {
    double v0 = 0.0;
    try {
      detail::closed_loop(plant, policy, gains, starts[i], cfg.horizon, cfg.dt_physics, every, cfg.workspace_bound,
                          [&](int c, double t, const PlantState& s, double work) {
                            const double v = lyapunov_total(policy, gains, s, plant.mass_matrix(s.x));
                            if (c == 0) {
                              v0 = v;
                              return;
                            }
                            nlohmann::json w = detail::state_witness(i, c, t, s);
                            w["work"] = work;
                            rep.record(v - v0 - work - cfg.eps_int * c, w);
                          });
    } catch (const NumericError& e) {
      rep.record_failure(e.what(), {{"start", i}});
      return rep;
    }
  }
  if (rep.witness.is_null()) rep.worst_violation = 0.0;
  return rep;
}

// |xdot^T (Mdot - 2C) xdot| / (1 + |xdot|^2) along a sampled trajectory, with
// Mdot and xdot from central differences of the samples.
inline VerificationReport verify_structure(const PlantModel& plant, const std::vector<double>& times,
                                           const std::vector<PlantState>& states, double tolerance = 1e-6) {
  require_shape(times.size() == states.size(), "verify_structure: times and states differ in length");
  VerificationReport rep{"skew_symmetry", true, 0.0, tolerance, {}};
  for (std::size_t k = 1; k + 1 < states.size(); ++k) {
    const double dt = times[k + 1] - times[k - 1];
    require_shape(dt > 0.0, "verify_structure: times must increase");
    const Eigen::VectorXd v = (states[k + 1].x - states[k - 1].x) / dt;
    const Eigen::MatrixXd mdot = (plant.mass_matrix(states[k + 1].x) - plant.mass_matrix(states[k - 1].x)) / dt;
    const Eigen::MatrixXd n = mdot - 2.0 * plant.coriolis(states[k].x, v);
    const double q = std::abs(v.dot(n * v)) / (1.0 + v.squaredNorm());
    rep.record(q, detail::state_witness(0, k, times[k], {states[k].x, v}));
  }
  return rep;
}

inline VerificationReport verify_structure(const PlantModel& plant, const Trajectory& tr, double tolerance = 1e-6) {
  return verify_structure(plant, tr.times, tr.states, tolerance);
}

// Axis-aligned planar window.
struct Window {
  double x_min = -1.0, x_max = 1.0, y_min = -1.0, y_max = 1.0;
};

// Smallest singular value of J over a lattice; the violation is its inverse
// (condition-style), so the tolerance 1/sigma_floor encodes sigma_min > floor.
inline VerificationReport verify_jacobian_rank(const FlowParams& flow, const Window& w, int resolution,
                                               double sigma_floor = 1e-8) {
  require_shape(flow.dim == 2, "verify_jacobian_rank: unsupported dimension (grid defined for d = 2)");
  require_shape(resolution >= 2, "verify_jacobian_rank: resolution must be >= 2");
  VerificationReport rep{"jacobian_full_rank", true, 0.0, 1.0 / sigma_floor, {}};
  for (int r = 0; r < resolution; ++r) {
    for (int c = 0; c < resolution; ++c) {
      Eigen::Vector2d x(w.x_min + (w.x_max - w.x_min) * c / (resolution - 1),
                        w.y_min + (w.y_max - w.y_min) * r / (resolution - 1));
      const Eigen::MatrixXd J = flow_jacobian(flow, x);
      const double smin = Eigen::JacobiSVD<Eigen::MatrixXd>(J).singularValues().minCoeff();
      rep.record(smin > 0.0 ? 1.0 / smin : std::numeric_limits<double>::infinity(),
                 {{"x", {x[0], x[1]}}, {"sigma_min", smin}});
    }
  }
  return rep;
}

// V restricted to xdot = 0 on a lattice; values[r][c] sits at (xs[c], ys[r]).
struct EnergyGrid {
  std::vector<double> xs, ys;
  std::vector<std::vector<double>> values;

  // (row, col) of the smallest value.
  std::pair<int, int> argmin() const {
    std::pair<int, int> best{0, 0};
    for (std::size_t r = 0; r < values.size(); ++r) {
      for (std::size_t c = 0; c < values[r].size(); ++c) {
        if (values[r][c] < values[best.first][best.second]) best = {static_cast<int>(r), static_cast<int>(c)};
      }
    }
    return best;
  }
  // Lattice point nearest to p.
  std::pair<int, int> nearest(const Eigen::Vector2d& p) const {
    auto closest = [](const std::vector<double>& v, double q) {
      return static_cast<int>(std::min_element(v.begin(), v.end(), [q](double a, double b) {
                                return std::abs(a - q) < std::abs(b - q);
                              }) -
                              v.begin());
    };
    return {closest(ys, p[1]), closest(xs, p[0])};
  }
};

inline EnergyGrid energy_grid(const PolicyParams& policy, const Gains& gains, const Window& w, int resolution = 101) {
  require_shape(policy.dim() == 2, "energy_grid: unsupported dimension (grid defined for d = 2)");
  require_shape(resolution >= 2, "energy_grid: resolution must be >= 2");
  EnergyGrid g;
  for (int i = 0; i < resolution; ++i) {
    g.xs.push_back(w.x_min + (w.x_max - w.x_min) * i / (resolution - 1));
    g.ys.push_back(w.y_min + (w.y_max - w.y_min) * i / (resolution - 1));
  }
  g.values.assign(resolution, std::vector<double>(resolution));
  for (int r = 0; r < resolution; ++r) {
    for (int c = 0; c < resolution; ++c) {
      g.values[r][c] = lyapunov_potential(policy, gains, Eigen::Vector2d(g.xs[c], g.ys[r]));
    }
  }
  return g;
}

// Header row: x coordinates; first column: y coordinates.
inline void write_energy_grid_csv(std::ostream& os, const EnergyGrid& g) {
  os.precision(17);
  os << "y\\x";
  for (double x : g.xs) os << ',' << x;
  os << '\n';
  for (std::size_t r = 0; r < g.ys.size(); ++r) {
    os << g.ys[r];
    for (double v : g.values[r]) os << ',' << v;
    os << '\n';
  }
}

}  // namespace stableflow

#endif  // STABLEFLOW_VERIFY_HPP_
