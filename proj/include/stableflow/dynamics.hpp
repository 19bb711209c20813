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

#ifndef STABLEFLOW_DYNAMICS_HPP_
#define STABLEFLOW_DYNAMICS_HPP_

// Manipulator dynamics M(x) xddot + C(x, xdot) xdot + g(x) = u + f_ext,
// integrated with semi-implicit Euler under a zero-order-hold control.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stableflow/controller.hpp"
#include "stableflow/errors.hpp"

namespace stableflow {

class PlantModel {
 public:
  virtual ~PlantModel() = default;

  virtual int dim() const = 0;
  virtual Eigen::MatrixXd mass_matrix(const Eigen::VectorXd& x) const = 0;
  virtual Eigen::MatrixXd coriolis(const Eigen::VectorXd& x, const Eigen::VectorXd& xdot) const = 0;
  virtual Eigen::VectorXd gravity(const Eigen::VectorXd& x) const {
    return Eigen::VectorXd::Zero(x.size());
  }
  virtual Eigen::VectorXd external_force(const Eigen::VectorXd& x, const Eigen::VectorXd& xdot) const {
    (void)xdot;
    return Eigen::VectorXd::Zero(x.size());
  }
  // Potential energy stored in the environment (penalty springs); zero for
  // contact-free plants.
  virtual double elastic_energy(const Eigen::VectorXd& x) const {
    (void)x;
    return 0.0;
  }
  virtual bool is_success(const PlantState& s) const {
    (void)s;
    return false;
  }
};

// Unit-free point mass: M = m I, C = 0, g = 0, no environment.
class FreePointMass : public PlantModel {
 public:
  explicit FreePointMass(int dim, double mass = 1.0) : dim_(dim), mass_(mass) {
    require_shape(dim > 0, "FreePointMass: dim must be positive");
    if (!(mass > 0.0)) throw NumericError("FreePointMass: mass must be positive");
  }
  int dim() const override { return dim_; }
  Eigen::MatrixXd mass_matrix(const Eigen::VectorXd&) const override {
    return mass_ * Eigen::MatrixXd::Identity(dim_, dim_);
  }
  Eigen::MatrixXd coriolis(const Eigen::VectorXd&, const Eigen::VectorXd&) const override {
    return Eigen::MatrixXd::Zero(dim_, dim_);
  }

 private:
  int dim_;
  double mass_;
};

// Planar 2R arm made of uniform rods, gravity compensated.
struct ArmParams {
  double m1 = 0.5, m2 = 0.5;  // kg
  double l1 = 0.5, l2 = 0.5;  // m
};

class TwoLinkArmPlant : public PlantModel {
 public:
  explicit TwoLinkArmPlant(ArmParams p = {}) : p_(p) {
    if (!(p.m1 > 0 && p.m2 > 0 && p.l1 > 0 && p.l2 > 0)) {
      throw NumericError("TwoLinkArmPlant: masses and lengths must be positive");
    }
  }
  int dim() const override { return 2; }
  const ArmParams& params() const { return p_; }

  Eigen::MatrixXd mass_matrix(const Eigen::VectorXd& q) const override {
    const double lc2 = 0.5 * p_.l2;
    const double c2 = std::cos(q[1]);
    const double a = p_.m1 * p_.l1 * p_.l1 / 3.0 + p_.m2 * p_.l1 * p_.l1 + p_.m2 * p_.l2 * p_.l2 / 3.0;
    const double b = p_.m2 * p_.l1 * lc2;
    const double c = p_.m2 * p_.l2 * p_.l2 / 3.0;
    Eigen::MatrixXd M(2, 2);
    M << a + 2.0 * b * c2, c + b * c2, c + b * c2, c;
    return M;
  }

  Eigen::MatrixXd coriolis(const Eigen::VectorXd& q, const Eigen::VectorXd& qd) const override {
    const double h = p_.m2 * p_.l1 * 0.5 * p_.l2 * std::sin(q[1]);
    Eigen::MatrixXd C(2, 2);
    C << -h * qd[1], -h * (qd[0] + qd[1]), h * qd[0], 0.0;
    return C;
  }

 private:
  ArmParams p_;
};

// Square block sliding in the plane towards a slot.
//
// Frame: x_ref = (0, 0) is the block centre fully inserted. The slot is
// 2*half_width + clearance wide, its floor is at y = -half_width and the
// surrounding surface lies at y = slot_depth - half_width. The structure is
// three static boxes (two pillars and the slot floor).
struct BlockGeometry {
  double mass = 1.0;
  double half_width = 0.025;
  double clearance = 0.002;
  double slot_depth = 0.05;
  double success_depth = 0.025;
  double outer_half_width = 0.5;
  double structure_height = 0.2;
  double wall_stiffness = 1e5;
  double wall_damping = 300.0;
  double friction = 0.3;
  double stiction_velocity = 1e-4;
  // Initial-position distribution.
  double start_x = 0.0;
  double start_y = 0.15;
  double start_std_x = 0.05;
  double start_std_y = 0.10;
};

class BlockInsertionPlant : public PlantModel {
 public:
  struct Box {
    double x0, x1, y0, y1;
  };

  explicit BlockInsertionPlant(BlockGeometry g = {}) : g_(g) {
    if (!(g.mass > 0 && g.half_width > 0 && g.clearance > 0 && g.slot_depth > 0 &&
          g.wall_stiffness > 0 && g.wall_damping >= 0 && g.friction >= 0 && g.stiction_velocity > 0)) {
      throw NumericError("BlockInsertionPlant: invalid geometry or contact parameters");
    }
    const double slot = g.half_width + 0.5 * g.clearance;
    const double top = surface_height();
    const double bottom = top - g.structure_height;
    boxes_ = {{-g.outer_half_width, -slot, bottom, top},
              {slot, g.outer_half_width, bottom, top},
              {-slot, slot, bottom, -g.half_width}};
  }

  const BlockGeometry& geometry() const { return g_; }
  const std::vector<Box>& boxes() const { return boxes_; }
  double surface_height() const { return g_.slot_depth - g_.half_width; }
  Eigen::VectorXd x_ref() const { return Eigen::VectorXd::Zero(2); }

  int dim() const override { return 2; }
  Eigen::MatrixXd mass_matrix(const Eigen::VectorXd&) const override {
    return g_.mass * Eigen::MatrixXd::Identity(2, 2);
  }
  Eigen::MatrixXd coriolis(const Eigen::VectorXd&, const Eigen::VectorXd&) const override {
    return Eigen::MatrixXd::Zero(2, 2);
  }

  // Depth of the block's bottom face below the surrounding surface.
  double insertion_depth(const Eigen::VectorXd& x) const {
    return surface_height() - (x[1] - g_.half_width);
  }

  bool is_success(const PlantState& s) const override {
    const double slot = g_.half_width + 0.5 * g_.clearance;
    return std::abs(s.x[0]) <= slot && insertion_depth(s.x) >= g_.success_depth;
  }

  struct Contact {
    int axis;       // 0: normal along x, 1: normal along y
    double sign;    // direction of the outward normal along `axis`
    double depth;   // penetration (m)
  };

  std::vector<Contact> contacts(const Eigen::VectorXd& x) const {
    std::vector<Contact> out;
    const double hw = g_.half_width;
    for (const Box& b : boxes_) {
      const double ox = std::min(x[0] + hw, b.x1) - std::max(x[0] - hw, b.x0);
      const double oy = std::min(x[1] + hw, b.y1) - std::max(x[1] - hw, b.y0);
      if (ox <= 0.0 || oy <= 0.0) continue;
      if (ox < oy) {
        out.push_back({0, x[0] > 0.5 * (b.x0 + b.x1) ? 1.0 : -1.0, ox});
      } else {
        out.push_back({1, x[1] > 0.5 * (b.y0 + b.y1) ? 1.0 : -1.0, oy});
      }
    }
    return out;
  }

  // Penalty normal force plus regularized Coulomb friction, summed over contacts.
  Eigen::VectorXd external_force(const Eigen::VectorXd& x, const Eigen::VectorXd& xdot) const override {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(2);
    for (const Contact& c : contacts(x)) {
      const int t = 1 - c.axis;
      const double depth_rate = -c.sign * xdot[c.axis];
      const double fn = std::max(0.0, g_.wall_stiffness * c.depth + g_.wall_damping * depth_rate);
      f[c.axis] += c.sign * fn;
      const double vt = xdot[t];
      const double slip = std::abs(vt) < g_.stiction_velocity ? vt / g_.stiction_velocity
                                                              : (vt > 0.0 ? 1.0 : -1.0);
      f[t] -= g_.friction * fn * slip;
    }
    return f;
  }

  double elastic_energy(const Eigen::VectorXd& x) const override {
    double e = 0.0;
    for (const Contact& c : contacts(x)) e += 0.5 * g_.wall_stiffness * c.depth * c.depth;
    return e;
  }

  bool collides(const Eigen::VectorXd& x) const { return !contacts(x).empty(); }

  // Start position drawn from the Gaussian around (start_x, start_y),
  // resampled until the block is clear of the structure and the workspace.
  template <class Rng>
  PlantState sample_start(Rng& rng) const {
    std::normal_distribution<double> nx(g_.start_x, g_.start_std_x);
    std::normal_distribution<double> ny(g_.start_y, g_.start_std_y);
    for (int attempt = 0; attempt < 10000; ++attempt) {
      Eigen::VectorXd x(2);
      x << nx(rng), ny(rng);
      const bool inside = std::abs(x[0]) + g_.half_width <= g_.outer_half_width &&
                          x[1] - g_.half_width >= surface_height() &&
                          x[1] <= surface_height() + g_.structure_height * 5.0;
      if (inside) return {x, Eigen::VectorXd::Zero(2)};
    }
    throw NumericError("BlockInsertionPlant: start distribution does not intersect the workspace");
  }

 private:
  BlockGeometry g_;
  std::vector<Box> boxes_;
};

// ---- Integration -----------------------------------------------------------

struct StepResult {
  PlantState state;
  Eigen::VectorXd mean_f_ext;  // average external force over the substeps
  double work = 0.0;           // integral of xdot . f_ext over the step
};

namespace detail {

inline std::string describe(const Eigen::VectorXd& v) {
  std::ostringstream os;
  os << "(";
  for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
  os << ")";
  return os.str();
}

}  // namespace detail

// One control period of `n_sub` semi-implicit Euler substeps (velocity
// first, then position) with `u` held constant.
inline StepResult step_detailed(const PlantModel& plant, const PlantState& state, const Eigen::VectorXd& u,
                                double dt_control, int n_sub) {
  const int d = plant.dim();
  require_shape(state.x.size() == d && state.xdot.size() == d && u.size() == d,
                "step: dimension mismatch");
  if (!(dt_control > 0.0) || n_sub < 1) throw NumericError("step: dt_control > 0 and n_sub >= 1 required");
  if (!u.allFinite()) throw NumericError("step: non-finite control input");
  const double h = dt_control / n_sub;
  StepResult out{state, Eigen::VectorXd::Zero(d), 0.0};
  Eigen::VectorXd& x = out.state.x;
  Eigen::VectorXd& v = out.state.xdot;
  Eigen::VectorXd f = plant.external_force(x, v);
  for (int k = 0; k < n_sub; ++k) {
    const Eigen::MatrixXd M = plant.mass_matrix(x);
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 1e-14 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
      throw NumericError("step: singular mass matrix at x = " + detail::describe(x));
    }
    out.mean_f_ext += f;
    const Eigen::VectorXd rhs = u + f - plant.coriolis(x, v) * v - plant.gravity(x);
    const Eigen::VectorXd v0 = v;
    v += h * ldlt.solve(rhs);
    x += h * v;
    if (!x.allFinite() || !v.allFinite()) {
      throw DivergenceError("step: non-finite state after integration");
    }
    // f is held over the substep; its power is integrated trapezoidally.
    out.work += 0.5 * h * f.dot(v0 + v);
    f = plant.external_force(x, v);
  }
  out.mean_f_ext /= n_sub;
  return out;
}

inline PlantState step(const PlantModel& plant, const PlantState& state, const Eigen::VectorXd& u,
                       double dt_control, int n_sub) {
  return step_detailed(plant, state, u, dt_control, n_sub).state;
}

// ---- Reward ----------------------------------------------------------------

struct RewardConfig {
  double w_q = 1.0;
  double w_log = 1.0;
  double alpha = 1e-5;
  double w_u = 1e-4;
};

// r = -(w_q |e|^2 + w_log log(|e|^2 + alpha) + w_u |u|^2), e = x - x_ref.
inline double reward_fn(const PlantState& state, const Eigen::VectorXd& u, const Eigen::VectorXd& x_ref,
                        const RewardConfig& cfg) {
  const double e2 = (state.x - x_ref).squaredNorm();
  return -(cfg.w_q * e2 + cfg.w_log * std::log(e2 + cfg.alpha) + cfg.w_u * u.squaredNorm());
}

// ---- Rollouts --------------------------------------------------------------

struct Trajectory {
  std::vector<double> times;
  std::vector<PlantState> states;
  std::vector<Eigen::VectorXd> actions;
  std::vector<double> rewards;
  std::vector<double> log_probs;
  std::vector<Eigen::VectorXd> f_ext_trace;  // mean external force per control step
  std::vector<double> work;                  // external work per control step
  bool success = false;

  std::size_t steps() const { return actions.size(); }
};

struct RolloutConfig {
  double horizon = 2.0;
  double dt_control = 0.01;
  int n_substeps = 10;
  double workspace_bound = 10.0;
  RewardConfig reward;
};

inline int horizon_steps(const RolloutConfig& cfg) {
  const double n = cfg.horizon / cfg.dt_control;
  const long steps = std::lround(n);
  if (!(cfg.dt_control > 0.0) || steps < 1 || std::abs(n - static_cast<double>(steps)) > 1e-9 * n) {
    throw NumericError("rollout: horizon must be a positive integral number of control steps");
  }
  return static_cast<int>(steps);
}

// Closed-loop simulation with an arbitrary action source
// `act(const PlantState&, Rng&) -> PolicySample`.
template <class ActionSource, class Rng>
Trajectory rollout(const PlantModel& plant, ActionSource&& act, const PlantState& start,
                   const Eigen::VectorXd& x_ref, const RolloutConfig& cfg, Rng& rng) {
  const int steps = horizon_steps(cfg);
  Trajectory tr;
  tr.times.reserve(steps + 1);
  tr.states.reserve(steps + 1);
  tr.times.push_back(0.0);
  tr.states.push_back(start);
  tr.success = plant.is_success(start);
  for (int k = 0; k < steps; ++k) {
    const PlantState& s = tr.states.back();
    PolicySample a = act(s, rng);
    tr.rewards.push_back(reward_fn(s, a.action, x_ref, cfg.reward));
    StepResult r = step_detailed(plant, s, a.action, cfg.dt_control, cfg.n_substeps);
    if (r.state.x.cwiseAbs().maxCoeff() > cfg.workspace_bound) {
      throw DivergenceError("rollout: state left the workspace bound at t = " +
                            std::to_string((k + 1) * cfg.dt_control) + ", x = " +
                            detail::describe(r.state.x));
    }
    tr.actions.push_back(std::move(a.action));
    tr.log_probs.push_back(a.log_prob);
    tr.f_ext_trace.push_back(std::move(r.mean_f_ext));
    tr.work.push_back(r.work);
    tr.success = tr.success || plant.is_success(r.state);
    tr.states.push_back(std::move(r.state));
    tr.times.push_back((k + 1) * cfg.dt_control);
  }
  return tr;
}

// Normalizing-flow policy rollout: stochastic samples or the deterministic
// controller (log_prob is then the density of the mean).
template <class Rng>
Trajectory rollout(const PlantModel& plant, const PolicyParams& policy, const Gains& gains,
                   const PlantState& start, const RolloutConfig& cfg, bool stochastic, Rng& rng) {
  const Eigen::VectorXd phi_ref = flow_forward(policy.flow, policy.x_ref);
  auto act = [&](const PlantState& s, Rng& g) -> PolicySample {
    if (stochastic) return policy_sample(policy, gains, s, g);
    Eigen::VectorXd u = controller_mean(policy, gains, s, phi_ref);
    return {u, gaussian_log_density(u, u, policy.log_std)};
  };
  return rollout(plant, act, start, policy.x_ref, cfg, rng);
}

// JSON lines, one record per time sample; the final record carries only the
// terminal state.
inline void write_trajectory_jsonl(std::ostream& os, const Trajectory& tr) {
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    nlohmann::json rec;
    rec["t"] = tr.times[k];
    rec["x"] = detail::vector_to_json(tr.states[k].x);
    rec["xdot"] = detail::vector_to_json(tr.states[k].xdot);
    if (k < tr.steps()) {
      rec["u"] = detail::vector_to_json(tr.actions[k]);
      rec["r"] = tr.rewards[k];
      rec["logp"] = tr.log_probs[k];
      rec["fext"] = detail::vector_to_json(tr.f_ext_trace[k]);
    } else {
      rec["u"] = nullptr;
      rec["r"] = nullptr;
      rec["logp"] = nullptr;
      rec["fext"] = nullptr;
    }
    os << rec.dump() << '\n';
  }
}

}  // namespace stableflow

#endif  // STABLEFLOW_DYNAMICS_HPP_
