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

#ifndef STABLEFLOW_CONTROLLER_HPP_
#define STABLEFLOW_CONTROLLER_HPP_

// The normalizing-flow control law
//
//     u = -J(x)^T S [phi(x) - phi(x_ref)] - J(x)^T D J(x) xdot
//
// its Lyapunov energy, and the additive-Gaussian stochastic policy built on
// top of it.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stableflow/autodiff.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/flow.hpp"

namespace stableflow {

// Lower bound applied to trainable log standard deviations.
inline const double kLogStdFloor = std::log(1e-3);

// Symmetric positive-definite stiffness S and damping D.
class Gains {
 public:
  Gains(Eigen::MatrixXd stiffness, Eigen::MatrixXd damping)
      : S_(std::move(stiffness)), D_(std::move(damping)) {
    check_spd(S_, "S");
    check_spd(D_, "D");
    require_shape(S_.rows() == D_.rows(), "gains: S and D dimensions differ");
  }

  static Gains identity(int dim) { return scaled(dim, 1.0, 1.0); }
  static Gains scaled(int dim, double s, double d) {
    return Gains(s * Eigen::MatrixXd::Identity(dim, dim), d * Eigen::MatrixXd::Identity(dim, dim));
  }

  const Eigen::MatrixXd& S() const { return S_; }
  const Eigen::MatrixXd& D() const { return D_; }
  int dim() const { return static_cast<int>(S_.rows()); }

 private:
  static void check_spd(const Eigen::MatrixXd& m, const char* name) {
    require_shape(m.rows() == m.cols() && m.rows() > 0,
                  std::string("gains: ") + name + " must be square and nonempty");
    if (!m.allFinite()) throw NumericError(std::string("gains: ") + name + " is not finite");
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw NumericError(std::string("gains: ") + name + " is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
    if (!(eig.eigenvalues().minCoeff() > 0.0)) {
      throw NumericError(std::string("gains: ") + name + " is not positive definite");
    }
  }

  Eigen::MatrixXd S_;
  Eigen::MatrixXd D_;
};

struct PlantState {
  Eigen::VectorXd x;
  Eigen::VectorXd xdot;
};

struct PolicyParams {
  FlowParams flow;
  Eigen::VectorXd log_std;
  Eigen::VectorXd x_ref;

  int dim() const { return flow.dim; }
  // Trainable parameters: flow ParamVector followed by log_std.
  std::size_t num_trainable() const { return flow.num_params() + log_std.size(); }
};

inline PolicyParams make_policy(FlowParams flow, Eigen::VectorXd x_ref, double sigma_init) {
  require_shape(x_ref.size() == flow.dim, "policy: x_ref dimension mismatch");
  require_shape(sigma_init > 0.0, "policy: sigma_init must be positive");
  PolicyParams p;
  p.log_std = Eigen::VectorXd::Constant(flow.dim, std::log(sigma_init));
  p.flow = std::move(flow);
  p.x_ref = std::move(x_ref);
  return p;
}

inline std::vector<double> trainable_params(const PolicyParams& p) {
  std::vector<double> v = flatten(p.flow);
  v.insert(v.end(), p.log_std.data(), p.log_std.data() + p.log_std.size());
  return v;
}

inline void set_trainable_params(PolicyParams& p, std::span<const double> v) {
  require_shape(v.size() == p.num_trainable(), "policy: trainable parameter count mismatch");
  const std::size_t nf = p.flow.num_params();
  p.flow = unflatten(p.flow, v.first(nf));
  for (Eigen::Index i = 0; i < p.log_std.size(); ++i) p.log_std[i] = v[nf + i];
}

namespace detail {

inline void check_state(const PolicyParams& policy, const Gains& gains, const PlantState& s) {
  const int d = policy.dim();
  require_shape(gains.dim() == d, "controller: gains dimension mismatch");
  require_shape(s.x.size() == d && s.xdot.size() == d, "controller: state dimension mismatch");
  require_shape(policy.x_ref.size() == d, "controller: x_ref dimension mismatch");
}

}  // namespace detail

// -J^T (S (phi - phi_ref) + D J xdot), any scalar type. `jac` is row-major d x d.
template <class T>
std::vector<T> controller_law(std::span<const T> phi, std::span<const T> phi_ref,
                              std::span<const T> jac, const Eigen::VectorXd& xdot,
                              const Gains& gains) {
  const int d = static_cast<int>(phi.size());
  const auto& S = gains.S();
  const auto& D = gains.D();
  std::vector<T> diff(d), jv(d), w(d);
  for (int i = 0; i < d; ++i) diff[i] = phi[i] - phi_ref[i];
  for (int i = 0; i < d; ++i) {
    T acc = jac[i * d] * xdot[0];
    for (int j = 1; j < d; ++j) acc = acc + jac[i * d + j] * xdot[j];
    jv[i] = acc;
  }
  for (int i = 0; i < d; ++i) {
    T acc = diff[0] * S(i, 0) + jv[0] * D(i, 0);
    for (int j = 1; j < d; ++j) acc = acc + diff[j] * S(i, j) + jv[j] * D(i, j);
    w[i] = acc;
  }
  std::vector<T> u(d);
  for (int i = 0; i < d; ++i) {
    T acc = jac[i] * w[0];
    for (int k = 1; k < d; ++k) acc = acc + jac[k * d + i] * w[k];
    u[i] = -acc;
  }
  return u;
}

// Same control law with phi(x_ref) supplied by the caller; closed loops
// evaluate it once per rollout instead of once per step.
inline Eigen::VectorXd controller_mean(const PolicyParams& policy, const Gains& gains,
                                       const PlantState& state, const Eigen::VectorXd& phi_ref) {
  detail::check_state(policy, gains, state);
  const FlowEval fe = flow_forward_with_jacobian(policy.flow, state.x);
  const Eigen::VectorXd u =
      -fe.jacobian.transpose() * (gains.S() * (fe.y - phi_ref) + gains.D() * (fe.jacobian * state.xdot));
  if (!u.allFinite()) throw NumericError("controller_mean: non-finite control");
  return u;
}

inline Eigen::VectorXd controller_mean(const PolicyParams& policy, const Gains& gains,
                                       const PlantState& state) {
  detail::check_state(policy, gains, state);
  const FlowEval fe = flow_forward_with_jacobian(policy.flow, state.x);
  const Eigen::VectorXd phi_ref = flow_forward(policy.flow, policy.x_ref);
  const Eigen::VectorXd u =
      -fe.jacobian.transpose() * (gains.S() * (fe.y - phi_ref) + gains.D() * (fe.jacobian * state.xdot));
  if (!u.allFinite()) throw NumericError("controller_mean: non-finite control");
  return u;
}

// V restricted to xdot = 0: 1/2 (phi(x) - phi(x_ref))^T S (phi(x) - phi(x_ref)).
inline double lyapunov_potential(const PolicyParams& policy, const Gains& gains,
                                 const Eigen::VectorXd& x) {
  require_shape(x.size() == policy.dim() && gains.dim() == policy.dim(),
                "lyapunov_potential: dimension mismatch");
  const Eigen::VectorXd diff = flow_forward(policy.flow, x) - flow_forward(policy.flow, policy.x_ref);
  return 0.5 * diff.dot(gains.S() * diff);
}

inline double lyapunov_total(const PolicyParams& policy, const Gains& gains, const PlantState& state,
                             const Eigen::MatrixXd& mass) {
  detail::check_state(policy, gains, state);
  require_shape(mass.rows() == policy.dim() && mass.cols() == policy.dim(),
                "lyapunov_total: mass matrix dimension mismatch");
  return lyapunov_potential(policy, gains, state.x) + 0.5 * state.xdot.dot(mass * state.xdot);
}

struct ControlGradient {
  Eigen::VectorXd u;
  Eigen::MatrixXd du_dtheta;  // d x P, columns in ParamVector order
};

namespace detail {

// Tape pass shared by the gradient operations: theta leaves first (indices
// 0..P-1), then any extra leaves the caller pushes.
struct NestedPass {
  ad::Tape tape;
  std::vector<ad::Var> theta;
  std::vector<ad::Var> u;
};

inline void run_nested_pass(NestedPass& pass, const FlowParams& params, std::span<const double> theta,
                            const Eigen::VectorXd& x, const Eigen::VectorXd& xdot,
                            const Eigen::VectorXd& x_ref, const Gains& gains) {
  using ad::Var;
  using DV = ad::Dual<Var>;
  const int d = params.dim;
  require_shape(d <= ad::kMaxDirections, "grad_through_flow: dimension exceeds kMaxDirections");
  pass.tape.clear();
  pass.theta.clear();
  pass.theta.reserve(theta.size());
  for (double v : theta) pass.theta.push_back(Var::leaf(pass.tape, v));
  const auto pv = unflatten<Var, Var>(params, std::span<const Var>(pass.theta));

  std::vector<DV> xv;
  xv.reserve(d);
  for (int i = 0; i < d; ++i) xv.push_back(DV::variable(Var(x[i]), d, i));
  flow_apply<DV, Var>(pv, xv);

  std::vector<Var> ref(x_ref.data(), x_ref.data() + d);
  flow_apply<Var, Var>(pv, ref);

  std::vector<Var> phi(d), jac(static_cast<std::size_t>(d) * d);
  for (int i = 0; i < d; ++i) {
    phi[i] = xv[i].val;
    for (int j = 0; j < d; ++j) jac[i * d + j] = xv[i].der[j];
  }
  pass.u = controller_law<Var>(phi, ref, jac, xdot, gains);
  for (int i = 0; i < d; ++i) {
    if (!std::isfinite(pass.u[i].value())) throw NumericError("grad_through_flow: non-finite control");
  }
}

}  // namespace detail

// u = controller_mean and its exact derivative with respect to every flow
// parameter, including the parameter dependence of J(x).
inline ControlGradient grad_through_flow(const FlowParams& params, const Eigen::VectorXd& x,
                                         const Eigen::VectorXd& xdot, const Eigen::VectorXd& x_ref,
                                         const Gains& gains) {
  const int d = params.dim;
  require_shape(x.size() == d && xdot.size() == d && x_ref.size() == d && gains.dim() == d,
                "grad_through_flow: dimension mismatch");
  thread_local detail::NestedPass pass;
  const std::vector<double> theta = flatten(params);
  detail::run_nested_pass(pass, params, theta, x, xdot, x_ref, gains);

  ControlGradient out{Eigen::VectorXd(d), Eigen::MatrixXd::Zero(d, static_cast<Eigen::Index>(theta.size()))};
  std::vector<double> adj;
  for (int i = 0; i < d; ++i) {
    out.u[i] = pass.u[i].value();
    if (pass.u[i].is_constant()) continue;
    pass.tape.backward(pass.u[i].index(), adj);
    for (std::size_t k = 0; k < theta.size(); ++k) out.du_dtheta(i, static_cast<Eigen::Index>(k)) = adj[k];
  }
  return out;
}

inline double gaussian_log_density(const Eigen::VectorXd& action, const Eigen::VectorXd& mean,
                                   const Eigen::VectorXd& log_std) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double lp = 0.0;
  for (Eigen::Index i = 0; i < action.size(); ++i) {
    const double z = (action[i] - mean[i]) * std::exp(-log_std[i]);
    lp += -0.5 * z * z - log_std[i] - half_log_2pi;
  }
  return lp;
}

struct PolicySample {
  Eigen::VectorXd action;
  double log_prob;
};

template <class Rng>
PolicySample policy_sample(const PolicyParams& policy, const Gains& gains, const PlantState& state,
                           Rng& rng) {
  const Eigen::VectorXd mean = controller_mean(policy, gains, state);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd action(mean.size());
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    action[i] = mean[i] + std::exp(policy.log_std[i]) * normal(rng);
  }
  return {action, gaussian_log_density(action, mean, policy.log_std)};
}

struct LogProbGradient {
  double log_prob;
  std::vector<double> grad;  // ParamVector followed by log_std
};

inline LogProbGradient policy_log_prob_grad(const PolicyParams& policy, const Gains& gains,
                                            const PlantState& state, const Eigen::VectorXd& action) {
  using ad::Var;
  detail::check_state(policy, gains, state);
  require_shape(action.size() == policy.dim(), "policy_log_prob_grad: action dimension mismatch");
  thread_local detail::NestedPass pass;
  const std::vector<double> theta = flatten(policy.flow);
  detail::run_nested_pass(pass, policy.flow, theta, state.x, state.xdot, policy.x_ref, gains);

  const int d = policy.dim();
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  std::vector<Var> log_std;
  for (int i = 0; i < d; ++i) log_std.push_back(Var::leaf(pass.tape, policy.log_std[i]));
  Var lp(0.0);
  for (int i = 0; i < d; ++i) {
    const Var z = (Var(action[i]) - pass.u[i]) * exp(-log_std[i]);
    lp = lp - z * z * 0.5 - log_std[i] - half_log_2pi;
  }
  if (!std::isfinite(lp.value())) throw NumericError("policy_log_prob_grad: non-finite log density");

  LogProbGradient out{lp.value(), std::vector<double>(theta.size() + d, 0.0)};
  std::vector<double> adj;
  pass.tape.backward(lp.index(), adj);
  for (std::size_t k = 0; k < theta.size(); ++k) out.grad[k] = adj[k];
  for (int i = 0; i < d; ++i) out.grad[theta.size() + i] = adj[log_std[i].index()];
  return out;
}

// ---- JSON ------------------------------------------------------------------

namespace detail {

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const std::string& what) {
  require_shape(j.is_array() && !j.empty(), what + ": expected nonempty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    require_shape(j[r].is_array() && static_cast<Eigen::Index>(j[r].size()) == cols,
                  what + ": ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

inline nlohmann::json gains_to_json(const Gains& g) {
  return {{"S", detail::matrix_to_json(g.S())}, {"D", detail::matrix_to_json(g.D())}};
}

inline Gains gains_from_json(const nlohmann::json& j) {
  return Gains(detail::matrix_from_json(j.at("S"), "gains.S"), detail::matrix_from_json(j.at("D"), "gains.D"));
}

inline void to_json(nlohmann::json& j, const PolicyParams& p) {
  j = {{"flow", p.flow},
       {"log_std", detail::vector_to_json(p.log_std)},
       {"x_ref", detail::vector_to_json(p.x_ref)}};
}

inline void from_json(const nlohmann::json& j, PolicyParams& p) {
  p.flow = j.at("flow").get<FlowParams>();
  p.log_std = detail::vector_from_json(j.at("log_std"));
  p.x_ref = detail::vector_from_json(j.at("x_ref"));
  require_shape(p.log_std.size() == p.flow.dim && p.x_ref.size() == p.flow.dim,
                "policy json: log_std/x_ref dimension mismatch");
  if (!p.log_std.allFinite()) throw NumericError("policy json: log_std must be finite");
}

}  // namespace stableflow

#endif  // STABLEFLOW_CONTROLLER_HPP_
