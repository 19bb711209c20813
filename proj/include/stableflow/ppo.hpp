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

#ifndef STABLEFLOW_PPO_HPP_
#define STABLEFLOW_PPO_HPP_

// Clipped-surrogate policy optimisation shared by the normalizing-flow policy
// and a plain dense-network Gaussian baseline.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "stableflow/controller.hpp"
#include "stableflow/dynamics.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/flow.hpp"

namespace stableflow {

struct PPOConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  int epochs_per_iter = 10;
  int minibatch_size = 64;
  double learning_rate = 3e-4;
  double value_learning_rate = 1e-3;
  int n_rollouts_per_iter = 15;
  int horizon_steps = 200;
  int max_iters = 100;
  std::uint64_t seed = 0;
  double entropy_coef = 0.0;
  double max_grad_norm = 0.5;  // global policy-gradient norm clip, 0 disables
  int checkpoint_every = 0;  // 0 disables checkpoints

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("ppo." + m); };
    if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("gae_lambda must lie in [0, 1]");
    if (!(clip_epsilon > 0.0)) fail("clip_epsilon must be positive");
    if (epochs_per_iter < 1) fail("epochs_per_iter must be >= 1");
    if (minibatch_size < 1) fail("minibatch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be >= 0");
    if (!(value_learning_rate >= 0.0) || !std::isfinite(value_learning_rate)) {
      fail("value_learning_rate must be >= 0");
    }
    if (n_rollouts_per_iter < 1) fail("n_rollouts_per_iter must be >= 1");
    if (horizon_steps < 1) fail("horizon_steps must be >= 1");
    if (max_iters < 0) fail("max_iters must be >= 0");
    if (!(entropy_coef >= 0.0) || !std::isfinite(entropy_coef)) fail("entropy_coef must be >= 0");
    if (!(max_grad_norm >= 0.0)) fail("max_grad_norm must be >= 0");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  }
};

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---- Dense networks --------------------------------------------------------

// Fully connected tanh network with a linear output layer. Parameters live in
// one flat vector: for each layer W (row-major, out x in) then b.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    require_shape(sizes_.size() >= 2, "Mlp: need at least input and output sizes");
    for (int s : sizes_) require_shape(s > 0, "Mlp: layer sizes must be positive");
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) n += sizes_[l + 1] * (sizes_[l] + 1);
    params_.assign(n, 0.0);
  }

  // Weights ~ N(0, 1/fan_in), the output layer additionally scaled by
  // `out_scale`; zero biases.
  template <class Rng>
  static Mlp random(std::vector<int> sizes, Rng& rng, double out_scale = 1.0) {
    Mlp m(std::move(sizes));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < m.sizes_.size(); ++l) {
      const int in = m.sizes_[l], out = m.sizes_[l + 1];
      const double std = (l + 2 == m.sizes_.size() ? out_scale : 1.0) / std::sqrt(in);
      for (int k = 0; k < in * out; ++k) m.params_[off + k] = std * normal(rng);
      off += static_cast<std::size_t>(out) * (in + 1);
    }
    return m;
  }

  const std::vector<int>& sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  std::size_t num_params() const { return params_.size(); }
  const std::vector<double>& params() const { return params_; }
  void set_params(std::span<const double> p) {
    require_shape(p.size() == params_.size(), "Mlp: parameter count mismatch");
    params_.assign(p.begin(), p.end());
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& in) const {
    std::vector<Eigen::VectorXd> acts;
    return forward_cached(in, acts);
  }

  // grad += d(g_out . f(in)) / d(params).
  void backward(const Eigen::VectorXd& in, const Eigen::VectorXd& g_out, std::span<double> grad) const {
    require_shape(grad.size() == params_.size(), "Mlp: gradient size mismatch");
    require_shape(g_out.size() == output_dim(), "Mlp: output gradient size mismatch");
    std::vector<Eigen::VectorXd> acts;
    forward_cached(in, acts);
    Eigen::VectorXd delta = g_out;
    const std::size_t n_layers = sizes_.size() - 1;
    std::vector<std::size_t> offsets(n_layers);
    std::size_t off = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
      offsets[l] = off;
      off += static_cast<std::size_t>(sizes_[l + 1]) * (sizes_[l] + 1);
    }
    for (std::size_t l = n_layers; l-- > 0;) {
      const int ni = sizes_[l], no = sizes_[l + 1];
      const Eigen::VectorXd& a = acts[l];
      Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gW(
          grad.data() + offsets[l], no, ni);
      Eigen::Map<Eigen::VectorXd> gb(grad.data() + offsets[l] + no * ni, no);
      gW.noalias() += delta * a.transpose();
      gb += delta;
      if (l == 0) break;
      const Eigen::VectorXd back = weight(l).transpose() * delta;
      delta = back.array() * (1.0 - a.array().square());
    }
  }

  friend void to_json(nlohmann::json& j, const Mlp& m) {
    j = nlohmann::json{{"sizes", m.sizes_}, {"params", m.params_}};
  }
  friend void from_json(const nlohmann::json& j, Mlp& m) {
    Mlp out(j.at("sizes").get<std::vector<int>>());
    out.set_params(j.at("params").get<std::vector<double>>());
    m = std::move(out);
  }

 private:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Eigen::Map<const RowMat> weight(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t k = 0; k < l; ++k) off += static_cast<std::size_t>(sizes_[k + 1]) * (sizes_[k] + 1);
    return Eigen::Map<const RowMat>(params_.data() + off, sizes_[l + 1], sizes_[l]);
  }

  Eigen::VectorXd forward_cached(const Eigen::VectorXd& in, std::vector<Eigen::VectorXd>& acts) const {
    require_shape(in.size() == input_dim(), "Mlp: input dimension mismatch");
    acts.clear();
    acts.push_back(in);
    std::size_t off = 0;
    const std::size_t n_layers = sizes_.size() - 1;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const int ni = sizes_[l], no = sizes_[l + 1];
      Eigen::Map<const RowMat> W(params_.data() + off, no, ni);
      Eigen::Map<const Eigen::VectorXd> b(params_.data() + off + no * ni, no);
      off += static_cast<std::size_t>(no) * (ni + 1);
      Eigen::VectorXd z = W * acts.back() + b;
      if (l + 1 == n_layers) return z;
      acts.push_back(z.array().tanh().matrix());
    }
    return {};
  }

  std::vector<int> sizes_;
  std::vector<double> params_;
};

// Network input for both the baseline policy and the value function.
inline Eigen::VectorXd state_features(const PlantState& s, const Eigen::VectorXd& x_ref) {
  Eigen::VectorXd f(s.x.size() * 2);
  f << s.x - x_ref, s.xdot;
  return f;
}

// V(s) = offset + scale * net((f(s) - in_mean) / in_scale). The input and
// output normalisation is fixed from the first batch so the network sees
// unit-scale features and regresses unit-scale targets.
struct ValueFn {
  Mlp net;
  Eigen::VectorXd x_ref;
  Eigen::VectorXd in_mean;
  Eigen::VectorXd in_scale;
  double offset = 0.0;
  double scale = 1.0;
  bool normalized = false;

  Eigen::VectorXd features(const PlantState& s) const {
    Eigen::VectorXd f = state_features(s, x_ref);
    if (in_mean.size() == f.size()) f = ((f - in_mean).array() / in_scale.array()).matrix();
    return f;
  }
  double operator()(const PlantState& s) const { return offset + scale * net.forward(features(s))[0]; }

  // Freezes the normalisation from a batch of states and their returns.
  void fit_normalization(std::span<const PlantState> states, std::span<const double> returns) {
    require_shape(!states.empty() && states.size() == returns.size(), "ValueFn: bad normalisation batch");
    const Eigen::Index n = 2 * x_ref.size();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(n), sq = Eigen::VectorXd::Zero(n);
    double rm = 0.0, rsq = 0.0;
    for (std::size_t i = 0; i < states.size(); ++i) {
      const Eigen::VectorXd f = state_features(states[i], x_ref);
      mean += f;
      sq += f.cwiseProduct(f);
      rm += returns[i];
      rsq += returns[i] * returns[i];
    }
    const double inv = 1.0 / states.size();
    in_mean = mean * inv;
    in_scale = (sq * inv - in_mean.cwiseProduct(in_mean)).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-6);
    offset = rm * inv;
    scale = std::max(std::sqrt(std::max(rsq * inv - offset * offset, 0.0)), 1e-6);
    normalized = true;
  }
};

template <class Rng>
ValueFn make_value_fn(int dim, Eigen::VectorXd x_ref, Rng& rng) {
  ValueFn v;
  v.net = Mlp::random({2 * dim, 32, 32, 1}, rng, 1.0);
  v.x_ref = std::move(x_ref);
  return v;
}

// ---- Policies --------------------------------------------------------------

// Diagonal Gaussian policy a ~ N(mean(s), diag(exp(log_std))^2). Trainable
// parameters end with the dim() log_std entries.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string kind() const = 0;
  virtual int dim() const = 0;
  virtual std::vector<double> params() const = 0;
  virtual void set_params(std::span<const double> p) = 0;
  virtual Eigen::VectorXd log_std() const = 0;
  virtual Eigen::VectorXd mean(const PlantState& s) const = 0;
  virtual LogProbGradient log_prob_grad(const PlantState& s, const Eigen::VectorXd& a) const = 0;
  virtual nlohmann::json to_json() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  std::size_t num_params() const { return params().size(); }

  template <class Rng>
  PolicySample act(const PlantState& s, Rng& rng, bool stochastic) const {
    const Eigen::VectorXd mu = mean(s);
    const Eigen::VectorXd ls = log_std();
    if (!stochastic) return {mu, gaussian_log_density(mu, mu, ls)};
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd a(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i) a[i] = mu[i] + std::exp(ls[i]) * normal(rng);
    return {a, gaussian_log_density(a, mu, ls)};
  }
};

class FlowPolicy final : public Policy {
 public:
  FlowPolicy(PolicyParams p, Gains g) : p_(std::move(p)), g_(std::move(g)) {
    require_shape(g_.dim() == p_.dim(), "FlowPolicy: gains dimension mismatch");
  }
  std::string kind() const override { return "nf"; }
  int dim() const override { return p_.dim(); }
  std::vector<double> params() const override { return trainable_params(p_); }
  void set_params(std::span<const double> v) override { set_trainable_params(p_, v); }
  Eigen::VectorXd log_std() const override { return p_.log_std; }
  Eigen::VectorXd mean(const PlantState& s) const override { return controller_mean(p_, g_, s); }
  LogProbGradient log_prob_grad(const PlantState& s, const Eigen::VectorXd& a) const override {
    return policy_log_prob_grad(p_, g_, s, a);
  }
  nlohmann::json to_json() const override {
    return {{"kind", "nf"}, {"policy", p_}, {"gains", gains_to_json(g_)}};
  }
  std::unique_ptr<Policy> clone() const override { return std::make_unique<FlowPolicy>(*this); }

  const PolicyParams& policy_params() const { return p_; }
  const Gains& gains() const { return g_; }

 private:
  PolicyParams p_;
  Gains g_;
};

struct BaselinePolicyParams {
  Mlp mean_net;  // [x - x_ref, xdot] -> mean action
  Eigen::VectorXd log_std;
  Eigen::VectorXd x_ref;
};

template <class Rng>
BaselinePolicyParams make_baseline_params(int dim, Eigen::VectorXd x_ref, double sigma_init, Rng& rng,
                                          double out_scale = 0.01) {
  require_shape(x_ref.size() == dim, "baseline: x_ref dimension mismatch");
  require_shape(sigma_init > 0.0, "baseline: sigma_init must be positive");
  return {Mlp::random({2 * dim, 32, 32, dim}, rng, out_scale),
          Eigen::VectorXd::Constant(dim, std::log(sigma_init)), std::move(x_ref)};
}

class BaselinePolicy final : public Policy {
 public:
  explicit BaselinePolicy(BaselinePolicyParams p) : p_(std::move(p)) {
    const int d = static_cast<int>(p_.log_std.size());
    require_shape(p_.x_ref.size() == d && p_.mean_net.input_dim() == 2 * d && p_.mean_net.output_dim() == d,
                  "BaselinePolicy: inconsistent shapes");
  }
  std::string kind() const override { return "baseline"; }
  int dim() const override { return static_cast<int>(p_.log_std.size()); }
  std::vector<double> params() const override {
    std::vector<double> v = p_.mean_net.params();
    v.insert(v.end(), p_.log_std.data(), p_.log_std.data() + p_.log_std.size());
    return v;
  }
  void set_params(std::span<const double> v) override {
    const std::size_t n = p_.mean_net.num_params();
    require_shape(v.size() == n + p_.log_std.size(), "BaselinePolicy: parameter count mismatch");
    p_.mean_net.set_params(v.first(n));
    for (Eigen::Index i = 0; i < p_.log_std.size(); ++i) p_.log_std[i] = v[n + i];
  }
  Eigen::VectorXd log_std() const override { return p_.log_std; }
  Eigen::VectorXd mean(const PlantState& s) const override {
    require_shape(s.x.size() == dim() && s.xdot.size() == dim(), "BaselinePolicy: state dimension mismatch");
    return p_.mean_net.forward(state_features(s, p_.x_ref));
  }
  LogProbGradient log_prob_grad(const PlantState& s, const Eigen::VectorXd& a) const override {
    require_shape(a.size() == dim(), "BaselinePolicy: action dimension mismatch");
    const Eigen::VectorXd mu = mean(s);
    const std::size_t n = p_.mean_net.num_params();
    LogProbGradient out{gaussian_log_density(a, mu, p_.log_std), std::vector<double>(n + dim(), 0.0)};
    const Eigen::VectorXd inv_var = (-2.0 * p_.log_std.array()).exp().matrix();
    const Eigen::VectorXd g_mu = ((a - mu).array() * inv_var.array()).matrix();
    p_.mean_net.backward(state_features(s, p_.x_ref), g_mu, std::span<double>(out.grad).first(n));
    for (int i = 0; i < dim(); ++i) {
      const double z2 = (a[i] - mu[i]) * (a[i] - mu[i]) * inv_var[i];
      out.grad[n + i] = z2 - 1.0;
    }
    return out;
  }
  nlohmann::json to_json() const override {
    return {{"kind", "baseline"},
            {"policy",
             {{"mean_net", p_.mean_net},
              {"log_std", detail::vector_to_json(p_.log_std)},
              {"x_ref", detail::vector_to_json(p_.x_ref)}}}};
  }
  std::unique_ptr<Policy> clone() const override { return std::make_unique<BaselinePolicy>(*this); }

  const BaselinePolicyParams& baseline_params() const { return p_; }

 private:
  BaselinePolicyParams p_;
};

// Checkpoint loader; gains are re-validated (symmetric positive definite).
inline std::unique_ptr<Policy> policy_from_json(const nlohmann::json& j) {
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "nf") {
      return std::make_unique<FlowPolicy>(j.at("policy").get<PolicyParams>(), gains_from_json(j.at("gains")));
    }
    if (kind == "baseline") {
      const auto& p = j.at("policy");
      return std::make_unique<BaselinePolicy>(BaselinePolicyParams{p.at("mean_net").get<Mlp>(),
                                                                   detail::vector_from_json(p.at("log_std")),
                                                                   detail::vector_from_json(p.at("x_ref"))});
    }
    throw ConfigError("checkpoint: unknown policy kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed policy: ") + e.what());
  }
}

// ---- Advantage estimation --------------------------------------------------

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// delta_t = r_t + gamma v_{t+1} - v_t, A_t = sum_k (gamma lambda)^k delta_{t+k};
// `values` has one more entry than `rewards` (bootstrap value of the last state).
inline GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values, double gamma,
                             double lambda) {
  require_shape(values.size() == rewards.size() + 1, "compute_gae: values must have length T+1");
  const std::size_t T = rewards.size();
  GaeResult out{std::vector<double>(T), std::vector<double>(T)};
  double acc = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const double delta = rewards[t] + gamma * values[t + 1] - values[t];
    acc = delta + gamma * lambda * acc;
    out.advantages[t] = acc;
    out.returns[t] = acc + values[t];
  }
  return out;
}

inline GaeResult compute_gae(const Trajectory& tr, std::span<const double> values, double gamma,
                             double lambda) {
  require_shape(values.size() == tr.states.size(), "compute_gae: values not aligned with states");
  return compute_gae(tr.rewards, values, gamma, lambda);
}

// ---- Update ----------------------------------------------------------------

struct Sample {
  PlantState state;
  Eigen::VectorXd action;
  double log_prob = 0.0;  // under the behaviour policy
  double advantage = 0.0;
  double ret = 0.0;
};

inline void normalize_advantages(std::vector<Sample>& batch) {
  require_shape(!batch.empty(), "normalize_advantages: empty batch");
  double mean = 0.0;
  for (const auto& s : batch) mean += s.advantage;
  mean /= batch.size();
  double var = 0.0;
  for (const auto& s : batch) var += (s.advantage - mean) * (s.advantage - mean);
  const double std = std::sqrt(var / batch.size());
  const double inv = std > 1e-12 ? 1.0 / std : 1.0;
  for (auto& s : batch) s.advantage = (s.advantage - mean) * inv;
}

class Adam {
 public:
  explicit Adam(double lr = 3e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // Descent step on `params` along `grad`.
  void step(std::vector<double>& params, std::span<const double> grad) {
    require_shape(params.size() == grad.size(), "Adam: gradient size mismatch");
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
      t_ = 0;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }
  double learning_rate() const { return lr_; }
  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

struct SurrogateEval {
  double objective = 0.0;     // mean of min(rho A, clip(rho) A) (+ entropy bonus)
  std::vector<double> grad;   // d objective / d params
  int n_clipped = 0;
  double approx_kl = 0.0;     // mean(logp_old - logp_new)
};

// Clipped surrogate over `batch`; samples on the clipped branch contribute
// no gradient.
inline SurrogateEval surrogate(const Policy& policy, std::span<const Sample> batch, double clip_epsilon,
                               double entropy_coef = 0.0) {
  require_shape(!batch.empty(), "surrogate: empty batch");
  const std::size_t n = policy.num_params();
  const int d = policy.dim();
  SurrogateEval out;
  out.grad.assign(n, 0.0);
  const double inv_b = 1.0 / batch.size();
  for (const Sample& s : batch) {
    const LogProbGradient lp = policy.log_prob_grad(s.state, s.action);
    const double rho = std::exp(lp.log_prob - s.log_prob);
    const double A = s.advantage;
    const double clipped = std::clamp(rho, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
    const bool on_clip = (A >= 0.0) ? rho > 1.0 + clip_epsilon : rho < 1.0 - clip_epsilon;
    out.objective += inv_b * std::min(rho * A, clipped * A);
    out.approx_kl += inv_b * (s.log_prob - lp.log_prob);
    if (on_clip) {
      ++out.n_clipped;
      continue;
    }
    const double w = inv_b * A * rho;
    for (std::size_t k = 0; k < n; ++k) out.grad[k] += w * lp.grad[k];
  }
  if (entropy_coef != 0.0) {
    // Entropy of a diagonal Gaussian: sum(log_std) + const.
    const Eigen::VectorXd ls = policy.log_std();
    for (int i = 0; i < d; ++i) {
      out.objective += entropy_coef * ls[i];
      out.grad[n - d + i] += entropy_coef;
    }
  }
  return out;
}

struct UpdateStats {
  double policy_objective = 0.0;  // mean over minibatches
  double value_loss = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  int minibatches = 0;
};

struct Optimizers {
  Adam policy;
  Adam value;
  explicit Optimizers(const PPOConfig& cfg) : policy(cfg.learning_rate), value(cfg.value_learning_rate) {}
};

inline void clamp_log_std(Policy& policy) {
  std::vector<double> p = policy.params();
  const int d = policy.dim();
  bool changed = false;
  for (std::size_t k = p.size() - d; k < p.size(); ++k) {
    if (p[k] < kLogStdFloor) {
      p[k] = kLogStdFloor;
      changed = true;
    }
  }
  if (changed) policy.set_params(p);
}

// Epochs of shuffled-minibatch ascent on the clipped surrogate plus value
// regression. Expects normalised advantages.
template <class Rng>
UpdateStats ppo_update(Policy& policy, ValueFn& value, const std::vector<Sample>& batch, const PPOConfig& cfg,
                       Optimizers& opt, Rng& rng) {
  require_shape(!batch.empty(), "ppo_update: empty batch");
  UpdateStats stats;
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Sample> mb;
  std::vector<double> theta = policy.params();
  std::vector<double> w = value.net.params();
  long n_samples = 0, n_clipped = 0;
  for (int epoch = 0; epoch < cfg.epochs_per_iter; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0, m = 0; start < order.size(); start += cfg.minibatch_size, ++m) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch_size));
      mb.clear();
      for (std::size_t i = start; i < stop; ++i) mb.push_back(batch[order[i]]);

      SurrogateEval sur = surrogate(policy, mb, cfg.clip_epsilon, cfg.entropy_coef);
      // Value regression on normalised targets.
      std::vector<double> gw(w.size(), 0.0);
      double vloss = 0.0;
      const double inv_b = 1.0 / mb.size();
      for (const Sample& s : mb) {
        const Eigen::VectorXd in = value.features(s.state);
        const double pred = value.net.forward(in)[0];
        const double err = pred - (s.ret - value.offset) / value.scale;
        vloss += inv_b * err * err;
        value.net.backward(in, Eigen::VectorXd::Constant(1, 2.0 * inv_b * err), gw);
      }
      bool finite = std::isfinite(sur.objective) && std::isfinite(vloss);
      for (double g : sur.grad) finite = finite && std::isfinite(g);
      if (!finite) {
        throw NumericError("ppo_update: non-finite loss in epoch " + std::to_string(epoch) + ", minibatch " +
                           std::to_string(m));
      }
      if (cfg.max_grad_norm > 0.0) {
        const double norm = std::sqrt(std::inner_product(sur.grad.begin(), sur.grad.end(), sur.grad.begin(), 0.0));
        if (norm > cfg.max_grad_norm) {
          for (double& g : sur.grad) g *= cfg.max_grad_norm / norm;
        }
      }
      for (double& g : sur.grad) g = -g;  // ascend the surrogate
      opt.policy.step(theta, sur.grad);
      policy.set_params(theta);
      clamp_log_std(policy);
      theta = policy.params();
      opt.value.step(w, gw);
      value.net.set_params(w);

      stats.policy_objective += sur.objective;
      stats.value_loss += vloss;
      stats.approx_kl += sur.approx_kl;
      n_clipped += sur.n_clipped;
      n_samples += static_cast<long>(mb.size());
      ++stats.minibatches;
    }
  }
  if (stats.minibatches > 0) {
    stats.policy_objective /= stats.minibatches;
    stats.value_loss /= stats.minibatches;
    stats.approx_kl /= stats.minibatches;
    stats.clip_fraction = static_cast<double>(n_clipped) / n_samples;
  }
  return stats;
}

// ---- Training loop ---------------------------------------------------------

struct IterationMetrics {
  int iteration = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double mean_policy_std = 0.0;
  double mean_abs_u = 0.0;
  double mean_dist = 0.0;
  double wall_seconds = 0.0;
  int diverged_episodes = 0;
};

// A plant together with its start-state distribution.
struct Environment {
  std::shared_ptr<const PlantModel> plant;
  std::function<PlantState(std::mt19937_64&)> sample_start;
  Eigen::VectorXd x_ref;
};

struct TrainOptions {
  RolloutConfig rollout;  // horizon is overridden by PPOConfig::horizon_steps
  int n_eval_starts = 5;
  std::uint64_t eval_seed = 20260101;
  int jobs = 1;
  std::function<void(const std::string&)> log;
  std::function<void(const IterationMetrics&, const Policy&)> on_iteration;
};

struct TrainResult {
  std::unique_ptr<Policy> policy;
  ValueFn value;
  std::vector<IterationMetrics> metrics;
};

namespace detail {

// Runs f(i) for i in [0, n) on up to `jobs` threads; results are written by
// index so the outcome does not depend on scheduling.
template <class F>
void parallel_for(int n, int jobs, F&& f) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

template <class Rng>
Trajectory policy_rollout(const Environment& env, const Policy& policy, const PlantState& start,
                          const RolloutConfig& cfg, bool stochastic, Rng& rng) {
  auto act = [&](const PlantState& s, Rng& g) { return policy.act(s, g, stochastic); };
  return rollout(*env.plant, act, start, env.x_ref, cfg, rng);
}

inline std::vector<PlantState> evaluation_starts(const Environment& env, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<PlantState> starts;
  for (int i = 0; i < n; ++i) starts.push_back(env.sample_start(rng));
  return starts;
}

// Fraction of deterministic rollouts that reach the plant's success region.
inline double evaluate_success(const Environment& env, const Policy& policy, const std::vector<PlantState>& starts,
                               const RolloutConfig& cfg, int jobs = 1) {
  if (starts.empty()) return 0.0;
  std::vector<int> ok(starts.size(), 0);
  detail::parallel_for(static_cast<int>(starts.size()), jobs, [&](int i) {
    std::mt19937_64 rng(0);
    try {
      ok[i] = policy_rollout(env, policy, starts[i], cfg, false, rng).success ? 1 : 0;
    } catch (const DivergenceError&) {
      ok[i] = 0;
    }
  });
  return static_cast<double>(std::accumulate(ok.begin(), ok.end(), 0)) / starts.size();
}

inline TrainResult train(const Environment& env, const Policy& initial, const PPOConfig& cfg,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  TrainResult res;
  res.policy = initial.clone();
  std::mt19937_64 init_rng(splitmix64(cfg.seed ^ 0x76616c7565ULL));
  res.value = make_value_fn(initial.dim(), env.x_ref, init_rng);
  if (cfg.max_iters == 0) return res;

  RolloutConfig rcfg = opts.rollout;
  rcfg.horizon = cfg.horizon_steps * rcfg.dt_control;
  const std::vector<PlantState> eval_starts = evaluation_starts(env, opts.n_eval_starts, opts.eval_seed);
  Optimizers opt(cfg);
  auto log = [&](const std::string& m) {
    if (opts.log) opts.log(m);
  };

  for (int it = 0; it < cfg.max_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t base_seed = splitmix64(cfg.seed * 0x100000001b3ULL + static_cast<std::uint64_t>(it));
    const int n_ep = cfg.n_rollouts_per_iter;
    std::vector<std::optional<Trajectory>> trajs(n_ep);
    const Policy& pol = *res.policy;
    detail::parallel_for(n_ep, opts.jobs, [&](int e) {
      std::mt19937_64 rng(base_seed ^ static_cast<std::uint64_t>(e));
      const PlantState start = env.sample_start(rng);
      try {
        trajs[e] = policy_rollout(env, pol, start, rcfg, true, rng);
      } catch (const DivergenceError&) {
        trajs[e].reset();
      }
    });

    IterationMetrics m;
    m.iteration = it;
    std::vector<Sample> batch;
    std::vector<double> first_returns;
    double sum_abs_u = 0.0, sum_dist = 0.0;
    long n_steps = 0;
    int kept = 0;
    for (int e = 0; e < n_ep; ++e) {
      if (!trajs[e]) {
        ++m.diverged_episodes;
        log("iteration " + std::to_string(it) + ": episode " + std::to_string(e) + " diverged; discarded");
        continue;
      }
      const Trajectory& tr = *trajs[e];
      ++kept;
      std::vector<double> values(tr.states.size());
      for (std::size_t k = 0; k < tr.states.size(); ++k) values[k] = res.value(tr.states[k]);
      // The episode ends on a time limit, so the last value bootstraps.
      const GaeResult g = compute_gae(tr, values, cfg.gamma, cfg.gae_lambda);
      for (std::size_t k = 0; k < tr.steps(); ++k) {
        batch.push_back({tr.states[k], tr.actions[k], tr.log_probs[k], g.advantages[k], g.returns[k]});
        m.mean_return += tr.rewards[k];
        sum_abs_u += tr.actions[k].norm();
        sum_dist += (tr.states[k].x - env.x_ref).norm();
        ++n_steps;
      }
    }
    if (kept == 0) {
      // Nothing left to learn from: the policy cannot recover on its own.
      throw DivergenceError("train: all " + std::to_string(n_ep) + " episodes of iteration " + std::to_string(it) +
                            " diverged");
    }
    m.mean_return /= kept;
    if (n_steps > 0) {
      m.mean_abs_u = sum_abs_u / n_steps;
      m.mean_dist = sum_dist / n_steps;
    }

    if (!batch.empty()) {
      if (!res.value.normalized) {
        // Fitted once, on the first batch (returns from the untrained network).
        std::vector<PlantState> states;
        std::vector<double> rets;
        for (const auto& s : batch) {
          states.push_back(s.state);
          rets.push_back(s.ret);
        }
        res.value.fit_normalization(states, rets);
      }
      normalize_advantages(batch);
      std::mt19937_64 shuffle_rng(base_seed ^ 0x5348554646ULL);
      const std::unique_ptr<Policy> backup = res.policy->clone();
      const ValueFn value_backup = res.value;
      try {
        ppo_update(*res.policy, res.value, batch, cfg, opt, shuffle_rng);
      } catch (const NumericError& e) {
        res.policy = backup->clone();
        res.value = value_backup;
        log("iteration " + std::to_string(it) + ": update aborted: " + e.what());
      }
    }

    m.mean_policy_std = res.policy->log_std().array().exp().mean();
    m.success_rate = evaluate_success(env, *res.policy, eval_starts, rcfg, opts.jobs);
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.push_back(m);
    if (opts.on_iteration) opts.on_iteration(m, *res.policy);
  }
  return res;
}

// First iteration whose success rate, and that of the next window-1
// iterations, is at least `threshold`.
inline std::optional<int> iterations_to_success(const std::vector<IterationMetrics>& ms, double threshold = 0.9,
                                                int window = 3) {
  for (std::size_t i = 0; i + window <= ms.size(); ++i) {
    bool ok = true;
    for (int k = 0; k < window; ++k) ok = ok && ms[i + k].success_rate >= threshold;
    if (ok) return ms[i].iteration;
  }
  return std::nullopt;
}

inline void write_metrics_csv(std::ostream& os, const std::vector<IterationMetrics>& ms) {
  os << "iteration,mean_return,success_rate,mean_policy_std,mean_abs_u,mean_dist\n";
  os.precision(17);
  for (const auto& m : ms) {
    os << m.iteration << ',' << m.mean_return << ',' << m.success_rate << ',' << m.mean_policy_std << ','
       << m.mean_abs_u << ',' << m.mean_dist << '\n';
  }
}

inline void write_timing_csv(std::ostream& os, const std::vector<IterationMetrics>& ms) {
  os << "iteration,wall_seconds,diverged_episodes\n";
  for (const auto& m : ms) os << m.iteration << ',' << m.wall_seconds << ',' << m.diverged_episodes << '\n';
}

}  // namespace stableflow

#endif  // STABLEFLOW_PPO_HPP_
