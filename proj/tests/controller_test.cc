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

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "stableflow/controller.hpp"
#include "stableflow/dynamics.hpp"
#include "test_util.hpp"

namespace stableflow {
namespace {

using testing::central_gradient;
using testing::relative_error;
using testing::row_scaled_error;
using testing::uniform_flow;
using testing::uniform_vector;

PolicyParams identity_policy(int dim = 2) {
  return make_policy(make_identity_flow(dim, 2, 8), Eigen::VectorXd::Zero(dim), 1.0);
}

template <class Rng>
PolicyParams random_policy(Rng& rng, double lo = -1.0, double hi = 1.0) {
  PolicyParams p = make_policy(uniform_flow(2, 2, 8, rng, lo, hi), uniform_vector(2, rng, -1, 1), 1.0);
  p.log_std = uniform_vector(2, rng, -1, 1);
  return p;
}

TEST(GainsTest, RejectsIndefiniteAndAsymmetric) {
  const Eigen::Matrix2d I = Eigen::Matrix2d::Identity();
  EXPECT_THROW(Gains(I, -I), NumericError);
  Eigen::Matrix2d A;
  A << 1, 0.5, 0.0, 1;
  EXPECT_THROW(Gains(A, I), NumericError);
  EXPECT_THROW(Gains(I, Eigen::Matrix3d::Identity()), ShapeError);
  EXPECT_NO_THROW(Gains::scaled(2, 4.0, 1.0));
}

TEST(ControllerMeanTest, IdentityFlowIsSpringDamper) {
  const PolicyParams p = identity_policy();
  const PlantState s{Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 2)};
  const Eigen::VectorXd u = controller_mean(p, Gains::identity(2), s);
  EXPECT_DOUBLE_EQ(u[0], -1.0);
  EXPECT_DOUBLE_EQ(u[1], -2.0);
}

TEST(ControllerMeanTest, ReductionToSpringDamper) {
  std::mt19937_64 rng(8);
  const PolicyParams p = identity_policy();
  const Gains g = Gains::scaled(2, 3.0, 0.7);
  for (int i = 0; i < 100; ++i) {
    const PlantState s{uniform_vector(2, rng, -2, 2), uniform_vector(2, rng, -2, 2)};
    const Eigen::VectorXd expected = -3.0 * s.x - 0.7 * s.xdot;
    EXPECT_LT((controller_mean(p, g, s) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ControllerMeanTest, ZeroAtEquilibrium) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 20; ++i) {
    const PolicyParams p = random_policy(rng);
    const PlantState s{p.x_ref, Eigen::Vector2d::Zero()};
    const Eigen::VectorXd u = controller_mean(p, Gains::identity(2), s);
    EXPECT_EQ(u[0], 0.0);
    EXPECT_EQ(u[1], 0.0);
  }
}

TEST(ControllerMeanTest, NonzeroAwayFromEquilibrium) {
  std::mt19937_64 rng(13);
  const PolicyParams p = random_policy(rng);
  const Gains g = Gains::identity(2);
  for (int i = 0; i < 1000; ++i) {
    PlantState s{uniform_vector(2, rng, -2, 2), uniform_vector(2, rng, -2, 2)};
    if (i % 3 == 0) s.xdot.setZero();
    if (i % 3 == 1) s.x = p.x_ref;
    ASSERT_GT(controller_mean(p, g, s).norm(), 0.0) << i;
  }
}

// The position term of u is the negative gradient of the potential.
TEST(ControllerMeanTest, PositionTermIsNegativePotentialGradientSeed3) {
  std::mt19937_64 rng(3);
  const PolicyParams p = random_policy(rng);
  const Gains g = Gains::identity(2);
  for (int i = 0; i < 50; ++i) {
    const PlantState s{uniform_vector(2, rng, -2, 2), uniform_vector(2, rng, -2, 2)};
    const Eigen::MatrixXd J = flow_jacobian(p.flow, s.x);
    const Eigen::VectorXd damping = -J.transpose() * g.D() * J * s.xdot;
    const Eigen::VectorXd grad_v =
        central_gradient([&](const Eigen::VectorXd& x) { return lyapunov_potential(p, g, x); }, s.x, 1e-6);
    const Eigen::VectorXd expected = -grad_v + damping;
    EXPECT_LT((controller_mean(p, g, s) - expected).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(ControllerMeanTest, DampingIsDissipative) {
  std::mt19937_64 rng(14);
  const PolicyParams p = random_policy(rng);
  const Gains g = Gains::scaled(2, 1.0, 2.5);
  for (int i = 0; i < 500; ++i) {
    const Eigen::VectorXd x = uniform_vector(2, rng, -2, 2);
    const Eigen::VectorXd xd = uniform_vector(2, rng, -2, 2);
    const Eigen::MatrixXd J = flow_jacobian(p.flow, x);
    const double power = xd.dot(-J.transpose() * g.D() * J * xd);
    ASSERT_LT(power, 0.0);
  }
  const Eigen::MatrixXd J = flow_jacobian(p.flow, Eigen::Vector2d(0.2, 0.3));
  EXPECT_EQ(Eigen::Vector2d::Zero().dot(-J.transpose() * g.D() * J * Eigen::Vector2d::Zero()), 0.0);
}

TEST(LyapunovTest, PotentialValues) {
  const PolicyParams p = identity_policy();
  EXPECT_DOUBLE_EQ(lyapunov_potential(p, Gains::identity(2), Eigen::Vector2d(3, 4)), 12.5);
  std::mt19937_64 rng(21);
  const PolicyParams q = random_policy(rng);
  EXPECT_EQ(lyapunov_potential(q, Gains::identity(2), q.x_ref), 0.0);
}

TEST(LyapunovTest, PotentialPositiveAwayFromReference) {
  std::mt19937_64 rng(22);
  const PolicyParams p = random_policy(rng);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::VectorXd x = uniform_vector(2, rng, -2, 2);
    ASSERT_GT(lyapunov_potential(p, Gains::identity(2), x), 0.0);
  }
}

TEST(LyapunovTest, TotalEnergy) {
  const PolicyParams p = identity_policy();
  const Gains g = Gains::identity(2);
  const PlantState s{Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1)};
  EXPECT_DOUBLE_EQ(lyapunov_total(p, g, s, Eigen::Matrix2d::Identity()), 1.0);
  const PlantState rest{Eigen::Vector2d(1, 0.5), Eigen::Vector2d::Zero()};
  EXPECT_DOUBLE_EQ(lyapunov_total(p, g, rest, Eigen::Matrix2d::Identity()),
                   lyapunov_potential(p, g, rest.x));
}

TEST(LyapunovTest, TotalEnergyWithArmInertia) {
  std::mt19937_64 rng(23);
  const PolicyParams p = random_policy(rng);
  const Gains g = Gains::scaled(2, 2.0, 1.0);
  const TwoLinkArmPlant arm;
  for (int i = 0; i < 20; ++i) {
    const PlantState s{uniform_vector(2, rng, -3, 3), uniform_vector(2, rng, -2, 2)};
    const Eigen::MatrixXd M = arm.mass_matrix(s.x);
    // re-evaluate both quadratic forms by explicit sums
    const Eigen::VectorXd dy = flow_forward(p.flow, s.x) - flow_forward(p.flow, p.x_ref);
    double expected = 0.0;
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        expected += 0.5 * dy[a] * g.S()(a, b) * dy[b] + 0.5 * s.xdot[a] * M(a, b) * s.xdot[b];
      }
    }
    EXPECT_NEAR(lyapunov_total(p, g, s, M), expected, 1e-12);
  }
}

// Finite-difference oracle over every flow parameter.
Eigen::MatrixXd fd_du_dtheta(const PolicyParams& p, const Gains& g, const PlantState& s, double step) {
  const std::vector<double> theta = flatten(p.flow);
  Eigen::MatrixXd out(2, static_cast<Eigen::Index>(theta.size()));
  for (std::size_t k = 0; k < theta.size(); ++k) {
    std::vector<double> tp = theta, tm = theta;
    tp[k] += step;
    tm[k] -= step;
    PolicyParams pp = p, pm = p;
    pp.flow = unflatten(p.flow, tp);
    pm.flow = unflatten(p.flow, tm);
    out.col(static_cast<Eigen::Index>(k)) =
        (controller_mean(pp, g, s) - controller_mean(pm, g, s)) / (2.0 * step);
  }
  return out;
}

TEST(GradThroughFlowTest, IdentityParams) {
  const PolicyParams p = identity_policy();
  const Gains g = Gains::identity(2);
  const PlantState s{Eigen::Vector2d(0.4, -0.7), Eigen::Vector2d(1.1, 0.3)};
  const ControlGradient cg = grad_through_flow(p.flow, s.x, s.xdot, p.x_ref, g);
  EXPECT_LT((cg.u - (-s.x - s.xdot)).cwiseAbs().maxCoeff(), 1e-15);
  const Eigen::MatrixXd fd = fd_du_dtheta(p, g, s, 1e-5);
  ASSERT_EQ(fd.cols(), cg.du_dtheta.cols());
  for (Eigen::Index i = 0; i < fd.rows(); ++i) {
    for (Eigen::Index k = 0; k < fd.cols(); ++k) {
      EXPECT_LT(relative_error(cg.du_dtheta(i, k), fd(i, k)), 1e-5) << i << "," << k;
    }
  }
}

TEST(GradThroughFlowTest, ZeroControlAtEquilibrium) {
  std::mt19937_64 rng(30);
  const PolicyParams p = random_policy(rng);
  const ControlGradient cg = grad_through_flow(p.flow, p.x_ref, Eigen::Vector2d::Zero(), p.x_ref,
                                               Gains::identity(2));
  EXPECT_EQ(cg.u[0], 0.0);
  EXPECT_EQ(cg.u[1], 0.0);
}

TEST(GradThroughFlowTest, RandomParamsSeed11) {
  std::mt19937_64 rng(11);
  const PolicyParams p = random_policy(rng);
  const Gains g = Gains::scaled(2, 1.5, 0.8);
  const PlantState s{uniform_vector(2, rng, -2, 2), uniform_vector(2, rng, -2, 2)};
  const ControlGradient cg = grad_through_flow(p.flow, s.x, s.xdot, p.x_ref, g);
  EXPECT_LT((cg.u - controller_mean(p, g, s)).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::MatrixXd fd = fd_du_dtheta(p, g, s, 1e-5);
  EXPECT_LT(row_scaled_error(cg.du_dtheta, fd), 1e-4);
}

TEST(PolicySampleTest, VanishingNoiseReturnsMean) {
  std::mt19937_64 rng(40);
  PolicyParams p = random_policy(rng);
  p.log_std.setConstant(-20.0);
  const PlantState s{Eigen::Vector2d(0.3, 0.1), Eigen::Vector2d(-0.2, 0.4)};
  const Gains g = Gains::identity(2);
  const PolicySample a = policy_sample(p, g, s, rng);
  EXPECT_LT((a.action - controller_mean(p, g, s)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(PolicySampleTest, LogDensityAtMean) {
  const Eigen::Vector2d mean(0.5, -1.0);
  const Eigen::Vector2d log_std(std::log(0.7), std::log(2.0));
  const double expected = -std::log(2.0 * std::numbers::pi) - std::log(0.7) - std::log(2.0);
  EXPECT_NEAR(gaussian_log_density(mean, mean, log_std), expected, 1e-14);
}

TEST(PolicySampleTest, EmpiricalStandardDeviation) {
  std::mt19937_64 rng(41);
  PolicyParams p = identity_policy();
  p.log_std << std::log(0.5), std::log(2.0);
  const PlantState s{Eigen::Vector2d(0.3, -0.2), Eigen::Vector2d(0.1, 0.0)};
  const Gains g = Gains::identity(2);
  const Eigen::VectorXd mean = controller_mean(p, g, s);
  Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sum2 = Eigen::Vector2d::Zero();
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd d = policy_sample(p, g, s, rng).action - mean;
    sum += d;
    sum2 += d.cwiseProduct(d);
  }
  for (int i = 0; i < 2; ++i) {
    const double m = sum[i] / n;
    const double sd = std::sqrt(sum2[i] / n - m * m);
    EXPECT_NEAR(sd / std::exp(p.log_std[i]), 1.0, 0.02);
  }
}

TEST(PolicyLogProbGradTest, AtTheMean) {
  std::mt19937_64 rng(50);
  const PolicyParams p = random_policy(rng);
  const Gains g = Gains::identity(2);
  const PlantState s{uniform_vector(2, rng, -1, 1), uniform_vector(2, rng, -1, 1)};
  const Eigen::VectorXd mean = controller_mean(p, g, s);
  const LogProbGradient lg = policy_log_prob_grad(p, g, s, mean);
  const std::size_t nf = p.flow.num_params();
  ASSERT_EQ(lg.grad.size(), nf + 2);
  // Zero up to rounding: the mean and the tape evaluate phi in different orders.
  for (std::size_t k = 0; k < nf; ++k) EXPECT_NEAR(lg.grad[k], 0.0, 1e-12) << k;
  EXPECT_DOUBLE_EQ(lg.grad[nf], -1.0);
  EXPECT_DOUBLE_EQ(lg.grad[nf + 1], -1.0);
  EXPECT_NEAR(lg.log_prob, gaussian_log_density(mean, mean, p.log_std), 1e-12);
}

TEST(PolicyLogProbGradTest, MatchesCentralDifferences) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 10; ++trial) {
    const PolicyParams p = random_policy(rng);
    const Gains g = Gains::identity(2);
    const PlantState s{uniform_vector(2, rng, -1, 1), uniform_vector(2, rng, -1, 1)};
    const Eigen::VectorXd action = controller_mean(p, g, s) + uniform_vector(2, rng, -2, 2);
    const LogProbGradient lg = policy_log_prob_grad(p, g, s, action);
    const std::vector<double> theta = trainable_params(p);
    Eigen::VectorXd fd(static_cast<Eigen::Index>(theta.size()));
    auto logp = [&](const std::vector<double>& t) {
      PolicyParams q = p;
      set_trainable_params(q, t);
      return gaussian_log_density(action, controller_mean(q, g, s), q.log_std);
    };
    for (std::size_t k = 0; k < theta.size(); ++k) {
      std::vector<double> tp = theta, tm = theta;
      tp[k] += 1e-5;
      tm[k] -= 1e-5;
      fd[static_cast<Eigen::Index>(k)] = (logp(tp) - logp(tm)) / 2e-5;
    }
    const Eigen::MatrixXd ad = testing::to_eigen(lg.grad).transpose();
    ASSERT_LT(row_scaled_error(ad, fd.transpose()), 1e-4) << "trial " << trial;
  }
}

TEST(PolicyJsonTest, RoundTrip) {
  std::mt19937_64 rng(60);
  const PolicyParams p = random_policy(rng);
  const PolicyParams q = nlohmann::json::parse(nlohmann::json(p).dump()).get<PolicyParams>();
  EXPECT_EQ(trainable_params(q), trainable_params(p));
  EXPECT_EQ(q.x_ref, p.x_ref);
  const Gains g = gains_from_json(gains_to_json(Gains::scaled(2, 4, 1)));
  EXPECT_EQ(g.S()(0, 0), 4.0);
}

}  // namespace
}  // namespace stableflow
