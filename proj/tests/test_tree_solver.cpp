// Copyright 2026 The isomarket Authors
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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "isomarket/isomarket.hpp"
#include "test_support.hpp"

using namespace isomarket;
using isomarket::fixtures::scalar_lq;
namespace fx = isomarket::fixtures;

namespace {

PriceProfile node_prices(const ScenarioTree& tree, std::vector<double> v) {
  return PriceProfile{IndexKind::node, tree.start_time(), std::move(v)};
}

PriceProfile random_node_prices(Rng& rng, const ScenarioTree& tree) {
  std::vector<double> v(tree.internal_count());
  for (auto& p : v) p = fx::uniform(rng, -1.5, 1.5);
  return node_prices(tree, v);
}

NoiseLaw random_finite_law(Rng& rng) {
  const std::size_t k = fx::pick(rng, 1, 3);
  std::vector<double> values(k), probs(k, 1.0 / static_cast<double>(k));
  for (auto& v : values) v = fx::uniform(rng, -1, 1);
  double rest = 1.0;
  for (std::size_t j = 0; j + 1 < k; ++j) rest -= probs[j];
  probs.back() = rest;
  return NoiseLaw::finite(values, probs);
}

ScenarioTree random_tree(Rng& rng, std::size_t agents, std::size_t max_depth = 3) {
  std::vector<NoiseLaw> privates;
  for (std::size_t i = 0; i < agents; ++i) privates.push_back(random_finite_law(rng));
  return build_tree(random_finite_law(rng), privates, fx::pick(rng, 1, max_depth));
}

ScenarioTree binary_tree(std::size_t T) {
  const std::vector<NoiseLaw> privates{NoiseLaw::finite({-1, 1}, {0.5, 0.5})};
  return build_tree(NoiseLaw::none(), privates, T);
}

}  // namespace

TEST(TreeBestResponseLq, SinglePathEqualsDeterministic) {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = fx::random_lq_agent(rng);
    const std::size_t T = fx::pick(rng, 1, 6);
    const auto tree = path_tree(1, T);
    const auto prices = random_node_prices(rng, tree);
    const auto tr = tree_best_response_lq(a, 0, tree, prices, a.x0);
    const auto lq = lq_best_response(a, PriceProfile{IndexKind::time, 0, prices.values}, a.x0);
    for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(tr.policy.controls[t], lq.bids[t], 1e-12);
    EXPECT_NEAR(tr.expected_cost, lq.cost, 1e-10 * (1 + std::abs(lq.cost)));
  }
}

TEST(TreeBestResponseLq, ZeroPricesNoStateCost) {
  const auto a = scalar_lq(0.9, 1, 0, 1, 3.0);
  const auto tree = binary_tree(3);
  const auto r = tree_best_response_lq(a, 0, tree, zero_node_prices(tree), a.x0);
  for (double u : r.policy.controls) EXPECT_EQ(u, 0.0);
}

TEST(TreeBestResponseLq, BinaryNoiseMatchesDenseQp) {
  const auto a = scalar_lq(0.9, 1, 1, 2, 1);
  const auto tree = binary_tree(2);
  ASSERT_EQ(tree.internal_count(), 3u);
  const auto prices = node_prices(tree, {0.3, -0.2, 0.4});
  const auto r = tree_best_response_lq(a, 0, tree, prices, a.x0);
  const std::vector<double> expected{-0.4296610169491524, 0.19223163841807916, -0.507768361581921};
  const auto qp = single_agent_qp(quadratic_model(a), 0, tree, prices, a.x0);
  for (std::size_t v = 0; v < 3; ++v) {
    EXPECT_NEAR(r.policy.controls[v], expected[v], 1e-12);
    EXPECT_NEAR(r.policy.controls[v], qp.controls[v], 1e-8);
  }
  EXPECT_NEAR(r.expected_cost, 4.008552259887006, 1e-12);
  EXPECT_NEAR(r.expected_cost, qp.cost, 1e-8);
}

TEST(TreeBestResponseLq, RandomTreesMatchDenseQp) {
  Rng rng(32);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t M = fx::pick(rng, 1, 2);
    const auto tree = random_tree(rng, M);
    const auto a = fx::random_lq_agent(rng);
    const std::size_t idx = M - 1;
    const auto prices = random_node_prices(rng, tree);
    const auto r = tree_best_response_lq(a, idx, tree, prices, a.x0);
    const auto qp = single_agent_qp(quadratic_model(a), idx, tree, prices, a.x0);
    for (std::size_t v = 0; v < tree.internal_count(); ++v) EXPECT_NEAR(r.policy.controls[v], qp.controls[v], 1e-8);
    EXPECT_NEAR(r.expected_cost, qp.cost, 1e-8 * (1 + std::abs(qp.cost)));
    EXPECT_NEAR(r.expected_cost, expected_policy_cost(a, idx, tree, r.policy, prices, a.x0),
                1e-9 * (1 + std::abs(qp.cost)));
  }
}

TEST(TreeBestResponseLq, RejectsMalformedInputs) {
  const auto a = scalar_lq(1, 1, 1, 1, 0);
  const auto tree = binary_tree(2);
  EXPECT_THROW(tree_best_response_lq(a, 0, tree, node_prices(tree, {0, 0}), a.x0), InstanceError);
  EXPECT_THROW(tree_best_response_lq(a, 1, tree, zero_node_prices(tree), a.x0), InstanceError);
  EXPECT_THROW(tree_best_response_lq(a, 0, tree, PriceProfile{IndexKind::time, 0, {0, 0, 0}}, a.x0), InstanceError);
  EXPECT_THROW(tree_best_response_lq(a, 0, tree, zero_node_prices(tree), Vector::Zero(3)), InstanceError);
}

TEST(TreeBestResponseConvex, QuadraticAgentMatchesLq) {
  Rng rng(33);
  for (int trial = 0; trial < 15; ++trial) {
    const std::size_t M = fx::pick(rng, 1, 2);
    const auto tree = random_tree(rng, M, 2);
    const auto a = fx::random_lq_agent(rng);
    const auto prices = random_node_prices(rng, tree);
    const auto exact = tree_best_response_lq(a, M - 1, tree, prices, a.x0);
    for (bool fd : {false, true}) {
      ConvexSolverSettings settings;
      settings.finite_difference = fd;
      const auto r = tree_best_response_convex(as_convex(a), M - 1, tree, prices, a.x0, settings);
      EXPECT_TRUE(r.converged);
      for (std::size_t v = 0; v < tree.internal_count(); ++v)
        EXPECT_NEAR(r.policy.controls[v], exact.policy.controls[v], 1e-5);
      EXPECT_NEAR(r.expected_cost, exact.expected_cost, 1e-8 * (1 + std::abs(exact.expected_cost)));
    }
  }
}

TEST(TreeBestResponseConvex, QuarticZeroPrices) {
  const Matrix one = Matrix::Identity(1, 1);
  const auto a = make_polynomial_agent(one, Matrix::Zero(1, 1), Vector::Zero(1), PolynomialCost{{}, {}, 0, 0, 0, 1});
  const auto tree = binary_tree(2);
  const auto r = tree_best_response_convex(a, 0, tree, zero_node_prices(tree), a.x0);
  EXPECT_TRUE(r.converged);
  for (double u : r.policy.controls) EXPECT_EQ(u, 0.0);
}

TEST(TreeBestResponseConvex, SingleNodeScalarCalculus) {
  const Matrix one = Matrix::Identity(1, 1);
  // (u - 2)^2 = u^2 - 4u + 4
  const auto a = make_polynomial_agent(one, one, Vector::Zero(1), PolynomialCost{{}, {}, 1, -4, 4, 0});
  const auto tree = path_tree(1, 1);
  for (bool fd : {false, true}) {
    ConvexSolverSettings settings;
    settings.finite_difference = fd;
    const auto r = tree_best_response_convex(a, 0, tree, node_prices(tree, {2}), a.x0, settings);
    EXPECT_NEAR(r.policy.controls[0], 1.0, 1e-7);
    EXPECT_NEAR(r.expected_cost, 3.0, 1e-12);
  }
}

TEST(TreeBestResponseConvex, GenericCallbacksWithoutDerivatives) {
  ConvexAgent a;
  a.n_states = 1;
  a.x0 = Vector::Constant(1, 0.5);
  a.dynamics = [](std::size_t, const Vector& x, double u, double np, double nc) {
    return Vector(Vector::Constant(1, 0.8 * x(0) + u + np + nc));
  };
  a.stage_cost = [](std::size_t, const Vector& x, double u) { return std::cosh(u) + x(0) * x(0); };
  a.terminal_cost = [](const Vector& x) { return std::pow(x(0), 4); };
  const auto tree = binary_tree(2);
  const auto r = tree_best_response(a, 0, tree, zero_node_prices(tree), a.x0);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.gradient_norm, 1e-7);
  const double best = r.expected_cost;
  for (std::size_t v = 0; v < tree.internal_count(); ++v)
    for (double d : {1e-3, -1e-3}) {
      auto p = r.policy;
      p.controls[v] += d;
      EXPECT_GE(expected_policy_cost(a, 0, tree, p, {}, a.x0), best);
    }
}

TEST(TreeBestResponseConvex, IterationCapIsReported) {
  const Matrix A{{1.0, 1.0}, {0.0, 1.0}};
  const Matrix B{{0.0}, {1.0}};
  const auto a = make_polynomial_agent(A, B, Vector{{3.0, -1.0}}, PolynomialCost{Matrix::Identity(2, 2), {}, 0.01, 0,
                                                                                  0, 0.5});
  const auto tree = binary_tree(3);
  ConvexSolverSettings settings;
  settings.max_iterations = 1;
  const auto r = tree_best_response_convex(a, 0, tree, zero_node_prices(tree), a.x0, settings);
  EXPECT_FALSE(r.converged);
  EXPECT_GT(r.gradient_norm, settings.gtol);
  EXPECT_EQ(r.iterations, 1u);
}

TEST(ExpectedPolicyCost, Examples) {
  const auto a = scalar_lq(0.9, 1, 1, 2, 0);
  const auto tree = path_tree(1, 3);
  const TreePolicy zero{{0, 0, 0}};
  EXPECT_EQ(expected_policy_cost(a, 0, tree, zero, zero_node_prices(tree), a.x0), 0.0);

  const auto b = scalar_lq(0.9, 1, 1, 2, 1);
  const TreePolicy p{{0.5, -1, 0.25}};
  const std::vector<double> noise(3, 0.0);
  const double plain = trajectory_cost(b, simulate_trajectory(b, p.controls, noise));
  EXPECT_NEAR(expected_policy_cost(b, 0, tree, p, {}, b.x0), plain, 1e-12);
  const auto prices = node_prices(tree, {1, 2, 3});
  EXPECT_NEAR(expected_policy_cost(b, 0, tree, p, prices, b.x0), plain + 0.5 - 2 + 0.75, 1e-12);
}

// Properties

TEST(TreeProperties, SingleNodePerturbationsDoNotImprove) {
  Rng rng(34);
  for (int trial = 0; trial < 15; ++trial) {
    const auto tree = random_tree(rng, 2);
    const auto a = fx::random_lq_agent(rng);
    const auto prices = random_node_prices(rng, tree);
    const auto r = tree_best_response_lq(a, 1, tree, prices, a.x0);
    const double best = expected_policy_cost(a, 1, tree, r.policy, prices, a.x0);
    for (std::size_t v = 0; v < tree.internal_count(); ++v)
      for (double d : {1e-4, -1e-4}) {
        auto p = r.policy;
        p.controls[v] += d;
        EXPECT_GE(expected_policy_cost(a, 1, tree, p, prices, a.x0), best);
      }
  }
}

TEST(TreeProperties, LawOfTotalProbability) {
  Rng rng(35);
  for (int trial = 0; trial < 15; ++trial) {
    const auto tree = random_tree(rng, 2);
    const auto a = fx::random_lq_agent(rng);
    const auto prices = random_node_prices(rng, tree);
    TreePolicy policy{std::vector<double>(tree.internal_count())};
    for (auto& u : policy.controls) u = fx::uniform(rng, -1, 1);
    double by_paths = 0.0;
    for (std::size_t leaf = 0; leaf < tree.size(); ++leaf) {
      if (!tree.is_leaf(leaf)) continue;
      const auto path = tree.path_to(leaf);
      std::vector<double> u, np, nc;
      double priced = 0.0;
      for (std::size_t k = 0; k + 1 < path.size(); ++k) {
        u.push_back(policy.controls[path[k]]);
        np.push_back(tree.node(path[k + 1]).private_noise[0]);
        nc.push_back(tree.node(path[k + 1]).common_noise);
        priced += prices[path[k]] * u.back();
      }
      const Agent view = a;
      by_paths += tree.node(leaf).path_probability * (trajectory_cost(view, simulate_trajectory(view, u, np, nc)) + priced);
    }
    EXPECT_NEAR(expected_policy_cost(a, 0, tree, policy, prices, a.x0), by_paths, 1e-9 * (1 + std::abs(by_paths)));
  }
}

TEST(TreeProperties, TreeOptimumBeatsAffineMarkovGrid) {
  // Markov policies u_t = k_t x_t + m_t are a subset of tree policies.
  const auto a = scalar_lq(1.1, 1, 1, 0.5, 1.2, NoiseLaw::finite({-0.5, 0.7}, {0.4, 0.6}));
  const std::vector<NoiseLaw> privates{a.noise};
  const auto tree = build_tree(NoiseLaw::none(), privates, 2);
  const auto best_tree = tree_best_response_lq(a, 0, tree, {}, a.x0).expected_cost;
  double best_markov = std::numeric_limits<double>::infinity();
  const int n = 17;
  auto grid = [&](int i) { return -2.0 + 0.25 * i; };
  for (int k0 = 0; k0 < n; ++k0)
    for (int m0 = 0; m0 < n; ++m0)
      for (int k1 = 0; k1 < n; ++k1)
        for (int m1 = 0; m1 < n; ++m1) {
          TreePolicy p{std::vector<double>(tree.internal_count())};
          const double u0 = grid(k0) * a.x0(0) + grid(m0);
          p.controls[0] = u0;
          for (std::size_t c : tree.node(0).children) {
            const double x1 = a.A(0, 0) * a.x0(0) + u0 + tree.node(c).private_noise[0];
            p.controls[c] = grid(k1) * x1 + grid(m1);
          }
          best_markov = std::min(best_markov, expected_policy_cost(a, 0, tree, p, {}, a.x0));
        }
  EXPECT_LE(best_tree, best_markov + 1e-12);
}
