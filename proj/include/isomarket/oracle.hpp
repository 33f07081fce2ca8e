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

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "isomarket/errors.hpp"
#include "isomarket/linalg.hpp"
#include "isomarket/model.hpp"
#include "isomarket/scenario_tree.hpp"
#include "isomarket/tree_solver.hpp"

// Centralized reference solvers. Nothing here is used by the market engine;
// these exist to certify its results.

namespace isomarket {

/// Optimum of the centralized balanced problem.
struct CentralizedSolution {
  IndexKind kind = IndexKind::time;
  std::size_t first_time = 0;
  std::vector<std::vector<double>> controls;  // [agent][index]
  std::vector<double> multipliers;            // raw KKT multipliers of the balance rows
  std::vector<double> prices;                 // multipliers per unit probability: the clearing prices
  double cost = 0.0;
};

/// Quadratic form 1/2 z'Hz + g'z + constant of one agent's expected cost as a
/// function of its stacked node controls z.
struct AgentQuadratic {
  Matrix H;
  Vector g;
  double constant = 0.0;

  double operator()(const Vector& z) const { return 0.5 * z.dot(H * z) + g.dot(z) + constant; }
};

/// Dense expansion of the agent's expected cost over the tree: states are
/// written as affine maps of the decision vector and the cost is collected
/// node by node.
inline AgentQuadratic agent_quadratic(const QuadraticModel& m, std::size_t agent_index, const ScenarioTree& tree,
                                      const Vector& x_s) {
  const auto N = static_cast<Eigen::Index>(tree.internal_count());
  const auto n = m.A.rows();
  if (x_s.size() != n) throw InstanceError("agent_quadratic: state dimension mismatch");
  std::vector<Matrix> F(tree.size());
  std::vector<Vector> f(tree.size());
  F[0] = Matrix::Zero(n, N);
  f[0] = x_s;
  AgentQuadratic out{Matrix::Zero(N, N), Vector::Zero(N), 0.0};
  for (std::size_t v = 0; v < tree.size(); ++v) {
    const auto& node = tree.node(v);
    if (v > 0) {
      const std::size_t parent = *node.parent;
      const double noise = node.private_noise[agent_index] + m.common_gain * node.common_noise;
      F[v] = m.A * F[parent];
      F[v].col(static_cast<Eigen::Index>(parent)) += m.b;
      f[v] = m.A * f[parent] + m.b * noise;
    }
    const double p = node.path_probability;
    const Matrix QF = m.Q * F[v];
    out.H += 2.0 * p * F[v].transpose() * QF;
    out.g += p * (2.0 * QF.transpose() * f[v] + F[v].transpose() * m.q);
    out.constant += p * (f[v].dot(m.Q * f[v]) + m.q.dot(f[v]));
    if (!tree.is_leaf(v)) {
      const auto j = static_cast<Eigen::Index>(v);
      out.H(j, j) += 2.0 * p * m.R;
      out.g(j) += p * m.r;
      out.constant += p * m.constant;
    }
  }
  out.H = symmetrized(out.H);
  return out;
}

/// Single-agent priced optimum from the normal equations of the dense form.
struct SingleAgentQp {
  std::vector<double> controls;
  double cost = 0.0;  // priced objective
};

inline SingleAgentQp single_agent_qp(const QuadraticModel& m, std::size_t agent_index, const ScenarioTree& tree,
                                     const PriceProfile& prices, const Vector& x_s) {
  const auto q = agent_quadratic(m, agent_index, tree, x_s);
  Vector linear = q.g;
  for (std::size_t v = 0; v < tree.internal_count(); ++v)
    linear(static_cast<Eigen::Index>(v)) +=
        tree.node(v).path_probability * (prices.values.empty() ? 0.0 : prices[v]);
  Eigen::FullPivLU<Matrix> lu(q.H);
  if (!lu.isInvertible()) throw InstanceError("single_agent_qp: singular Hessian");
  const Vector z = lu.solve(-linear);
  return {to_std(z), 0.5 * z.dot(q.H * z) + linear.dot(z) + q.constant};
}

namespace detail {

inline std::vector<QuadraticModel> quadratic_models(const MarketInstance& instance) {
  std::vector<QuadraticModel> models;
  for (std::size_t i = 0; i < instance.size(); ++i) {
    auto m = quadratic_model(instance.agent(i));
    if (!m) throw UnsupportedRegimeError("centralized_qp: agent " + std::to_string(i) + " has no quadratic model");
    models.push_back(std::move(*m));
  }
  return models;
}

}  // namespace detail

/// Centralized tree problem solved through its KKT system:
///   min sum_i E[cost_i]  s.t.  sum_i U_i(v) = 0 at every decision node v.
inline CentralizedSolution centralized_qp(const MarketInstance& instance, const ScenarioTree& tree,
                                          const std::vector<Vector>& states = {}) {
  if (tree.agent_count() != instance.size()) throw InstanceError("centralized_qp: tree agent count mismatch");
  const auto models = detail::quadratic_models(instance);
  const auto xs = states.empty() ? instance.initial_states() : states;
  if (xs.size() != instance.size()) throw InstanceError("centralized_qp: one state per agent required");
  const auto M = static_cast<Eigen::Index>(instance.size());
  const auto N = static_cast<Eigen::Index>(tree.internal_count());
  const Eigen::Index dim = M * N + N;
  Matrix K = Matrix::Zero(dim, dim);
  Vector rhs = Vector::Zero(dim);
  double constant = 0.0;
  for (Eigen::Index i = 0; i < M; ++i) {
    const auto q = agent_quadratic(models[static_cast<std::size_t>(i)], static_cast<std::size_t>(i), tree,
                                   xs[static_cast<std::size_t>(i)]);
    K.block(i * N, i * N, N, N) = q.H;
    rhs.segment(i * N, N) = -q.g;
    constant += q.constant;
    K.block(M * N, i * N, N, N).setIdentity();
    K.block(i * N, M * N, N, N).setIdentity();
  }
  Eigen::FullPivLU<Matrix> lu(K);
  if (!lu.isInvertible()) throw InstanceError("centralized_qp: singular KKT system");
  const Vector sol = lu.solve(rhs);

  CentralizedSolution out;
  out.kind = IndexKind::node;
  out.first_time = tree.start_time();
  const Vector z = sol.head(M * N);
  out.cost = constant;
  for (Eigen::Index i = 0; i < M; ++i) {
    const Vector zi = z.segment(i * N, N);
    out.controls.push_back(to_std(zi));
    out.cost += 0.5 * zi.dot(K.block(i * N, i * N, N, N) * zi) - rhs.segment(i * N, N).dot(zi);
  }
  out.multipliers = to_std(sol.tail(N));
  for (Eigen::Index v = 0; v < N; ++v)
    out.prices.push_back(out.multipliers[static_cast<std::size_t>(v)] /
                         tree.node(static_cast<std::size_t>(v)).path_probability);
  return out;
}

/// Noise-free centralized problem from epoch s (time-indexed result).
inline CentralizedSolution centralized_qp(const MarketInstance& instance, std::size_t s = 0,
                                          const std::vector<Vector>& states = {}) {
  if (s >= instance.horizon()) throw InstanceError("centralized_qp: epoch beyond horizon");
  auto out = centralized_qp(instance, path_tree(instance.size(), instance.horizon() - s, s), states);
  out.kind = IndexKind::time;
  return out;
}

struct GridSpec {
  double lower = -1.0;
  double upper = 1.0;
  double step = 1e-2;
  std::size_t max_points = 20'000'000;
};

class GridTooLargeError : public InstanceError {
 public:
  GridTooLargeError(double estimate, std::size_t limit)
      : InstanceError("grid search would evaluate " + detail::shortest(estimate) + " points (limit " +
                      std::to_string(limit) + ")"),
        estimate_(estimate) {}
  double estimate() const { return estimate_; }

 private:
  double estimate_;
};

struct GridResult {
  std::vector<double> first_agent;  // best U_1 per index; U_2 = -U_1
  double cost = 0.0;
  std::size_t evaluated = 0;
};

/// Exhaustive scan over balanced two-agent assignments U_2 = -U_1 with U_1 on
/// a uniform grid in every decision index (at most three indices).
inline GridResult brute_force_grid(const MarketInstance& instance, const ScenarioTree& tree, const GridSpec& grid,
                                   const std::vector<Vector>& states = {}) {
  if (instance.size() != 2) throw InstanceError("brute_force_grid: exactly two agents required");
  const std::size_t d = tree.internal_count();
  if (d == 0 || d > 3) throw InstanceError("brute_force_grid: at most three decision indices");
  if (!(grid.step > 0.0) || !(grid.upper >= grid.lower)) throw InstanceError("brute_force_grid: bad grid");
  const auto per_dim = static_cast<std::size_t>(std::floor((grid.upper - grid.lower) / grid.step + 1e-9)) + 1;
  const double estimate = std::pow(static_cast<double>(per_dim), static_cast<double>(d));
  if (estimate > static_cast<double>(grid.max_points)) throw GridTooLargeError(estimate, grid.max_points);
  const auto xs = states.empty() ? instance.initial_states() : states;
  const PriceProfile no_prices;

  GridResult best;
  best.cost = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> idx(d, 0);
  TreePolicy p1{std::vector<double>(d)}, p2{std::vector<double>(d)};
  const auto total = static_cast<std::size_t>(estimate);
  for (std::size_t count = 0; count < total; ++count) {
    for (std::size_t j = 0; j < d; ++j) {
      p1.controls[j] = grid.lower + static_cast<double>(idx[j]) * grid.step;
      p2.controls[j] = -p1.controls[j];
    }
    const double c = expected_policy_cost(instance.agent(0), 0, tree, p1, no_prices, xs[0]) +
                     expected_policy_cost(instance.agent(1), 1, tree, p2, no_prices, xs[1]);
    ++best.evaluated;
    if (c < best.cost) {
      best.cost = c;
      best.first_agent = p1.controls;
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (++idx[j] < per_dim) break;
      idx[j] = 0;
    }
  }
  return best;
}

inline GridResult brute_force_grid(const MarketInstance& instance, const GridSpec& grid) {
  return brute_force_grid(instance, path_tree(instance.size(), instance.horizon(), 0), grid);
}

struct DualityGap {
  double primal = 0.0;  // cost of the balanced projection of the bids
  double dual = 0.0;    // D(lambda): sum of the agents' priced objectives
  double gap = 0.0;
};

/// Gap between a feasible primal point and D(lambda), assuming `bids` are the
/// agents' best responses to `prices`. The primal point subtracts the mean
/// residual from every agent's bid.
inline DualityGap duality_gap(const MarketInstance& instance, const ScenarioTree& tree, const PriceProfile& prices,
                              std::span<const BidProfile> bids, const std::vector<Vector>& states = {}) {
  const std::size_t M = instance.size();
  if (bids.size() != M) throw InstanceError("duality_gap: one bid per agent required");
  const auto xs = states.empty() ? instance.initial_states() : states;
  const auto residual = balance_residual(bids);
  PriceProfile node_prices{IndexKind::node, tree.start_time(), prices.values};
  const PriceProfile no_prices;
  DualityGap out;
  for (std::size_t i = 0; i < M; ++i) {
    TreePolicy bid{bids[i].values};
    out.dual += expected_policy_cost(instance.agent(i), i, tree, bid, node_prices, xs[i]);
    for (std::size_t j = 0; j < residual.size(); ++j) bid.controls[j] -= residual[j] / static_cast<double>(M);
    out.primal += expected_policy_cost(instance.agent(i), i, tree, bid, no_prices, xs[i]);
  }
  out.gap = out.primal - out.dual;
  return out;
}

/// Time-indexed form from epoch prices.first_time.
inline DualityGap duality_gap(const MarketInstance& instance, const PriceProfile& prices,
                              std::span<const BidProfile> bids, const std::vector<Vector>& states = {}) {
  const std::size_t s = prices.first_time;
  if (s + prices.size() != instance.horizon()) throw InstanceError("duality_gap: prices must run to the horizon");
  return duality_gap(instance, path_tree(instance.size(), prices.size(), s), prices, bids, states);
}

}  // namespace isomarket
