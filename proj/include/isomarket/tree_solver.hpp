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
#include <functional>
#include <optional>
#include <vector>

#include "isomarket/errors.hpp"
#include "isomarket/linalg.hpp"
#include "isomarket/lq.hpp"
#include "isomarket/model.hpp"
#include "isomarket/scenario_tree.hpp"

namespace isomarket {

/// One agent's control at every non-leaf node of a scenario tree.
struct TreePolicy {
  std::vector<double> controls;  // indexed by node id, size tree.internal_count()
};

struct TreeBestResponse {
  TreePolicy policy;
  double expected_cost = 0.0;  // priced expected objective at the returned policy
  bool converged = true;
  double gradient_norm = 0.0;
  std::size_t iterations = 0;
};

struct ConvexSolverSettings {
  double gtol = 1e-7;
  std::size_t max_iterations = 5000;
  bool finite_difference = false;  // ignore analytic derivatives even if present
};

namespace detail {

inline void check_tree_inputs(const ScenarioTree& tree, std::size_t agent_index, const PriceProfile& prices,
                              std::size_t state_dim, const Vector& x_s) {
  if (agent_index >= tree.agent_count()) throw InstanceError("tree solver: agent index outside the tree");
  if (!prices.values.empty()) {
    if (prices.kind != IndexKind::node || prices.size() != tree.internal_count())
      throw InstanceError("tree solver: prices must have one entry per non-leaf node");
    if (!prices.all_finite()) throw InstanceError("tree solver: non-finite price");
  }
  if (static_cast<std::size_t>(x_s.size()) != state_dim)
    throw InstanceError("tree solver: state dimension mismatch");
}

inline double price_at(const PriceProfile& prices, std::size_t v) {
  return prices.values.empty() ? 0.0 : prices[v];
}

}  // namespace detail

/// Node prices equal to zero on every decision node of `tree`.
inline PriceProfile zero_node_prices(const ScenarioTree& tree) {
  return zero_prices(IndexKind::node, tree.start_time(), tree.internal_count());
}

/// States reached at every node of the tree under `policy`, starting from x_s.
inline std::vector<Vector> policy_states(const Agent& agent, std::size_t agent_index, const ScenarioTree& tree,
                                         const TreePolicy& policy, const Vector& x_s) {
  if (policy.controls.size() != tree.internal_count())
    throw InstanceError("tree policy must define one control per non-leaf node");
  std::vector<Vector> xs(tree.size());
  xs[0] = x_s;
  for (std::size_t w = 1; w < tree.size(); ++w) {
    const auto& node = tree.node(w);
    const std::size_t v = *node.parent;
    xs[w] = step(agent, tree.time_of(v), xs[v], policy.controls[v], node.private_noise[agent_index],
                 node.common_noise);
  }
  return xs;
}

/// Expected priced cost of a tree policy: sum over decision nodes of
/// p_v (stage cost + price * control), plus p_leaf times the terminal cost.
/// Empty `prices` means zero prices.
inline double expected_policy_cost(const Agent& agent, std::size_t agent_index, const ScenarioTree& tree,
                                   const TreePolicy& policy, const PriceProfile& prices, const Vector& x_s) {
  detail::check_tree_inputs(tree, agent_index, prices, state_dim(agent), x_s);
  const auto xs = policy_states(agent, agent_index, tree, policy, x_s);
  double total = 0.0;
  for (std::size_t v = 0; v < tree.size(); ++v) {
    const double p = tree.node(v).path_probability;
    if (tree.is_leaf(v)) {
      total += p * terminal_cost(agent, xs[v]);
    } else {
      const double u = policy.controls[v];
      total += p * (stage_cost(agent, tree.time_of(v), xs[v], u) + detail::price_at(prices, v) * u);
    }
  }
  return total;
}

/// Exact tree best response of an LQ agent by backward induction. Each node's
/// value function is quadratic-affine in the local state; children are
/// averaged with their edge probabilities.
inline TreeBestResponse tree_best_response_lq(const LqAgent& agent, std::size_t agent_index,
                                              const ScenarioTree& tree, const PriceProfile& prices,
                                              const Vector& x_s) {
  agent.validate();
  detail::check_tree_inputs(tree, agent_index, prices, agent.state_dim(), x_s);
  const std::size_t N = tree.size();
  const Vector b = agent.B.col(0);
  const auto n = agent.A.rows();
  auto disturbance = [&](std::size_t w) {
    const auto& node = tree.node(w);
    return Vector(b * (node.private_noise[agent_index] + agent.common_gain * node.common_noise));
  };

  std::vector<Matrix> P(N);
  std::vector<Vector> s(N);
  std::vector<double> c(N, 0.0);
  std::vector<Matrix> K(tree.internal_count());
  std::vector<double> k(tree.internal_count(), 0.0);
  for (std::size_t v = N; v-- > 0;) {
    if (tree.is_leaf(v)) {
      P[v] = agent.Q;
      s[v] = Vector::Zero(n);
      continue;
    }
    Matrix Pbar = Matrix::Zero(n, n);
    Vector sbar = Vector::Zero(n);
    double cbar = 0.0;
    for (std::size_t w : tree.node(v).children) {
      const double q = tree.node(w).edge_probability;
      const Vector d = disturbance(w);
      const Vector Pd = P[w] * d;
      Pbar += q * P[w];
      sbar += q * (2.0 * Pd + s[w]);
      cbar += q * (d.dot(Pd) + s[w].dot(d) + c[w]);
    }
    auto st = detail::affine_lq_step(agent.A, b, agent.Q, agent.r(), Pbar, sbar, cbar,
                                     detail::price_at(prices, v));
    P[v] = std::move(st.P);
    s[v] = std::move(st.s);
    c[v] = st.c;
    K[v] = std::move(st.K);
    k[v] = st.k;
  }

  TreeBestResponse out;
  out.policy.controls.resize(tree.internal_count());
  std::vector<Vector> xs(N);
  xs[0] = x_s;
  for (std::size_t v = 0; v < tree.internal_count(); ++v) {
    const double u = (K[v] * xs[v])(0) + k[v];
    out.policy.controls[v] = u;
    for (std::size_t w : tree.node(v).children) xs[w] = agent.A * xs[v] + b * u + disturbance(w);
  }
  out.expected_cost = x_s.dot(P[0] * x_s) + s[0].dot(x_s) + c[0];
  return out;
}

namespace detail {

// Analytic gradient of expected_policy_cost by a backward costate sweep.
inline Vector adjoint_gradient(const ConvexAgent& agent, std::size_t agent_index, const ScenarioTree& tree,
                               const TreePolicy& policy, const PriceProfile& prices, const Vector& x_s) {
  const auto& d = *agent.derivatives;
  const Agent view = agent;
  const auto xs = policy_states(view, agent_index, tree, policy, x_s);
  std::vector<Vector> costate(tree.size());
  Vector grad = Vector::Zero(static_cast<Eigen::Index>(tree.internal_count()));
  for (std::size_t v = tree.size(); v-- > 0;) {
    const auto& node = tree.node(v);
    const double p = node.path_probability;
    if (tree.is_leaf(v)) {
      costate[v] = agent.terminal_cost ? Vector(p * d.terminal_gradient(xs[v]))
                                       : Vector(Vector::Zero(xs[v].size()));
      continue;
    }
    const std::size_t t = tree.time_of(v);
    const double u = policy.controls[v];
    auto [cx, cu] = d.stage_gradient(t, xs[v], u);
    Vector nu = p * cx;
    double g = p * (cu + price_at(prices, v));
    for (std::size_t w : node.children) {
      const auto& child = tree.node(w);
      auto [Fx, Fu] = d.dynamics_jacobian(t, xs[v], u, child.private_noise[agent_index], child.common_noise);
      nu += Fx.transpose() * costate[w];
      g += Fu.dot(costate[w]);
    }
    costate[v] = std::move(nu);
    grad(static_cast<Eigen::Index>(v)) = g;
  }
  return grad;
}

struct MinimizeResult {
  Vector x;
  double value = 0.0;
  double gradient_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

// BFGS with Armijo backtracking; stops when the gradient 2-norm is <= gtol.
inline MinimizeResult bfgs_minimize(const std::function<double(const Vector&)>& f,
                                    const std::function<Vector(const Vector&)>& grad, Vector x,
                                    double gtol, std::size_t max_iterations) {
  const auto n = x.size();
  MinimizeResult out;
  double fx = f(x);
  Vector g = grad(x);
  Matrix Hinv = Matrix::Identity(n, n);
  bool scaled = false;
  std::size_t it = 0;
  for (; it < max_iterations; ++it) {
    if (g.norm() <= gtol) break;
    Vector dir = -Hinv * g;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      Hinv.setIdentity();
      dir = -g;
      slope = -g.squaredNorm();
    }
    Vector x_new;
    Vector g_new;
    double f_new = fx;
    bool accepted = false;
    // Once the predicted decrease is below the resolution of f, Armijo tests
    // are noise; accept steps that shrink the gradient instead.
    const bool roundoff = -slope <= 1e-12 * (1.0 + std::abs(fx));
    if (!roundoff) {
      double step = 1.0;
      for (int halvings = 0; halvings < 60; ++halvings, step *= 0.5) {
        x_new = x + step * dir;
        f_new = f(x_new);
        if (f_new <= fx + 1e-4 * step * slope) {
          accepted = true;
          g_new = grad(x_new);
          break;
        }
      }
    }
    if (!accepted) {
      double step = 1.0;
      for (int halvings = 0; halvings < 30; ++halvings, step *= 0.5) {
        x_new = x + step * dir;
        g_new = grad(x_new);
        if (g_new.norm() < g.norm()) {
          f_new = f(x_new);
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) break;  // no further progress at working precision
    const Vector sk = x_new - x;
    const Vector yk = g_new - g;
    const double sy = sk.dot(yk);
    if (sy > 1e-12 * sk.norm() * yk.norm()) {
      if (!scaled) {
        Hinv *= sy / yk.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Matrix I = Matrix::Identity(n, n);
      Hinv = (I - rho * sk * yk.transpose()) * Hinv * (I - rho * yk * sk.transpose()) + rho * sk * sk.transpose();
    }
    x = std::move(x_new);
    fx = f_new;
    g = g_new;
  }
  out.gradient_norm = g.norm();
  out.converged = out.gradient_norm <= gtol;
  out.iterations = it;
  out.value = fx;
  out.x = std::move(x);
  return out;
}

}  // namespace detail

/// Numerical tree best response of a generic convex agent: BFGS over the
/// stacked per-node controls, with analytic adjoint gradients when the agent
/// supplies derivatives and central differences otherwise.
inline TreeBestResponse tree_best_response_convex(const ConvexAgent& agent, std::size_t agent_index,
                                                  const ScenarioTree& tree, const PriceProfile& prices,
                                                  const Vector& x_s, const ConvexSolverSettings& settings = {},
                                                  const TreePolicy* warm_start = nullptr) {
  agent.validate();
  detail::check_tree_inputs(tree, agent_index, prices, agent.n_states, x_s);
  const Agent view = agent;
  const auto n = static_cast<Eigen::Index>(tree.internal_count());
  auto as_policy = [](const Vector& z) { return TreePolicy{to_std(z)}; };
  auto objective = [&](const Vector& z) {
    return expected_policy_cost(view, agent_index, tree, as_policy(z), prices, x_s);
  };
  std::function<Vector(const Vector&)> gradient;
  if (agent.derivatives && !settings.finite_difference) {
    gradient = [&](const Vector& z) {
      return detail::adjoint_gradient(agent, agent_index, tree, as_policy(z), prices, x_s);
    };
  } else {
    gradient = [&](const Vector& z) {
      Vector g(n);
      Vector probe = z;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double h = 1e-6 * (1.0 + std::abs(z(j)));
        probe(j) = z(j) + h;
        const double up = objective(probe);
        probe(j) = z(j) - h;
        const double down = objective(probe);
        probe(j) = z(j);
        g(j) = (up - down) / (2.0 * h);
      }
      return g;
    };
  }
  Vector z0 = Vector::Zero(n);
  if (warm_start && warm_start->controls.size() == tree.internal_count()) z0 = to_vector(warm_start->controls);
  const auto res = detail::bfgs_minimize(objective, gradient, z0, settings.gtol, settings.max_iterations);

  TreeBestResponse out;
  out.policy = as_policy(res.x);
  out.expected_cost = res.value;
  out.converged = res.converged;
  out.gradient_norm = res.gradient_norm;
  out.iterations = res.iterations;
  return out;
}

inline TreeBestResponse tree_best_response(const Agent& agent, std::size_t agent_index, const ScenarioTree& tree,
                                           const PriceProfile& prices, const Vector& x_s,
                                           const ConvexSolverSettings& settings = {},
                                           const TreePolicy* warm_start = nullptr) {
  if (const auto* lq = std::get_if<LqAgent>(&agent)) return tree_best_response_lq(*lq, agent_index, tree, prices, x_s);
  return tree_best_response_convex(std::get<ConvexAgent>(agent), agent_index, tree, prices, x_s, settings,
                                   warm_start);
}

}  // namespace isomarket
