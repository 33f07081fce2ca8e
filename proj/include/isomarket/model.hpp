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
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "isomarket/errors.hpp"
#include "isomarket/linalg.hpp"
#include "isomarket/noise.hpp"
#include "isomarket/rng.hpp"

namespace isomarket {

// Sign convention throughout: a positive control is energy purchased from the
// grid, and the agent pays +price * control for it.

/// Linear dynamics x+ = A x + B (u + n + g * n_common), cost x'Qx + u'Ru.
struct LqAgent {
  Matrix A;
  Matrix B;  // n x 1
  Matrix Q;
  Matrix R;  // 1 x 1
  Vector x0;
  NoiseLaw noise;
  double common_gain = 1.0;

  std::size_t state_dim() const { return static_cast<std::size_t>(A.rows()); }
  double r() const { return R(0, 0); }

  void validate() const {
    const auto n = A.rows();
    if (n == 0 || A.cols() != n) throw InstanceError("LqAgent: A must be square and nonempty");
    if (B.rows() != n || B.cols() != 1) throw InstanceError("LqAgent: B must be n x 1");
    if (Q.rows() != n || Q.cols() != n) throw InstanceError("LqAgent: Q must be n x n");
    if (R.rows() != 1 || R.cols() != 1) throw InstanceError("LqAgent: R must be 1 x 1");
    if (x0.size() != n) throw InstanceError("LqAgent: x0 must have n entries");
    if (!all_finite(A) || !all_finite(B) || !all_finite(Q) || !all_finite(R) || !x0.allFinite() ||
        !std::isfinite(common_gain))
      throw InstanceError("LqAgent: non-finite entry");
    if (asymmetry(Q) > check_tolerance(Q)) throw InstanceError("LqAgent: Q is not symmetric");
    if (min_eigenvalue(Q) < -check_tolerance(Q))
      throw InstanceError("LqAgent: Q is not positive semidefinite");
    if (!(R(0, 0) > 0.0)) throw InstanceError("LqAgent: R is not positive definite");
  }

  Vector step(const Vector& x, double u, double n_private, double n_common) const {
    return A * x + B.col(0) * (u + n_private + common_gain * n_common);
  }

  double stage_cost(const Vector& x, double u) const {
    return x.dot(Q * x) + R(0, 0) * u * u;
  }
  double terminal_cost(const Vector& x) const { return x.dot(Q * x); }
};

/// Exact affine-quadratic description of an agent, used by the centralized
/// oracles: x+ = A x + b (u + n + g * n_common),
/// stage cost x'Qx + q'x + R u^2 + r u + constant, terminal cost x'Qx + q'x.
struct QuadraticModel {
  Matrix A;
  Vector b;
  Matrix Q;
  Vector q;
  double R = 0.0;
  double r = 0.0;
  double constant = 0.0;
  double common_gain = 1.0;
  Vector x0;
};

inline QuadraticModel quadratic_model(const LqAgent& agent) {
  const auto n = agent.A.rows();
  return QuadraticModel{agent.A,     agent.B.col(0), agent.Q,           Vector::Zero(n),
                        agent.r(),   0.0,            0.0,               agent.common_gain,
                        agent.x0};
}

/// Optional analytic derivatives for a ConvexAgent.
struct ConvexDerivatives {
  /// (dc/dx, dc/du) of the stage cost.
  std::function<std::pair<Vector, double>(std::size_t t, const Vector& x, double u)> stage_gradient;
  std::function<Vector(const Vector& x)> terminal_gradient;
  /// (df/dx, df/du) of the transition.
  std::function<std::pair<Matrix, Vector>(std::size_t t, const Vector& x, double u, double n_private,
                                          double n_common)>
      dynamics_jacobian;
};

/// General agent: arbitrary transition rule and stage cost. The total cost must
/// be convex in the control sequence for the market to reach the optimum; this
/// is not checked at construction.
struct ConvexAgent {
  std::size_t n_states = 0;
  std::function<Vector(std::size_t t, const Vector& x, double u, double n_private, double n_common)>
      dynamics;
  std::function<double(std::size_t t, const Vector& x, double u)> stage_cost;
  std::function<double(const Vector& x)> terminal_cost;  // empty means zero
  Vector x0;
  NoiseLaw noise;
  std::optional<ConvexDerivatives> derivatives;
  std::optional<QuadraticModel> quadratic;

  void validate() const {
    if (n_states == 0) throw InstanceError("ConvexAgent: state dimension must be positive");
    if (static_cast<std::size_t>(x0.size()) != n_states)
      throw InstanceError("ConvexAgent: x0 must have n_states entries");
    if (!x0.allFinite()) throw InstanceError("ConvexAgent: non-finite initial state");
    if (!dynamics || !stage_cost) throw InstanceError("ConvexAgent: dynamics and stage cost required");
    if (noise.kind() == NoiseLaw::Kind::gaussian)
      throw InstanceError("ConvexAgent: gaussian noise is only supported for LQ agents");
  }

  Vector step(std::size_t t, const Vector& x, double u, double n_private, double n_common) const {
    return dynamics(t, x, u, n_private, n_common);
  }
  double terminal(const Vector& x) const { return terminal_cost ? terminal_cost(x) : 0.0; }
};

/// Coefficients of the polynomial stage cost
/// x'Qx + q'x + R u^2 + r u + constant + quartic u^4 (terminal: x'Qx + q'x).
struct PolynomialCost {
  Matrix Q;
  Vector q;
  double R = 0.0;
  double r = 0.0;
  double constant = 0.0;
  double quartic = 0.0;
};

/// Builds a ConvexAgent with linear dynamics x+ = A x + B (u + n + g n_common)
/// and a polynomial cost. Derivatives are attached; the exact quadratic model
/// is attached when the quartic coefficient is zero.
inline ConvexAgent make_polynomial_agent(Matrix A, Matrix B, Vector x0, PolynomialCost cost,
                                         NoiseLaw noise = {}, double common_gain = 1.0) {
  const auto n = A.rows();
  if (n == 0 || A.cols() != n || B.rows() != n || B.cols() != 1 || x0.size() != n)
    throw InstanceError("polynomial agent: inconsistent dimensions");
  if (cost.Q.size() == 0) cost.Q = Matrix::Zero(n, n);
  if (cost.q.size() == 0) cost.q = Vector::Zero(n);
  if (cost.Q.rows() != n || cost.Q.cols() != n || cost.q.size() != n)
    throw InstanceError("polynomial agent: cost dimensions do not match the state");
  if (!all_finite(A) || !all_finite(B) || !x0.allFinite() || !all_finite(cost.Q) ||
      !cost.q.allFinite() || !std::isfinite(cost.R) || !std::isfinite(cost.r) ||
      !std::isfinite(cost.constant) || !std::isfinite(cost.quartic))
    throw InstanceError("polynomial agent: non-finite coefficient");
  if (asymmetry(cost.Q) > check_tolerance(cost.Q) || min_eigenvalue(cost.Q) < -check_tolerance(cost.Q))
    throw InstanceError("polynomial agent: Q must be symmetric positive semidefinite");
  if (cost.R < 0.0 || cost.quartic < 0.0)
    throw InstanceError("polynomial agent: R and quartic coefficient must be nonnegative");

  const Vector b = B.col(0);
  ConvexAgent agent;
  agent.n_states = static_cast<std::size_t>(n);
  agent.x0 = x0;
  agent.noise = std::move(noise);
  agent.dynamics = [A, b, common_gain](std::size_t, const Vector& x, double u, double np, double nc) {
    return Vector(A * x + b * (u + np + common_gain * nc));
  };
  agent.stage_cost = [cost](std::size_t, const Vector& x, double u) {
    const double u2 = u * u;
    return x.dot(cost.Q * x) + cost.q.dot(x) + cost.R * u2 + cost.r * u + cost.constant +
           cost.quartic * u2 * u2;
  };
  agent.terminal_cost = [cost](const Vector& x) { return x.dot(cost.Q * x) + cost.q.dot(x); };

  ConvexDerivatives d;
  d.stage_gradient = [cost](std::size_t, const Vector& x, double u) {
    return std::pair<Vector, double>(2.0 * cost.Q * x + cost.q,
                                     2.0 * cost.R * u + cost.r + 4.0 * cost.quartic * u * u * u);
  };
  d.terminal_gradient = [cost](const Vector& x) { return Vector(2.0 * cost.Q * x + cost.q); };
  d.dynamics_jacobian = [A, b](std::size_t, const Vector&, double, double, double) {
    return std::pair<Matrix, Vector>(A, b);
  };
  agent.derivatives = std::move(d);

  if (cost.quartic == 0.0) {
    agent.quadratic = QuadraticModel{A, b, cost.Q, cost.q, cost.R, cost.r, cost.constant, common_gain, x0};
  }
  return agent;
}

/// The same agent seen through the generic interface.
inline ConvexAgent as_convex(const LqAgent& lq) {
  lq.validate();
  return make_polynomial_agent(lq.A, lq.B, lq.x0, PolynomialCost{lq.Q, {}, lq.r(), 0.0, 0.0, 0.0},
                               lq.noise, lq.common_gain);
}

using Agent = std::variant<LqAgent, ConvexAgent>;

inline bool is_lq(const Agent& a) { return std::holds_alternative<LqAgent>(a); }

inline void validate(const Agent& a) {
  std::visit([](const auto& x) { x.validate(); }, a);
}

inline const Vector& initial_state(const Agent& a) {
  return std::visit([](const auto& x) -> const Vector& { return x.x0; }, a);
}

inline const NoiseLaw& noise_law(const Agent& a) {
  return std::visit([](const auto& x) -> const NoiseLaw& { return x.noise; }, a);
}

inline std::size_t state_dim(const Agent& a) {
  if (const auto* lq = std::get_if<LqAgent>(&a)) return lq->state_dim();
  return std::get<ConvexAgent>(a).n_states;
}

inline Vector step(const Agent& a, std::size_t t, const Vector& x, double u, double n_private,
                   double n_common) {
  if (const auto* lq = std::get_if<LqAgent>(&a)) return lq->step(x, u, n_private, n_common);
  return std::get<ConvexAgent>(a).step(t, x, u, n_private, n_common);
}

inline double stage_cost(const Agent& a, std::size_t t, const Vector& x, double u) {
  if (const auto* lq = std::get_if<LqAgent>(&a)) return lq->stage_cost(x, u);
  return std::get<ConvexAgent>(a).stage_cost(t, x, u);
}

inline double terminal_cost(const Agent& a, const Vector& x) {
  if (const auto* lq = std::get_if<LqAgent>(&a)) return lq->terminal_cost(x);
  return std::get<ConvexAgent>(a).terminal(x);
}

/// Exact quadratic model when one exists.
inline std::optional<QuadraticModel> quadratic_model(const Agent& a) {
  if (const auto* lq = std::get_if<LqAgent>(&a)) return quadratic_model(*lq);
  return std::get<ConvexAgent>(a).quadratic;
}

enum class Regime { deterministic, tree, lqg };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::deterministic: return "deterministic";
    case Regime::tree: return "tree";
    case Regime::lqg: return "lqg";
  }
  return "?";
}

/// One ISO problem: agents, horizon, regime and the optional common noise.
class MarketInstance {
 public:
  MarketInstance(std::vector<Agent> agents, std::size_t horizon, Regime regime,
                 NoiseLaw common_noise = {})
      : agents_(std::move(agents)),
        horizon_(horizon),
        regime_(regime),
        common_noise_(std::move(common_noise)) {
    validate();
  }

  const std::vector<Agent>& agents() const { return agents_; }
  const Agent& agent(std::size_t i) const { return agents_.at(i); }
  std::size_t size() const { return agents_.size(); }
  std::size_t horizon() const { return horizon_; }
  Regime regime() const { return regime_; }
  const NoiseLaw& common_noise() const { return common_noise_; }

  bool all_lq() const { return is_lq(agents_.front()); }
  const LqAgent& lq(std::size_t i) const { return std::get<LqAgent>(agents_.at(i)); }

  std::vector<NoiseLaw> private_laws() const {
    std::vector<NoiseLaw> laws;
    laws.reserve(agents_.size());
    for (const auto& a : agents_) laws.push_back(noise_law(a));
    return laws;
  }

  std::vector<Vector> initial_states() const {
    std::vector<Vector> xs;
    xs.reserve(agents_.size());
    for (const auto& a : agents_) xs.push_back(initial_state(a));
    return xs;
  }

 private:
  void validate() const {
    if (agents_.size() < 2) throw InstanceError("a market needs at least two agents");
    if (horizon_ < 1) throw InstanceError("horizon T must be at least 1");
    const bool lq = is_lq(agents_.front());
    for (const auto& a : agents_) {
      if (is_lq(a) != lq) throw InstanceError("agents of one instance must all be LQ or all convex");
      isomarket::validate(a);
    }
    auto check_law = [&](const NoiseLaw& law, const std::string& who) {
      switch (regime_) {
        case Regime::deterministic:
          if (law.kind() != NoiseLaw::Kind::none)
            throw InstanceError(who + ": deterministic regime admits no noise");
          break;
        case Regime::tree:
          if (law.kind() == NoiseLaw::Kind::gaussian)
            throw InstanceError(who + ": tree regime requires finite-support noise");
          if (!law.covers(horizon_))
            throw InstanceError(who + ": time-indexed law is shorter than the horizon");
          break;
        case Regime::lqg:
          if (law.kind() == NoiseLaw::Kind::finite)
            throw InstanceError(who + ": lqg regime expects gaussian noise");
          break;
      }
    };
    if (regime_ == Regime::lqg && !lq) throw InstanceError("lqg regime requires LQ agents");
    for (std::size_t i = 0; i < agents_.size(); ++i)
      check_law(noise_law(agents_[i]), "agent " + std::to_string(i));
    check_law(common_noise_, "common noise");
  }

  std::vector<Agent> agents_;
  std::size_t horizon_;
  Regime regime_;
  NoiseLaw common_noise_;
};

enum class IndexKind { time, node };

/// Values over the remaining decision epochs (time index) or over the
/// non-leaf nodes of a scenario tree (node index).
template <class Tag>
struct IndexedProfile {
  IndexKind kind = IndexKind::time;
  std::size_t first_time = 0;  // absolute time of entry 0 (tree: time of the root)
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }

  template <class Other>
  bool same_index_set(const IndexedProfile<Other>& other) const {
    return kind == other.kind && first_time == other.first_time && size() == other.size();
  }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

using PriceProfile = IndexedProfile<struct PriceTag>;
using BidProfile = IndexedProfile<struct BidTag>;

inline PriceProfile zero_prices(IndexKind kind, std::size_t first_time, std::size_t n) {
  return PriceProfile{kind, first_time, std::vector<double>(n, 0.0)};
}

/// Realized state and control sequence of one agent: states x(s..T), controls u(s..T-1).
struct Trajectory {
  std::vector<Vector> states;
  std::vector<double> controls;
};

/// Rolls an agent forward from (x_start, start_time) under the given controls
/// and per-step private/common disturbances. Empty `common` means zero.
inline Trajectory simulate_trajectory(const Agent& agent, const Vector& x_start, std::size_t start_time,
                                      std::span<const double> controls, std::span<const double> noises,
                                      std::span<const double> common = {}) {
  if (noises.size() != controls.size())
    throw InstanceError("simulate_trajectory: noises and controls differ in length");
  if (!common.empty() && common.size() != controls.size())
    throw InstanceError("simulate_trajectory: common noises and controls differ in length");
  if (static_cast<std::size_t>(x_start.size()) != state_dim(agent))
    throw InstanceError("simulate_trajectory: state dimension mismatch");
  Trajectory traj;
  traj.states.reserve(controls.size() + 1);
  traj.states.push_back(x_start);
  traj.controls.assign(controls.begin(), controls.end());
  for (std::size_t k = 0; k < controls.size(); ++k) {
    const double nc = common.empty() ? 0.0 : common[k];
    traj.states.push_back(step(agent, start_time + k, traj.states.back(), controls[k], noises[k], nc));
  }
  return traj;
}

inline Trajectory simulate_trajectory(const Agent& agent, std::span<const double> controls,
                                      std::span<const double> noises,
                                      std::span<const double> common = {}) {
  return simulate_trajectory(agent, initial_state(agent), 0, controls, noises, common);
}

/// Stage costs for t = start..T-1 plus the state-only terminal cost at T.
inline double trajectory_cost(const Agent& agent, const Trajectory& traj, std::size_t start_time = 0) {
  if (traj.states.size() != traj.controls.size() + 1)
    throw InstanceError("trajectory: need exactly one more state than controls");
  double total = 0.0;
  for (std::size_t k = 0; k < traj.controls.size(); ++k)
    total += stage_cost(agent, start_time + k, traj.states[k], traj.controls[k]);
  return total + terminal_cost(agent, traj.states.back());
}

inline double social_cost(std::span<const Agent> agents, std::span<const Trajectory> trajectories) {
  if (agents.size() != trajectories.size())
    throw InstanceError("social_cost: one trajectory per agent required");
  double total = 0.0;
  for (std::size_t i = 0; i < agents.size(); ++i) total += trajectory_cost(agents[i], trajectories[i]);
  return total;
}

inline double social_cost(const MarketInstance& instance, std::span<const Trajectory> trajectories) {
  for (const auto& tr : trajectories)
    if (tr.controls.size() != instance.horizon())
      throw InstanceError("social_cost: trajectories must cover the full horizon");
  return social_cost(std::span<const Agent>(instance.agents()), trajectories);
}

/// Net purchase per index; zero everywhere means the market clears.
inline std::vector<double> balance_residual(std::span<const BidProfile> bids) {
  if (bids.empty()) throw InstanceError("balance_residual: no bids");
  std::vector<double> residual(bids.front().size(), 0.0);
  for (const auto& b : bids) {
    if (!b.same_index_set(bids.front())) throw InstanceError("balance_residual: bids on different index sets");
    for (std::size_t j = 0; j < residual.size(); ++j) residual[j] += b[j];
  }
  return residual;
}

/// One realization of all disturbances over the horizon.
struct NoisePath {
  std::vector<double> common;                  // [t]
  std::vector<std::vector<double>> per_agent;  // [i][t]
};

inline NoisePath zero_noise_path(std::size_t n_agents, std::size_t horizon) {
  return NoisePath{std::vector<double>(horizon, 0.0),
                   std::vector<std::vector<double>>(n_agents, std::vector<double>(horizon, 0.0))};
}

/// Draws a path time-major: at each t the common value, then agents in order.
inline NoisePath sample_noise_path(const MarketInstance& instance, Rng& rng) {
  const std::size_t T = instance.horizon();
  NoisePath path = zero_noise_path(instance.size(), T);
  for (std::size_t t = 0; t < T; ++t) {
    path.common[t] = instance.common_noise().sample(t, rng);
    for (std::size_t i = 0; i < instance.size(); ++i)
      path.per_agent[i][t] = noise_law(instance.agent(i)).sample(t, rng);
  }
  return path;
}

/// State of one bid-price round.
struct IterationRecord {
  std::size_t round = 0;
  std::vector<double> prices;
  std::vector<std::vector<double>> bids;  // [agent][index]
  std::vector<double> residual;
  double alpha = 0.0;       // gain applied to move from this round's prices to the next
  double dual_value = 0.0;  // sum of the agents' optimal priced objectives
};

/// Audit trail of one bid-price run; rounds are contiguous from 0.
struct IterationLog {
  IndexKind kind = IndexKind::time;
  std::size_t first_time = 0;
  std::vector<IterationRecord> rounds;

  /// Absolute time (time index) or node id (node index) of entry j.
  std::size_t index_label(std::size_t j) const { return kind == IndexKind::time ? first_time + j : j; }
};

}  // namespace isomarket
