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

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <exception>
#include <functional>
#include <future>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "isomarket/errors.hpp"
#include "isomarket/lq.hpp"
#include "isomarket/model.hpp"
#include "isomarket/scenario_tree.hpp"
#include "isomarket/tree_solver.hpp"

namespace isomarket {

/// Price adaptation gains alpha_k, k = 1, 2, ...
class StepSchedule {
 public:
  enum class Kind { harmonic, constant, geometric };

  static StepSchedule harmonic() { return StepSchedule(Kind::harmonic, 1.0, 1.0); }
  static StepSchedule constant(double alpha) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InstanceError("constant step must be positive");
    return StepSchedule(Kind::constant, alpha, 1.0);
  }
  static StepSchedule geometric(double first, double ratio) {
    if (!(first > 0.0) || !(ratio > 0.0) || !(ratio <= 1.0))
      throw InstanceError("geometric step needs first > 0 and ratio in (0, 1]");
    return StepSchedule(Kind::geometric, first, ratio);
  }

  /// Parses "harmonic", "const:<a>" and "geometric:<a>:<ratio>".
  static StepSchedule parse(std::string_view text) {
    auto number = [&](std::string_view s) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size())
        throw InstanceError("bad number in step schedule: " + std::string(text));
      return v;
    };
    if (text == "harmonic") return harmonic();
    for (std::string_view prefix : {"const:", "constant:"})
      if (text.starts_with(prefix)) return constant(number(text.substr(prefix.size())));
    if (text.starts_with("geometric:")) {
      const auto rest = text.substr(10);
      const auto colon = rest.find(':');
      if (colon == std::string_view::npos) throw InstanceError("geometric step needs <first>:<ratio>");
      return geometric(number(rest.substr(0, colon)), number(rest.substr(colon + 1)));
    }
    throw InstanceError("unknown step schedule: " + std::string(text));
  }

  Kind kind() const { return kind_; }

  double operator()(std::size_t k) const {
    if (k == 0) throw InstanceError("step schedules are indexed from k = 1");
    switch (kind_) {
      case Kind::harmonic: return 1.0 / static_cast<double>(k);
      case Kind::constant: return a_;
      case Kind::geometric: return a_ * std::pow(ratio_, static_cast<double>(k - 1));
    }
    return 0.0;
  }

  std::string describe() const {
    switch (kind_) {
      case Kind::harmonic: return "harmonic";
      case Kind::constant: return "const:" + detail::shortest(a_);
      case Kind::geometric: return "geometric:" + detail::shortest(a_) + ":" + detail::shortest(ratio_);
    }
    return "?";
  }

 private:
  StepSchedule(Kind kind, double a, double ratio) : kind_(kind), a_(a), ratio_(ratio) {}
  Kind kind_;
  double a_;
  double ratio_;
};

/// additive:   lambda+ = lambda + alpha * r          (dual subgradient ascent)
/// relaxation: lambda+ = (1 - alpha) lambda + alpha r
/// with r the net purchase per index. The relaxation form is the literal
/// published update; its fixed points satisfy lambda = r rather than r = 0.
enum class PriceRule { additive, relaxation };

inline const char* to_string(PriceRule rule) { return rule == PriceRule::additive ? "additive" : "relaxation"; }

inline PriceRule parse_price_rule(std::string_view text) {
  if (text == "additive") return PriceRule::additive;
  if (text == "relaxation") return PriceRule::relaxation;
  throw InstanceError("unknown price rule: " + std::string(text));
}

struct ConvergenceCriterion {
  double bid_tol = 1e-6;      // sup-norm bid change over one round
  double balance_tol = 1e-6;  // sup-norm net purchase
  std::size_t max_rounds = 100000;

  void validate() const {
    if (!(bid_tol > 0.0) || !(balance_tol > 0.0)) throw InstanceError("convergence tolerances must be positive");
    if (max_rounds == 0) throw InstanceError("max_rounds must be positive");
  }
};

struct MarketSettings {
  StepSchedule schedule = StepSchedule::harmonic();
  PriceRule rule = PriceRule::additive;
  ConvergenceCriterion criterion;
  std::vector<double> initial_prices;  // empty: all zeros
  bool parallel = false;               // evaluate agent best responses concurrently
  ConvexSolverSettings inner;

  /// Inner settings actually used: gtol is capped at a tenth of the outer
  /// tolerances so that best responses are resolved finer than the stopping test.
  ConvexSolverSettings effective_inner() const {
    ConvexSolverSettings s = inner;
    s.gtol = std::min(s.gtol, 0.1 * std::min(criterion.bid_tol, criterion.balance_tol));
    return s;
  }
};

inline PriceProfile price_update(const PriceProfile& prices, std::span<const BidProfile> bids, PriceRule rule,
                                 double alpha) {
  for (const auto& b : bids)
    if (!b.same_index_set(prices)) throw InstanceError("price_update: bids and prices on different index sets");
  const auto r = balance_residual(bids);
  PriceProfile next = prices;
  for (std::size_t j = 0; j < r.size(); ++j) {
    next[j] = rule == PriceRule::additive ? prices[j] + alpha * r[j]
                                          : (1.0 - alpha) * prices[j] + alpha * r[j];
  }
  return next;
}

struct MarketResult {
  bool converged = false;
  PriceProfile prices;           // last announced prices (lambda* when converged)
  std::vector<BidProfile> bids;  // responses to `prices`
  std::vector<double> residual;
  double dual_value = 0.0;
  std::size_t inner_failures = 0;  // best responses that hit their own iteration cap
  IterationLog log;

  std::size_t rounds() const { return log.rounds.size(); }
  double max_residual() const { return sup_norm(residual); }
};

/// Raised by the receding-horizon loop when an epoch's iteration fails.
class NonConvergenceError : public std::runtime_error {
 public:
  NonConvergenceError(std::size_t epoch, MarketResult result)
      : std::runtime_error("bid-price iteration did not converge at epoch " + std::to_string(epoch) + " after " +
                           std::to_string(result.rounds()) + " rounds (max residual " +
                           detail::shortest(result.max_residual()) + ")"),
        epoch_(epoch),
        result_(std::move(result)) {}

  std::size_t epoch() const { return epoch_; }
  const MarketResult& result() const { return result_; }

 private:
  std::size_t epoch_;
  MarketResult result_;
};

namespace detail {

struct AgentResponse {
  std::vector<double> bids;
  double objective = 0.0;
  bool converged = true;
};

using Responder = std::function<AgentResponse(std::size_t agent, const PriceProfile& prices)>;

// The Bid Update / Price Update alternation shared by every regime.
inline MarketResult run_bid_price(IndexKind kind, std::size_t first_time, std::size_t n_index,
                                  std::size_t n_agents, const Responder& respond, const MarketSettings& settings,
                                  const std::vector<double>& initial_prices) {
  settings.criterion.validate();
  MarketResult out;
  out.log.kind = kind;
  out.log.first_time = first_time;
  PriceProfile prices = zero_prices(kind, first_time, n_index);
  if (!initial_prices.empty()) {
    if (initial_prices.size() != n_index) throw InstanceError("initial prices do not match the index set");
    prices.values = initial_prices;
  }
  std::vector<BidProfile> prev;
  std::vector<AgentResponse> responses(n_agents);
  for (std::size_t k = 0; k < settings.criterion.max_rounds; ++k) {
    if (settings.parallel && n_agents > 1) {
      std::vector<std::future<AgentResponse>> jobs;
      jobs.reserve(n_agents);
      for (std::size_t i = 0; i < n_agents; ++i)
        jobs.push_back(std::async(std::launch::async, [&, i] { return respond(i, prices); }));
      for (std::size_t i = 0; i < n_agents; ++i) responses[i] = jobs[i].get();
    } else {
      for (std::size_t i = 0; i < n_agents; ++i) responses[i] = respond(i, prices);
    }
    std::vector<BidProfile> bids(n_agents);
    double dual = 0.0;
    for (std::size_t i = 0; i < n_agents; ++i) {
      bids[i] = BidProfile{kind, first_time, std::move(responses[i].bids)};
      dual += responses[i].objective;
      if (!responses[i].converged) ++out.inner_failures;
    }
    auto residual = balance_residual(bids);

    bool done = false;
    if (!prev.empty()) {
      double change = 0.0;
      for (std::size_t i = 0; i < n_agents; ++i)
        for (std::size_t j = 0; j < n_index; ++j) change = std::max(change, std::abs(bids[i][j] - prev[i][j]));
      done = change <= settings.criterion.bid_tol && sup_norm(residual) <= settings.criterion.balance_tol;
    }
    const double alpha = done ? 0.0 : settings.schedule(k + 1);

    IterationRecord rec;
    rec.round = k;
    rec.prices = prices.values;
    rec.bids.reserve(n_agents);
    for (const auto& b : bids) rec.bids.push_back(b.values);
    rec.residual = residual;
    rec.alpha = alpha;
    rec.dual_value = dual;
    out.log.rounds.push_back(std::move(rec));

    out.prices = prices;
    out.residual = std::move(residual);
    out.dual_value = dual;
    if (done) {
      out.converged = true;
      out.bids = std::move(bids);
      return out;
    }
    PriceProfile next = price_update(prices, bids, settings.rule, alpha);
    out.bids = std::move(bids);
    if (!next.all_finite()) break;  // diverged
    prev = out.bids;
    prices = std::move(next);
  }
  return out;
}

inline std::vector<Vector> resolve_states(const MarketInstance& instance, const std::vector<Vector>& states) {
  if (states.empty()) return instance.initial_states();
  if (states.size() != instance.size()) throw InstanceError("one state per agent required");
  for (std::size_t i = 0; i < states.size(); ++i)
    if (static_cast<std::size_t>(states[i].size()) != state_dim(instance.agent(i)))
      throw InstanceError("state dimension mismatch for agent " + std::to_string(i));
  return states;
}

inline MarketResult time_indexed_iteration(const MarketInstance& instance, std::size_t s,
                                           const std::vector<Vector>& states_in, const MarketSettings& settings,
                                           const std::vector<double>& initial_prices) {
  const std::size_t T = instance.horizon();
  if (s >= T) throw InstanceError("bid-price iteration: epoch s must be below the horizon");
  const auto states = resolve_states(instance, states_in);
  const std::size_t M = instance.size();
  const std::size_t steps = T - s;
  Responder respond;
  std::optional<ScenarioTree> path;
  std::vector<TreePolicy> warm(M);
  const ConvexSolverSettings inner = settings.effective_inner();
  if (instance.all_lq()) {
    respond = [&](std::size_t i, const PriceProfile& prices) {
      auto r = lq_best_response(instance.lq(i), prices, states[i]);
      return AgentResponse{std::move(r.bids.values), r.cost, true};
    };
  } else {
    path.emplace(path_tree(M, steps, s));
    respond = [&](std::size_t i, const PriceProfile& prices) {
      const PriceProfile node_prices{IndexKind::node, s, prices.values};
      auto r = tree_best_response_convex(std::get<ConvexAgent>(instance.agent(i)), i, *path, node_prices,
                                         states[i], inner, &warm[i]);
      warm[i] = r.policy;
      // On a single path, node ids coincide with time offsets.
      return AgentResponse{std::move(r.policy.controls), r.expected_cost, r.converged};
    };
  }
  return run_bid_price(IndexKind::time, s, steps, M, respond, settings, initial_prices);
}

}  // namespace detail

/// Bid-price iteration on the noise-free problem from epoch s and the given
/// states (default: the initial states). Prices and bids are time-indexed.
inline MarketResult deterministic_bid_price_iteration(const MarketInstance& instance, const MarketSettings& settings,
                                                      std::size_t s = 0, const std::vector<Vector>& states = {}) {
  if (instance.regime() == Regime::tree)
    throw UnsupportedRegimeError("deterministic_bid_price_iteration: use the tree iteration for tree instances");
  return detail::time_indexed_iteration(instance, s, states, settings, settings.initial_prices);
}

/// Certainty-equivalent bidding for LQG agents: every agent answers the
/// time-indexed prices with its noise-free open-loop optimum from its own
/// current state.
inline MarketResult lqg_bid_price_iteration(const MarketInstance& instance, std::size_t s,
                                            const std::vector<Vector>& states, const MarketSettings& settings) {
  if (instance.regime() != Regime::lqg) throw UnsupportedRegimeError("lqg_bid_price_iteration: lqg regime required");
  return detail::time_indexed_iteration(instance, s, states, settings, settings.initial_prices);
}

/// Bid-price iteration over a scenario tree: prices and bids are indexed by
/// the tree's non-leaf nodes. The tree root is the current epoch.
inline MarketResult tree_bid_price_iteration(const MarketInstance& instance, const ScenarioTree& tree,
                                             const std::vector<Vector>& states_in, const MarketSettings& settings) {
  if (instance.regime() == Regime::lqg)
    throw UnsupportedRegimeError("tree_bid_price_iteration: lqg instances have no finite tree");
  if (tree.agent_count() != instance.size()) throw InstanceError("tree agent count does not match the instance");
  if (tree.start_time() + tree.horizon() != instance.horizon())
    throw InstanceError("tree must end at the instance horizon");
  if (tree.internal_count() == 0) throw InstanceError("tree has no decision nodes");
  const auto states = detail::resolve_states(instance, states_in);
  std::vector<TreePolicy> warm(instance.size());
  const ConvexSolverSettings inner = settings.effective_inner();
  detail::Responder respond = [&](std::size_t i, const PriceProfile& prices) {
    auto r = tree_best_response(instance.agent(i), i, tree, prices, states[i], inner, &warm[i]);
    warm[i] = r.policy;
    return detail::AgentResponse{std::move(r.policy.controls), r.expected_cost, r.converged};
  };
  return detail::run_bid_price(IndexKind::node, tree.start_time(), tree.internal_count(), instance.size(), respond,
                               settings, settings.initial_prices);
}

enum class MpcScheme { deterministic, tree, lqg };

inline const char* to_string(MpcScheme s) {
  switch (s) {
    case MpcScheme::deterministic: return "deterministic";
    case MpcScheme::tree: return "tree";
    case MpcScheme::lqg: return "lqg";
  }
  return "?";
}

struct EpochRecord {
  std::size_t epoch = 0;
  double clearing_price = 0.0;  // lambda*(s) at the realized node
  std::vector<double> actions;  // implemented U*_i(s)
  MarketResult market;
};

struct MpcResult {
  std::vector<Trajectory> trajectories;
  double realized_cost = 0.0;
  std::vector<EpochRecord> epochs;
};

struct MpcOptions {
  bool warm_start = true;  // seed each epoch's prices from the previous epoch's converged prices
};

/// Receding-horizon market: at each epoch run the inner iteration from the
/// realized states, implement the first converged purchase of every agent,
/// then apply the realized time-s disturbances. The tree scheme rebuilds the
/// scenario tree rooted at the current epoch.
inline MpcResult mpc_outer_loop(const MarketInstance& instance, const NoisePath& path, MpcScheme scheme,
                                const MarketSettings& settings, const MpcOptions& options = {}) {
  const std::size_t T = instance.horizon();
  const std::size_t M = instance.size();
  if (path.common.size() != T || path.per_agent.size() != M)
    throw InstanceError("noise path does not match the instance");
  for (const auto& p : path.per_agent)
    if (p.size() != T) throw InstanceError("noise path does not match the horizon");
  switch (scheme) {
    case MpcScheme::lqg:
      if (instance.regime() != Regime::lqg) throw UnsupportedRegimeError("lqg scheme needs an lqg instance");
      break;
    case MpcScheme::tree:
      if (instance.regime() == Regime::lqg) throw UnsupportedRegimeError("tree scheme needs finite-support noise");
      break;
    case MpcScheme::deterministic:
      if (instance.regime() == Regime::tree)
        throw UnsupportedRegimeError("deterministic scheme does not apply to tree instances");
      break;
  }

  MpcResult out;
  out.trajectories.resize(M);
  std::vector<Vector> states = instance.initial_states();
  for (std::size_t i = 0; i < M; ++i) out.trajectories[i].states.push_back(states[i]);
  std::vector<double> carried = settings.initial_prices;

  for (std::size_t s = 0; s < T; ++s) {
    EpochRecord rec;
    rec.epoch = s;
    std::optional<ScenarioTree> tree;
    if (scheme == MpcScheme::tree) {
      tree.emplace(build_tree(instance.common_noise(), instance.private_laws(), T - s, s));
      MarketSettings epoch_settings = settings;
      epoch_settings.initial_prices = carried;
      rec.market = tree_bid_price_iteration(instance, *tree, states, epoch_settings);
    } else {
      rec.market = detail::time_indexed_iteration(instance, s, states, settings, carried);
    }
    if (!rec.market.converged) throw NonConvergenceError(s, std::move(rec.market));

    rec.clearing_price = rec.market.prices[0];
    for (std::size_t i = 0; i < M; ++i) rec.actions.push_back(rec.market.bids[i][0]);

    for (std::size_t i = 0; i < M; ++i) {
      states[i] = step(instance.agent(i), s, states[i], rec.actions[i], path.per_agent[i][s], path.common[s]);
      out.trajectories[i].controls.push_back(rec.actions[i]);
      out.trajectories[i].states.push_back(states[i]);
    }

    carried.clear();
    if (options.warm_start && s + 1 < T) {
      if (scheme != MpcScheme::tree) {
        carried.assign(rec.market.prices.values.begin() + 1, rec.market.prices.values.end());
      } else {
        // The realized child's subtree has the same layout as the next epoch's tree.
        for (std::size_t c : tree->node(0).children) {
          const auto& child = tree->node(c);
          bool match = child.common_noise == path.common[s];
          for (std::size_t i = 0; i < M && match; ++i) match = child.private_noise[i] == path.per_agent[i][s];
          if (!match) continue;
          for (std::size_t v : tree->subtree(c, true)) carried.push_back(rec.market.prices[v]);
          break;
        }
      }
    }
    out.epochs.push_back(std::move(rec));
  }
  out.realized_cost = social_cost(instance, out.trajectories);
  return out;
}

}  // namespace isomarket
