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
#include <vector>

#include "isomarket/isomarket.hpp"
#include "test_support.hpp"

using namespace isomarket;
using isomarket::fixtures::scalar_lq;
namespace fx = isomarket::fixtures;

namespace {

BidProfile bid(std::vector<double> v) { return BidProfile{IndexKind::time, 0, std::move(v)}; }
PriceProfile price(std::vector<double> v) { return PriceProfile{IndexKind::time, 0, std::move(v)}; }

double max_abs_sum(const std::vector<BidProfile>& bids) { return sup_norm(balance_residual(bids)); }

MarketInstance lqg_instance(Rng& rng, std::size_t M, std::size_t T, double sigma = 1.0) {
  return fx::random_scalar_lqg(rng, M, T, sigma);
}

MarketInstance binary_common_instance() {
  const auto common = NoiseLaw::finite({-1, 1}, {0.5, 0.5});
  return MarketInstance({scalar_lq(0.9, 1, 1, 1, 1, {}, 1.0), scalar_lq(1.0, 0.8, 0.5, 2, -0.5, {}, -0.5)}, 2,
                        Regime::tree, common);
}

bool same_logs(const IterationLog& a, const IterationLog& b) {
  if (a.rounds.size() != b.rounds.size()) return false;
  for (std::size_t k = 0; k < a.rounds.size(); ++k) {
    const auto &x = a.rounds[k], &y = b.rounds[k];
    if (x.prices != y.prices || x.bids != y.bids || x.residual != y.residual || x.alpha != y.alpha ||
        x.dual_value != y.dual_value)
      return false;
  }
  return true;
}

}  // namespace

TEST(PriceUpdate, Examples) {
  const std::vector<BidProfile> balanced{bid({1, -2}), bid({-1, 2})};
  EXPECT_EQ(price_update(price({0.3, -0.7}), balanced, PriceRule::additive, 0.5).values,
            (std::vector<double>{0.3, -0.7}));
  const std::vector<BidProfile> bids{bid({1, 0.25}), bid({0.5, 1})};
  EXPECT_EQ(price_update(price({9, -9}), bids, PriceRule::relaxation, 1.0).values, (std::vector<double>{1.5, 1.25}));
  const std::vector<BidProfile> two{bid({2}), bid({0})};
  EXPECT_EQ(price_update(price({1}), two, PriceRule::additive, 0.5).values, (std::vector<double>{2}));
  EXPECT_THROW(price_update(PriceProfile{IndexKind::node, 0, {1}}, two, PriceRule::additive, 0.5), InstanceError);
}

TEST(StepScheduleTest, ValuesAndParsing) {
  const auto h = StepSchedule::harmonic();
  EXPECT_EQ(h(1), 1.0);
  EXPECT_EQ(h(4), 0.25);
  EXPECT_THROW(h(0), InstanceError);
  EXPECT_EQ(StepSchedule::parse("const:0.5")(7), 0.5);
  EXPECT_EQ(StepSchedule::parse("constant:0.25")(1), 0.25);
  EXPECT_DOUBLE_EQ(StepSchedule::parse("geometric:1:0.5")(3), 0.25);
  EXPECT_EQ(StepSchedule::parse("harmonic").kind(), StepSchedule::Kind::harmonic);
  EXPECT_EQ(StepSchedule::parse("const:0.5").describe(), "const:0.5");
  EXPECT_THROW(StepSchedule::parse("const:-1"), InstanceError);
  EXPECT_THROW(StepSchedule::parse("const:x"), InstanceError);
  EXPECT_THROW(StepSchedule::parse("bogus"), InstanceError);
  EXPECT_EQ(parse_price_rule("relaxation"), PriceRule::relaxation);
  EXPECT_THROW(parse_price_rule("multiplicative"), InstanceError);
}

TEST(DeterministicIteration, TwoAgentKkt) {
  const auto inst = fx::kkt_instance();
  const auto r = deterministic_bid_price_iteration(inst, MarketSettings{});
  ASSERT_TRUE(r.converged);
  EXPECT_LE(r.rounds(), 100000u);
  EXPECT_NEAR(r.bids[0][0], 0.5, 1e-3);
  EXPECT_NEAR(r.bids[1][0], -0.5, 1e-3);
  EXPECT_NEAR(r.prices[0], 1.0, 1e-3);
  EXPECT_LE(r.max_residual(), 1e-6);
  EXPECT_EQ(r.log.rounds.back().alpha, 0.0);
  for (std::size_t k = 0; k < r.rounds(); ++k) EXPECT_EQ(r.log.rounds[k].round, k);
}

TEST(DeterministicIteration, IdenticalAgentsDecayToZero) {
  const Matrix one = Matrix::Identity(1, 1);
  const Agent a = make_polynomial_agent(one, one, Vector::Zero(1), PolynomialCost{{}, {}, 1, 0, 0, 0});
  const MarketInstance inst({a, a, a}, 2, Regime::deterministic);
  MarketSettings s;
  s.initial_prices = {0.7, -1.3};
  const auto r = deterministic_bid_price_iteration(inst, s);
  ASSERT_TRUE(r.converged);
  for (const auto& b : r.bids)
    for (double u : b.values) EXPECT_NEAR(u, 0.0, 1e-6);
  for (double p : r.prices.values) EXPECT_NEAR(p, 0.0, 1e-5);
  EXPECT_LT(std::abs(r.prices[0]), 0.7);
}

TEST(DeterministicIteration, LqPairMatchesCentralizedLqr) {
  for (std::size_t T : {1u, 3u}) {
    const MarketInstance inst({scalar_lq(1, 1, 1, 1, 1), scalar_lq(1, 1, 1, 1, -1)}, T, Regime::deterministic);
    const auto r = deterministic_bid_price_iteration(inst, fx::tight_settings(inst));
    ASSERT_TRUE(r.converged);
    const auto lqr = centralized_constrained_lqr(inst);
    const auto ce = simulate_certainty_equivalent(lqr, inst, zero_noise_path(2, T));
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(r.bids[i][t], ce[i].controls[t], 1e-3);
  }
}

TEST(DeterministicIteration, RandomLqMatchesKkt) {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = fx::random_lq_instance(rng, fx::pick(rng, 2, 4), fx::pick(rng, 1, 5), Regime::deterministic);
    const auto r = deterministic_bid_price_iteration(inst, fx::tight_settings(inst));
    ASSERT_TRUE(r.converged);
    const auto qp = centralized_qp(inst);
    for (std::size_t t = 0; t < inst.horizon(); ++t) EXPECT_NEAR(r.prices[t], qp.prices[t], 1e-6);
    for (std::size_t i = 0; i < inst.size(); ++i)
      for (std::size_t t = 0; t < inst.horizon(); ++t) EXPECT_NEAR(r.bids[i][t], qp.controls[i][t], 1e-6);
  }
}

TEST(DeterministicIteration, NonConvergenceIsReported) {
  MarketSettings s;
  s.criterion.max_rounds = 1;
  const auto r = deterministic_bid_price_iteration(fx::kkt_instance(), s);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.rounds(), 1u);
  EXPECT_EQ(r.residual.size(), 1u);
  EXPECT_NEAR(r.residual[0], 1.0, 1e-6);
  EXPECT_EQ(r.log.rounds[0].alpha, 1.0);
}

TEST(DeterministicIteration, RelaxationRuleDoesNotClear) {
  // Relaxation settles at lambda = r = 1/2 here, which is not balanced.
  MarketSettings s;
  s.rule = PriceRule::relaxation;
  s.schedule = StepSchedule::constant(0.5);
  s.criterion.max_rounds = 200;
  const auto r = deterministic_bid_price_iteration(fx::kkt_instance(), s);
  EXPECT_FALSE(r.converged);
  EXPECT_NEAR(r.prices[0], 0.5, 1e-6);
  EXPECT_NEAR(r.residual[0], 0.5, 1e-6);
}

TEST(DeterministicIteration, RejectsTreeInstances) {
  EXPECT_THROW(deterministic_bid_price_iteration(binary_common_instance(), MarketSettings{}), UnsupportedRegimeError);
}

TEST(DeterministicIteration, WeakDualityEveryRound) {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = fx::random_lq_instance(rng, fx::pick(rng, 2, 4), fx::pick(rng, 1, 5), Regime::deterministic);
    const double primal = centralized_qp(inst).cost;
    for (const auto& schedule : {StepSchedule::harmonic(), StepSchedule::constant(fx::curvature_step(inst))}) {
      MarketSettings s;
      s.schedule = schedule;
      s.criterion.max_rounds = 500;
      const auto r = deterministic_bid_price_iteration(inst, s);
      for (const auto& rec : r.log.rounds) EXPECT_LE(rec.dual_value, primal + 1e-8 * (1 + std::abs(primal)));
    }
  }
}

TEST(DeterministicIteration, BitwiseDeterministicAndOrderIndependent) {
  Rng rng(43);
  const auto inst = fx::random_lq_instance(rng, 4, 4, Regime::deterministic);
  auto s = fx::tight_settings(inst, 1e-9);
  const auto a = deterministic_bid_price_iteration(inst, s);
  const auto b = deterministic_bid_price_iteration(inst, s);
  s.parallel = true;
  const auto c = deterministic_bid_price_iteration(inst, s);
  EXPECT_TRUE(same_logs(a.log, b.log));
  EXPECT_TRUE(same_logs(a.log, c.log));

  const MarketInstance convex({as_convex(inst.lq(0)), as_convex(inst.lq(1)), as_convex(inst.lq(2))}, 3,
                              Regime::deterministic);
  auto cs = fx::tight_settings(convex, 1e-7);
  const auto d = deterministic_bid_price_iteration(convex, cs);
  cs.parallel = true;
  EXPECT_TRUE(same_logs(d.log, deterministic_bid_price_iteration(convex, cs).log));
}

TEST(TreeIteration, SinglePathReducesToDeterministic) {
  Rng rng(44);
  const auto det = fx::random_lq_instance(rng, 3, 4, Regime::deterministic);
  const MarketInstance tree_inst(det.agents(), det.horizon(), Regime::tree);
  const auto s = fx::tight_settings(det);
  const auto a = deterministic_bid_price_iteration(det, s);
  const auto b = tree_bid_price_iteration(tree_inst, path_tree(3, 4), {}, s);
  ASSERT_TRUE(a.converged && b.converged);
  EXPECT_EQ(a.rounds(), b.rounds());
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_NEAR(a.prices[t], b.prices[t], 1e-12);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.bids[i][t], b.bids[i][t], 1e-12);
  }
}

TEST(TreeIteration, BinaryCommonNoiseMatchesOracle) {
  const auto inst = binary_common_instance();
  const auto tree = build_tree(inst.common_noise(), inst.private_laws(), inst.horizon());
  const auto s = fx::tight_settings(inst);
  const auto r = tree_bid_price_iteration(inst, tree, {}, s);
  ASSERT_TRUE(r.converged);
  EXPECT_EQ(r.prices.size(), tree.internal_count());
  EXPECT_EQ(r.prices.kind, IndexKind::node);
  const auto qp = centralized_qp(inst, tree);
  double cost = 0.0;
  for (std::size_t i = 0; i < 2; ++i)
    cost += expected_policy_cost(inst.agent(i), i, tree, TreePolicy{r.bids[i].values}, {}, initial_state(inst.agent(i)));
  EXPECT_NEAR(cost, qp.cost, 1e-3 * std::abs(qp.cost));
  for (std::size_t v = 0; v < tree.internal_count(); ++v)
    EXPECT_NEAR(r.prices[v], qp.prices[v], 10 * s.criterion.balance_tol);
}

TEST(TreeIteration, ConvexAgentsMatchLqAgents) {
  const auto inst = binary_common_instance();
  const MarketInstance convex({as_convex(inst.lq(0)), as_convex(inst.lq(1))}, 2, Regime::tree, inst.common_noise());
  const auto tree = build_tree(inst.common_noise(), inst.private_laws(), 2);
  auto s = fx::tight_settings(inst, 1e-7);
  const auto a = tree_bid_price_iteration(inst, tree, {}, s);
  const auto b = tree_bid_price_iteration(convex, tree, {}, s);
  ASSERT_TRUE(a.converged && b.converged);
  EXPECT_EQ(b.inner_failures, 0u);
  for (std::size_t v = 0; v < tree.internal_count(); ++v) EXPECT_NEAR(a.prices[v], b.prices[v], 1e-5);
}

TEST(TreeIteration, ValidatesTreeShape) {
  const auto inst = binary_common_instance();
  const auto s = fx::tight_settings(inst);
  EXPECT_THROW(tree_bid_price_iteration(inst, path_tree(3, 2), {}, s), InstanceError);
  EXPECT_THROW(tree_bid_price_iteration(inst, path_tree(2, 1), {}, s), InstanceError);
  Rng rng(45);
  const auto lqg = lqg_instance(rng, 2, 2);
  EXPECT_THROW(tree_bid_price_iteration(lqg, path_tree(2, 2), {}, s), UnsupportedRegimeError);
}

TEST(LqgIteration, LastEpochIsStaticKkt) {
  Rng rng(46);
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = lqg_instance(rng, 3, 4);
    std::vector<Vector> xs;
    for (std::size_t i = 0; i < 3; ++i) xs.push_back(Vector::Constant(1, fx::uniform(rng, -2, 2)));
    const auto r = lqg_bid_price_iteration(inst, 3, xs, fx::tight_settings(inst));
    ASSERT_TRUE(r.converged);
    ASSERT_EQ(r.prices.first_time, 3u);
    // Stationarity 2 h_i u_i + 2 g_i + lambda = 0 with sum u_i = 0.
    double num = 0.0, den = 0.0;
    std::vector<double> h(3), g(3);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& a = inst.lq(i);
      h[i] = a.r() + a.B(0, 0) * a.Q(0, 0) * a.B(0, 0);
      g[i] = a.B(0, 0) * a.Q(0, 0) * a.A(0, 0) * xs[i](0);
      num += g[i] / h[i];
      den += 0.5 / h[i];
    }
    const double lambda = -num / den;
    EXPECT_NEAR(r.prices[0], lambda, 1e-8);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r.bids[i][0], -(2 * g[i] + lambda) / (2 * h[i]), 1e-8);
  }
}

TEST(LqgIteration, SymmetricAgents) {
  const auto g = NoiseLaw::gaussian(1);
  const auto a = scalar_lq(0.9, 1, 1, 1, 0, g);
  const MarketInstance inst({a, a}, 3, Regime::lqg);
  const auto s = fx::tight_settings(inst);
  // Zero states: nobody wants to trade, so bids and prices are both zero.
  const auto zero = lqg_bid_price_iteration(inst, 0, {}, s);
  ASSERT_TRUE(zero.converged);
  for (const auto& b : zero.bids)
    for (double u : b.values) EXPECT_EQ(u, 0.0);
  for (double p : zero.prices.values) EXPECT_EQ(p, 0.0);
  // Opposite states: the agents' unpriced wishes already cancel, so prices stay at zero.
  const std::vector<Vector> opposite{Vector::Constant(1, 0.8), Vector::Constant(1, -0.8)};
  const auto opp = lqg_bid_price_iteration(inst, 0, opposite, s);
  ASSERT_TRUE(opp.converged);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(opp.prices[t], 0.0);
    EXPECT_EQ(opp.bids[0][t], -opp.bids[1][t]);
  }
  // Equal states: balance forces zero bids at a nonzero clearing price.
  const std::vector<Vector> equal{Vector::Constant(1, 0.8), Vector::Constant(1, 0.8)};
  const auto eq = lqg_bid_price_iteration(inst, 0, equal, s);
  ASSERT_TRUE(eq.converged);
  for (const auto& b : eq.bids)
    for (double u : b.values) EXPECT_NEAR(u, 0.0, 1e-10);
  EXPECT_GT(std::abs(eq.prices[0]), 0.1);
}

TEST(LqgIteration, ThreeAgentsMatchCertaintyEquivalent) {
  Rng rng(47);
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = lqg_instance(rng, 3, 4);
    const auto lqr = centralized_constrained_lqr(inst);
    const std::size_t s = fx::pick(rng, 0, 3);
    std::vector<Vector> xs;
    for (std::size_t i = 0; i < 3; ++i) xs.push_back(Vector::Constant(1, fx::uniform(rng, -3, 3)));
    const auto r = lqg_bid_price_iteration(inst, s, xs, fx::tight_settings(inst));
    ASSERT_TRUE(r.converged);
    const auto ce = certainty_equivalent_action(lqr, s, stack_states(xs));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r.bids[i][0], ce[i], 1e-4);
  }
  EXPECT_THROW(lqg_bid_price_iteration(fx::kkt_instance(), 0, {}, MarketSettings{}), UnsupportedRegimeError);
}

TEST(Mpc, ZeroNoiseMatchesDeterministicRollout) {
  Rng rng(48);
  const auto inst = lqg_instance(rng, 3, 5, 0.0);
  const auto s = fx::tight_settings(inst);
  Rng draw(1);
  const auto path = sample_noise_path(inst, draw);
  const auto mpc = mpc_outer_loop(inst, path, MpcScheme::lqg, s);
  const auto once = deterministic_bid_price_iteration(inst, s);
  ASSERT_TRUE(once.converged);
  const std::vector<double> zero(5, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto tr = simulate_trajectory(inst.agent(i), once.bids[i].values, zero);
    for (std::size_t t = 0; t < 5; ++t) EXPECT_NEAR(mpc.trajectories[i].controls[t], once.bids[i][t], 1e-6);
    EXPECT_NEAR(mpc.trajectories[i].states.back()(0), tr.states.back()(0), 1e-6);
  }
}

TEST(Mpc, LqgActionsBalancedAndCertaintyEquivalent) {
  Rng rng(49);
  const auto inst = lqg_instance(rng, 3, 4);
  const auto s = fx::tight_settings(inst);
  const auto lqr = centralized_constrained_lqr(inst);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng draw(seed);
    const auto path = sample_noise_path(inst, draw);
    const auto mpc = mpc_outer_loop(inst, path, MpcScheme::lqg, s);
    const auto ce = simulate_certainty_equivalent(lqr, inst, path);
    ASSERT_EQ(mpc.epochs.size(), 4u);
    for (const auto& e : mpc.epochs) {
      double sum = 0.0;
      for (double u : e.actions) sum += u;
      EXPECT_LE(std::abs(sum), s.criterion.balance_tol);
      EXPECT_EQ(e.clearing_price, e.market.prices[0]);
      for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(e.actions[i], ce[i].controls[e.epoch], 1e-4);
    }
    const double ce_cost = social_cost(inst, ce);
    EXPECT_NEAR(mpc.realized_cost, ce_cost, 1e-6 * std::abs(ce_cost));
  }
}

TEST(Mpc, TreeSchemeRebuildsAndWarmStarts) {
  const auto inst = binary_common_instance();
  const auto s = fx::tight_settings(inst);
  const NoisePath path{{1, -1}, {{0, 0}, {0, 0}}};
  const auto warm = mpc_outer_loop(inst, path, MpcScheme::tree, s);
  const auto cold = mpc_outer_loop(inst, path, MpcScheme::tree, s, MpcOptions{false});
  ASSERT_EQ(warm.epochs.size(), 2u);
  EXPECT_EQ(warm.epochs[1].market.prices.first_time, 1u);
  EXPECT_EQ(warm.epochs[1].market.prices.size(), 1u);
  EXPECT_LT(warm.epochs[1].market.rounds(), cold.epochs[1].market.rounds());
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 2; ++i)
      EXPECT_NEAR(warm.trajectories[i].controls[t], cold.trajectories[i].controls[t], 1e-8);
  // The first implemented action is the root decision of the full-tree equilibrium.
  const auto full = tree_bid_price_iteration(inst, build_tree(inst.common_noise(), inst.private_laws(), 2), {}, s);
  EXPECT_NEAR(warm.epochs[0].actions[0], full.bids[0][0], 1e-8);
  // Along the realized branch the second action is the equilibrium decision at that child node.
  EXPECT_NEAR(warm.epochs[1].actions[0], full.bids[0][2], 1e-8);
}

TEST(Mpc, NonConvergenceCarriesEpoch) {
  Rng rng(50);
  const auto inst = lqg_instance(rng, 3, 3);
  auto s = fx::tight_settings(inst);
  s.criterion.max_rounds = 2;
  Rng draw(0);
  const auto path = sample_noise_path(inst, draw);
  try {
    mpc_outer_loop(inst, path, MpcScheme::lqg, s);
    FAIL() << "expected NonConvergenceError";
  } catch (const NonConvergenceError& e) {
    EXPECT_EQ(e.epoch(), 0u);
    EXPECT_FALSE(e.result().converged);
    EXPECT_EQ(e.result().rounds(), 2u);
  }
  EXPECT_THROW(mpc_outer_loop(inst, path, MpcScheme::tree, s), UnsupportedRegimeError);
  EXPECT_THROW(mpc_outer_loop(inst, zero_noise_path(3, 2), MpcScheme::lqg, s), InstanceError);
}

TEST(FixedPoints, RuleContrastOnSyntheticInputs) {
  Rng rng(51);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = fx::pick(rng, 1, 5);
    std::vector<double> a(n), b(n), c(n), lambda(n);
    for (std::size_t j = 0; j < n; ++j) {
      a[j] = fx::uniform(rng, -3, 3);
      b[j] = fx::uniform(rng, -3, 3);
      c[j] = -(a[j] + b[j]);
      lambda[j] = fx::uniform(rng, -3, 3);
    }
    const double alpha = fx::uniform(rng, 0.05, 1.0);
    // Balanced bids: additive leaves any lambda unchanged, relaxation moves it.
    const std::vector<BidProfile> balanced{bid(a), bid(b), bid(c)};
    EXPECT_LE(max_abs_sum(balanced), 1e-12);
    EXPECT_EQ(price_update(price(lambda), balanced, PriceRule::additive, alpha).values, lambda);
    EXPECT_NE(price_update(price(lambda), balanced, PriceRule::relaxation, alpha).values, lambda);
    // lambda = r: relaxation leaves it unchanged, additive moves it.
    const std::vector<BidProfile> excess{bid(a), bid(b)};
    const auto r = balance_residual(excess);
    const auto relaxed = price_update(price(r), excess, PriceRule::relaxation, alpha);
    for (std::size_t j = 0; j < n; ++j) EXPECT_LE(std::abs(relaxed[j] - r[j]), 1e-12);
    EXPECT_NE(price_update(price(r), excess, PriceRule::additive, alpha).values, r);
  }
}
