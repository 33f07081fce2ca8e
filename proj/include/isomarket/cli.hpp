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

// Batch commands behind the isomarket executable. Each command returns its
// process exit status: 0 success, 1 verification outside tolerance,
// 2 input error, 3 non-convergence.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "isomarket/io.hpp"
#include "isomarket/lq.hpp"
#include "isomarket/market.hpp"
#include "isomarket/model.hpp"
#include "isomarket/oracle.hpp"
#include "isomarket/rng.hpp"
#include "isomarket/scenario_tree.hpp"

namespace isomarket::cli {

enum ExitCode : int { kSuccess = 0, kOutsideTolerance = 1, kInputError = 2, kNonConvergence = 3 };

struct CommandOptions {
  std::filesystem::path instance;
  std::optional<std::string> scheme;
  std::uint64_t seed = 0;
  std::optional<std::string> rule;
  std::optional<std::string> step;
  std::filesystem::path out_dir = ".";
  std::optional<double> verify_tol;
  std::optional<double> bid_tol;
  std::optional<double> balance_tol;
  std::optional<std::size_t> max_rounds;
  bool parallel = false;
};

namespace detail {

using nlohmann::json;

struct Loaded {
  InstanceFile file;
  MpcScheme scheme;
};

inline MpcScheme resolve_scheme(const InstanceFile& f, const std::optional<std::string>& flag) {
  const Regime regime = f.instance.regime();
  const std::string name = flag.value_or(to_string(regime));
  MpcScheme scheme;
  if (name == "deterministic") scheme = MpcScheme::deterministic;
  else if (name == "tree") scheme = MpcScheme::tree;
  else if (name == "lqg") scheme = MpcScheme::lqg;
  else throw InputError("unknown scheme '" + name + "'");
  if (name != to_string(regime))
    throw InstanceError("scheme '" + name + "' does not match the instance regime '" + to_string(regime) + "'");
  return scheme;
}

inline Loaded load(const CommandOptions& opt) {
  auto file = load_instance_file(opt.instance);
  auto& s = file.settings;
  if (opt.rule) s.rule = parse_price_rule(*opt.rule);
  if (opt.step) s.schedule = StepSchedule::parse(*opt.step);
  if (opt.bid_tol) s.criterion.bid_tol = *opt.bid_tol;
  if (opt.balance_tol) s.criterion.balance_tol = *opt.balance_tol;
  if (opt.max_rounds) s.criterion.max_rounds = *opt.max_rounds;
  if (opt.verify_tol) file.verify_tol = *opt.verify_tol;
  if (opt.parallel) s.parallel = true;
  s.criterion.validate();
  const auto scheme = resolve_scheme(file, opt.scheme);
  return {std::move(file), scheme};
}

inline json epoch_summary(const EpochRecord& e) {
  return json{{"epoch", e.epoch},
              {"rounds", e.market.rounds()},
              {"converged", e.market.converged},
              {"clearing_price", e.clearing_price},
              {"actions", e.actions},
              {"max_residual", e.market.max_residual()}};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  out << text;
}

inline NoisePath draw_path(const MarketInstance& instance, std::uint64_t seed) {
  Rng rng(seed);
  return sample_noise_path(instance, rng);
}

template <class Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const NonConvergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kNonConvergence;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const std::invalid_argument& e) {  // InstanceError, UnsupportedRegimeError
    err << "error: " << e.what() << '\n';
    return kInputError;
  }
}

}  // namespace detail

/// Runs the instance's scheme and writes trajectories.csv, iterations.csv and
/// summary.json into opt.out_dir.
inline int cmd_run(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  using detail::json;
  return detail::guarded(err, [&]() -> int {
    auto [file, scheme] = detail::load(opt);
    const auto& instance = file.instance;
    std::filesystem::create_directories(opt.out_dir);

    std::vector<EpochLog> logs;
    std::vector<Trajectory> trajectories;
    json summary;
    summary["scheme"] = to_string(scheme);
    summary["seed"] = opt.seed;
    summary["T"] = instance.horizon();
    summary["agents"] = instance.size();
    summary["rule"] = to_string(file.settings.rule);
    summary["step"] = file.settings.schedule.describe();
    bool converged = false;

    if (scheme == MpcScheme::deterministic) {
      auto res = deterministic_bid_price_iteration(instance, file.settings);
      converged = res.converged;
      logs.push_back({0, res.log});
      if (converged) {
        const std::vector<double> zeros(instance.horizon(), 0.0);
        for (std::size_t i = 0; i < instance.size(); ++i)
          trajectories.push_back(simulate_trajectory(instance.agent(i), res.bids[i].values, zeros));
        summary["realized_cost"] = social_cost(instance, trajectories);
      }
      summary["rounds"] = res.rounds();
      summary["final_prices"] = res.prices.values;
      summary["final_price"] = res.prices.values.front();
      summary["final_residuals"] = res.residual;
      summary["dual_value"] = res.dual_value;
    } else {
      const NoisePath path = detail::draw_path(instance, opt.seed);
      try {
        auto res = mpc_outer_loop(instance, path, scheme, file.settings, MpcOptions{file.warm_start});
        converged = true;
        trajectories = res.trajectories;
        std::size_t rounds = 0;
        std::vector<double> clearing;
        json epochs = json::array();
        for (const auto& e : res.epochs) {
          logs.push_back({e.epoch, e.market.log});
          rounds += e.market.rounds();
          clearing.push_back(e.clearing_price);
          epochs.push_back(detail::epoch_summary(e));
        }
        summary["rounds"] = rounds;
        summary["epochs"] = epochs;
        summary["final_prices"] = clearing;
        summary["final_price"] = clearing.back();
        summary["final_residuals"] = res.epochs.back().market.residual;
        summary["realized_cost"] = res.realized_cost;
      } catch (const NonConvergenceError& e) {
        logs.push_back({e.epoch(), e.result().log});
        summary["failed_epoch"] = e.epoch();
        summary["rounds"] = e.result().rounds();
        summary["final_prices"] = e.result().prices.values;
        summary["final_residuals"] = e.result().residual;
        err << "error: " << e.what() << '\n';
      }
      summary["noise_path"] = json{{"common", path.common}, {"private", path.per_agent}};
    }
    summary["converged"] = converged;

    std::ostringstream iter_csv, traj_csv;
    write_iterations_csv(iter_csv, logs, instance.size());
    write_trajectories_csv(traj_csv, trajectories);
    detail::write_text(opt.out_dir / "iterations.csv", iter_csv.str());
    detail::write_text(opt.out_dir / "trajectories.csv", traj_csv.str());
    detail::write_text(opt.out_dir / "summary.json", summary.dump(2) + "\n");
    out << "scheme=" << to_string(scheme) << " converged=" << (converged ? "true" : "false")
        << " rounds=" << summary["rounds"].get<std::size_t>() << '\n';
    return converged ? kSuccess : kNonConvergence;
  });
}

/// Runs the decentralized scheme next to its centralized oracle and reports
/// the largest control, cost (relative) and price deviations.
inline int cmd_verify(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  using detail::json;
  return detail::guarded(err, [&]() -> int {
    auto [file, scheme] = detail::load(opt);
    const auto& instance = file.instance;
    double control_dev = 0.0, cost_dev = 0.0, price_dev = 0.0;
    double cost = 0.0, oracle_cost = 0.0;
    std::size_t rounds = 0;
    auto rel = [](double a, double b) { return std::abs(a - b) / (1.0 + std::abs(b)); };
    auto report_failure = [&](const MarketResult& r, std::size_t epoch) {
      err << "error: no convergence at epoch " << epoch << " after " << r.rounds()
          << " rounds; max residual " << format_double(r.max_residual()) << '\n';
      return kNonConvergence;
    };

    if (scheme == MpcScheme::deterministic || scheme == MpcScheme::tree) {
      const ScenarioTree tree = scheme == MpcScheme::tree
                                    ? build_tree(instance.common_noise(), instance.private_laws(), instance.horizon())
                                    : path_tree(instance.size(), instance.horizon());
      const auto res = scheme == MpcScheme::tree
                           ? tree_bid_price_iteration(instance, tree, {}, file.settings)
                           : deterministic_bid_price_iteration(instance, file.settings);
      if (!res.converged) return report_failure(res, 0);
      rounds = res.rounds();
      const auto qp = scheme == MpcScheme::tree ? centralized_qp(instance, tree) : centralized_qp(instance);
      const PriceProfile none;
      for (std::size_t i = 0; i < instance.size(); ++i) {
        for (std::size_t j = 0; j < res.bids[i].size(); ++j)
          control_dev = std::max(control_dev, std::abs(res.bids[i][j] - qp.controls[i][j]));
        cost += expected_policy_cost(instance.agent(i), i, tree, TreePolicy{res.bids[i].values}, none,
                                     initial_state(instance.agent(i)));
      }
      for (std::size_t j = 0; j < qp.prices.size(); ++j)
        price_dev = std::max(price_dev, std::abs(res.prices[j] - qp.prices[j]));
      oracle_cost = qp.cost;
    } else {
      const NoisePath path = detail::draw_path(instance, opt.seed);
      MpcResult res;
      try {
        res = mpc_outer_loop(instance, path, scheme, file.settings, MpcOptions{file.warm_start});
      } catch (const NonConvergenceError& e) {
        return report_failure(e.result(), e.epoch());
      }
      const auto lqr = centralized_constrained_lqr(instance);
      for (const auto& e : res.epochs) {
        rounds += e.market.rounds();
        std::vector<Vector> xs;
        for (const auto& tr : res.trajectories) xs.push_back(tr.states[e.epoch]);
        const auto ce = certainty_equivalent_action(lqr, e.epoch, stack_states(xs));
        for (std::size_t i = 0; i < ce.size(); ++i)
          control_dev = std::max(control_dev, std::abs(e.actions[i] - ce[i]));
      }
      cost = res.realized_cost;
      oracle_cost = social_cost(instance, simulate_certainty_equivalent(lqr, instance, path));
      const auto qp = centralized_qp(instance);
      const auto& first = res.epochs.front().market.prices;
      for (std::size_t j = 0; j < qp.prices.size(); ++j)
        price_dev = std::max(price_dev, std::abs(first[j] - qp.prices[j]));
    }
    cost_dev = rel(cost, oracle_cost);
    const double tol = file.verify_tol;
    const bool pass = control_dev <= tol && cost_dev <= tol && price_dev <= tol;
    json report{{"scheme", to_string(scheme)},
                {"seed", opt.seed},
                {"rounds", rounds},
                {"max_control_deviation", control_dev},
                {"cost", cost},
                {"oracle_cost", oracle_cost},
                {"relative_cost_deviation", cost_dev},
                {"max_price_deviation", price_dev},
                {"tolerance", tol},
                {"pass", pass}};
    out << report.dump(2) << '\n';
    return pass ? kSuccess : kOutsideTolerance;
  });
}

/// Writes the instance's scenario tree as Graphviz DOT (to `output`, or `out` when empty).
inline int cmd_tree(const std::filesystem::path& instance_path, const std::optional<std::filesystem::path>& output,
                    std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&]() -> int {
    const auto file = load_instance_file(instance_path);
    const auto& inst = file.instance;
    const auto dot = export_tree_dot(build_tree(inst.common_noise(), inst.private_laws(), inst.horizon()));
    if (output) detail::write_text(*output, dot);
    else out << dot;
    return kSuccess;
  });
}

}  // namespace isomarket::cli
