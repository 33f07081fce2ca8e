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

#include <CLI11.hpp>
#include <iostream>

#include "isomarket/cli.hpp"

namespace {

void add_common(CLI::App* cmd, isomarket::cli::CommandOptions& opt) {
  cmd->add_option("instance", opt.instance, "Instance JSON file")->required();
  cmd->add_option("--scheme", opt.scheme, "deterministic | tree | lqg (default: the instance regime)");
  cmd->add_option("--seed", opt.seed, "Noise path seed")->capture_default_str();
  cmd->add_option("--rule", opt.rule, "Price update: additive | relaxation (default additive)");
  cmd->add_option("--step", opt.step, "Step schedule: harmonic | const:<a> | geometric:<a>:<ratio>");
  cmd->add_option("--bid-tol", opt.bid_tol, "Bid stability tolerance (default 1e-6)");
  cmd->add_option("--balance-tol", opt.balance_tol, "Balance residual tolerance (default 1e-6)");
  cmd->add_option("--max-rounds", opt.max_rounds, "Round cap per bid-price iteration (default 100000)");
  cmd->add_flag("--parallel", opt.parallel, "Evaluate agent best responses concurrently");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative bid-price market for coordinating dynamic agents"};
  app.require_subcommand(1);

  isomarket::cli::CommandOptions run_opt;
  auto* run = app.add_subcommand("run", "Run a scheme and write trajectories.csv, iterations.csv, summary.json");
  add_common(run, run_opt);
  run->add_option("--out", run_opt.out_dir, "Output directory")->capture_default_str();

  isomarket::cli::CommandOptions verify_opt;
  auto* verify = app.add_subcommand("verify", "Compare the decentralized scheme with its centralized oracle");
  add_common(verify, verify_opt);
  verify->add_option("--verify-tol", verify_opt.verify_tol, "Deviation tolerance (default 1e-4)");

  std::filesystem::path tree_instance;
  std::optional<std::filesystem::path> tree_out;
  auto* tree = app.add_subcommand("tree", "Write the scenario tree as Graphviz DOT");
  tree->add_option("instance", tree_instance, "Instance JSON file")->required();
  tree->add_option("--out", tree_out, "Output .dot file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : isomarket::cli::kInputError;
  }

  if (*run) return isomarket::cli::cmd_run(run_opt, std::cout, std::cerr);
  if (*verify) return isomarket::cli::cmd_verify(verify_opt, std::cout, std::cerr);
  return isomarket::cli::cmd_tree(tree_instance, tree_out, std::cout, std::cerr);
}
