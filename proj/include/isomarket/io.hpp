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

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "isomarket/errors.hpp"
#include "isomarket/market.hpp"
#include "isomarket/model.hpp"

namespace isomarket {

/// Unreadable or syntactically invalid input file.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything an instance document declares.
struct InstanceFile {
  MarketInstance instance;
  MarketSettings settings;
  double verify_tol = 1e-4;
  bool warm_start = true;
};

namespace io_detail {

using nlohmann::json;

inline Matrix parse_matrix(const json& j, const char* what) {
  if (j.is_number()) return Matrix::Constant(1, 1, j.get<double>());
  if (!j.is_array() || j.empty()) throw InputError(std::string(what) + ": expected a row-major array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  Eigen::Index cols = -1;
  Matrix m;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array()) throw InputError(std::string(what) + ": rows must be arrays");
    if (cols < 0) {
      cols = static_cast<Eigen::Index>(row.size());
      m.resize(rows, cols);
    }
    if (static_cast<Eigen::Index>(row.size()) != cols) throw InputError(std::string(what) + ": ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto& e = row[static_cast<std::size_t>(c)];
      if (!e.is_number()) throw InputError(std::string(what) + ": non-numeric entry");
      m(r, c) = e.get<double>();
    }
  }
  return m;
}

inline std::vector<double> parse_numbers(const json& j, const char* what) {
  if (j.is_number()) return {j.get<double>()};
  if (!j.is_array()) throw InputError(std::string(what) + ": expected an array of numbers");
  std::vector<double> out;
  for (const auto& e : j) {
    if (!e.is_number()) throw InputError(std::string(what) + ": non-numeric entry");
    out.push_back(e.get<double>());
  }
  return out;
}

inline Vector parse_vector(const json& j, const char* what) { return to_vector(parse_numbers(j, what)); }

inline double number_or(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) throw InputError(std::string(key) + ": expected a number");
  return j[key].get<double>();
}

inline const json& require(const json& j, const char* key) {
  if (!j.contains(key)) throw InputError(std::string("missing field '") + key + "'");
  return j[key];
}

inline NoiseLaw parse_noise(const json& j) {
  if (j.is_null()) return NoiseLaw::none();
  if (!j.is_object()) throw InputError("noise: expected an object");
  const std::string kind = j.value("kind", "none");
  if (kind == "none") return NoiseLaw::none();
  if (kind == "gaussian") return NoiseLaw::gaussian(number_or(j, "sigma", 1.0));
  if (kind == "finite") {
    if (j.contains("per_time")) {
      std::vector<FiniteSupport> supports;
      for (const auto& s : j["per_time"])
        supports.push_back({parse_numbers(require(s, "values"), "values"),
                            parse_numbers(require(s, "probabilities"), "probabilities")});
      return NoiseLaw::finite_per_time(std::move(supports));
    }
    return NoiseLaw::finite(parse_numbers(require(j, "values"), "values"),
                            parse_numbers(require(j, "probabilities"), "probabilities"));
  }
  throw InputError("noise: unknown kind '" + kind + "'");
}

inline Agent parse_agent(const json& j) {
  if (!j.is_object()) throw InputError("agent: expected an object");
  const std::string kind = j.value("kind", "lq");
  const NoiseLaw noise = parse_noise(j.contains("noise") ? j["noise"] : json());
  const double gain = number_or(j, "common_gain", 1.0);
  Matrix A = parse_matrix(require(j, "A"), "A");
  Matrix B = parse_matrix(require(j, "B"), "B");
  if (B.rows() == 1 && B.cols() > 1) B.transposeInPlace();  // accept [b1, b2, ...] as a column
  Vector x0 = parse_vector(require(j, "x0"), "x0");
  if (kind == "lq") {
    return LqAgent{A, B, parse_matrix(require(j, "Q"), "Q"), parse_matrix(require(j, "R"), "R"), x0, noise, gain};
  }
  if (kind == "convex") {
    const auto& c = require(j, "cost");
    PolynomialCost cost;
    if (c.contains("Q")) cost.Q = parse_matrix(c["Q"], "cost.Q");
    if (c.contains("q")) cost.q = parse_vector(c["q"], "cost.q");
    cost.R = number_or(c, "R", 0.0);
    cost.r = number_or(c, "r", 0.0);
    cost.constant = number_or(c, "constant", 0.0);
    cost.quartic = number_or(c, "quartic", 0.0);
    return make_polynomial_agent(A, B, x0, cost, noise, gain);
  }
  throw InputError("agent: unknown kind '" + kind + "'");
}

inline Regime parse_regime(const std::string& s) {
  if (s == "deterministic") return Regime::deterministic;
  if (s == "tree") return Regime::tree;
  if (s == "lqg") return Regime::lqg;
  throw InputError("unknown regime '" + s + "'");
}

}  // namespace io_detail

inline Regime parse_regime(const std::string& s) { return io_detail::parse_regime(s); }

/// Builds an instance from its JSON document. Instance-level inconsistencies
/// surface as InstanceError, structural problems as InputError.
inline InstanceFile parse_instance(const nlohmann::json& doc) {
  using namespace io_detail;
  try {
    if (!doc.is_object()) throw InputError("instance: expected a JSON object");
    const Regime regime = io_detail::parse_regime(require(doc, "regime").get<std::string>());
    const auto& T = require(doc, "T");
    if (!T.is_number_integer() || T.get<long long>() < 1) throw InputError("T: expected a positive integer");
    std::vector<Agent> agents;
    const auto& aj = require(doc, "agents");
    if (!aj.is_array()) throw InputError("agents: expected an array");
    for (const auto& a : aj) agents.push_back(parse_agent(a));
    NoiseLaw common = parse_noise(doc.contains("common_noise") ? doc["common_noise"] : json());
    InstanceFile out{MarketInstance(std::move(agents), T.get<std::size_t>(), regime, std::move(common)), {}, 1e-4,
                     true};
    if (doc.contains("solver")) {
      const auto& s = doc["solver"];
      if (!s.is_object()) throw InputError("solver: expected an object");
      if (s.contains("rule")) out.settings.rule = parse_price_rule(s["rule"].get<std::string>());
      if (s.contains("step")) out.settings.schedule = StepSchedule::parse(s["step"].get<std::string>());
      out.settings.criterion.bid_tol = number_or(s, "bid_tol", out.settings.criterion.bid_tol);
      out.settings.criterion.balance_tol = number_or(s, "balance_tol", out.settings.criterion.balance_tol);
      if (s.contains("max_rounds")) out.settings.criterion.max_rounds = s["max_rounds"].get<std::size_t>();
      if (s.contains("initial_prices")) out.settings.initial_prices = parse_numbers(s["initial_prices"], "initial_prices");
      out.settings.parallel = s.value("parallel", false);
      out.settings.inner.gtol = number_or(s, "gtol", out.settings.inner.gtol);
      if (s.contains("inner_max_iterations"))
        out.settings.inner.max_iterations = s["inner_max_iterations"].get<std::size_t>();
      out.verify_tol = number_or(s, "verify_tol", out.verify_tol);
      out.warm_start = s.value("warm_start", true);
    }
    out.settings.criterion.validate();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("instance: ") + e.what());
  }
}

inline InstanceFile load_instance_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return parse_instance(doc);
}

/// 17 significant digits: enough to reproduce every double exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace io_detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw InputError("csv: bad number '" + s + "'");
  return v;
}

}  // namespace io_detail

struct EpochLog {
  std::size_t epoch = 0;
  IterationLog log;
};

/// Columns: epoch, round, index, price, bid_0..bid_{M-1}, residual, alpha.
/// `index` is the absolute time for time-indexed runs and the node id for tree runs.
inline void write_iterations_csv(std::ostream& out, std::span<const EpochLog> logs, std::size_t n_agents) {
  out << "epoch,round,index,price";
  for (std::size_t i = 0; i < n_agents; ++i) out << ",bid_" << i;
  out << ",residual,alpha\n";
  for (const auto& el : logs) {
    for (const auto& rec : el.log.rounds) {
      for (std::size_t j = 0; j < rec.prices.size(); ++j) {
        out << el.epoch << ',' << rec.round << ',' << el.log.index_label(j) << ',' << format_double(rec.prices[j]);
        for (std::size_t i = 0; i < n_agents; ++i) out << ',' << format_double(rec.bids[i][j]);
        out << ',' << format_double(rec.residual[j]) << ',' << format_double(rec.alpha) << '\n';
      }
    }
  }
}

struct IterationCsvRow {
  std::size_t epoch = 0;
  std::size_t round = 0;
  std::size_t index = 0;
  double price = 0.0;
  std::vector<double> bids;
  double residual = 0.0;
  double alpha = 0.0;
};

inline std::vector<IterationCsvRow> read_iterations_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("iterations csv: empty");
  const auto header = io_detail::split_csv(line);
  if (header.size() < 6) throw InputError("iterations csv: bad header");
  const std::size_t n_agents = header.size() - 6;
  std::vector<IterationCsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = io_detail::split_csv(line);
    if (cells.size() != header.size()) throw InputError("iterations csv: ragged row");
    IterationCsvRow row;
    row.epoch = std::stoul(cells[0]);
    row.round = std::stoul(cells[1]);
    row.index = std::stoul(cells[2]);
    row.price = io_detail::parse_double(cells[3]);
    for (std::size_t i = 0; i < n_agents; ++i) row.bids.push_back(io_detail::parse_double(cells[4 + i]));
    row.residual = io_detail::parse_double(cells[4 + n_agents]);
    row.alpha = io_detail::parse_double(cells[5 + n_agents]);
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Long format: t, agent, kind (x or u), component, value.
inline void write_trajectories_csv(std::ostream& out, std::span<const Trajectory> trajectories) {
  out << "t,agent,kind,component,value\n";
  std::size_t steps = 0;
  for (const auto& tr : trajectories) steps = std::max(steps, tr.states.size());
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      const auto& tr = trajectories[i];
      if (t < tr.states.size())
        for (Eigen::Index c = 0; c < tr.states[t].size(); ++c)
          out << t << ',' << i << ",x," << c << ',' << format_double(tr.states[t](c)) << '\n';
      if (t < tr.controls.size()) out << t << ',' << i << ",u,0," << format_double(tr.controls[t]) << '\n';
    }
  }
}

inline std::vector<Trajectory> read_trajectories_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "t,agent,kind,component,value")
    throw InputError("trajectories csv: bad header");
  std::map<std::size_t, std::map<std::size_t, std::vector<double>>> states;  // agent -> t -> x
  std::map<std::size_t, std::map<std::size_t, double>> controls;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = io_detail::split_csv(line);
    if (cells.size() != 5) throw InputError("trajectories csv: ragged row");
    const std::size_t t = std::stoul(cells[0]);
    const std::size_t agent = std::stoul(cells[1]);
    const std::size_t comp = std::stoul(cells[3]);
    const double value = io_detail::parse_double(cells[4]);
    if (cells[2] == "x") {
      auto& x = states[agent][t];
      if (x.size() <= comp) x.resize(comp + 1);
      x[comp] = value;
    } else if (cells[2] == "u") {
      controls[agent][t] = value;
    } else {
      throw InputError("trajectories csv: unknown kind " + cells[2]);
    }
  }
  std::vector<Trajectory> out(states.size());
  for (auto& [agent, by_t] : states) {
    if (agent >= out.size()) throw InputError("trajectories csv: agents not contiguous");
    for (auto& [t, x] : by_t) out[agent].states.push_back(to_vector(x));
    for (auto& [t, u] : controls[agent]) out[agent].controls.push_back(u);
  }
  return out;
}

}  // namespace isomarket
