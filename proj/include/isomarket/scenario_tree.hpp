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

#include <charconv>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "isomarket/errors.hpp"
#include "isomarket/noise.hpp"

namespace isomarket {

struct TreeNode {
  std::optional<std::size_t> parent;
  std::size_t depth = 0;
  double common_noise = 0.0;          // realized on the edge into this node
  std::vector<double> private_noise;  // one entry per agent
  double edge_probability = 1.0;
  double path_probability = 1.0;
  std::vector<std::size_t> children;
};

/// Rooted tree of partial noise histories.
///
/// Nodes are stored breadth-first, so every non-leaf node precedes every leaf
/// and node ids [0, internal_count()) are exactly the decision nodes. The
/// noise stored on a node is the disturbance on the step that leads into it.
class ScenarioTree {
 public:
  ScenarioTree(std::vector<TreeNode> nodes, std::size_t horizon, std::size_t start_time)
      : nodes_(std::move(nodes)), horizon_(horizon), start_time_(start_time) {
    validate();
  }

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(std::size_t v) const { return nodes_.at(v); }
  std::size_t size() const { return nodes_.size(); }
  std::size_t horizon() const { return horizon_; }
  std::size_t start_time() const { return start_time_; }
  std::size_t internal_count() const { return internal_; }
  std::size_t agent_count() const { return nodes_.front().private_noise.size(); }
  std::size_t time_of(std::size_t v) const { return start_time_ + nodes_[v].depth; }
  bool is_leaf(std::size_t v) const { return nodes_[v].depth == horizon_; }

  /// Node ids from the root down to v.
  std::vector<std::size_t> path_to(std::size_t v) const {
    std::vector<std::size_t> path;
    for (std::optional<std::size_t> cur = v; cur; cur = nodes_[*cur].parent) path.push_back(*cur);
    return {path.rbegin(), path.rend()};
  }

  /// Breadth-first node ids of the subtree rooted at v, restricted to
  /// non-leaf nodes when `internal_only` is set.
  std::vector<std::size_t> subtree(std::size_t v, bool internal_only = false) const {
    std::vector<std::size_t> order{v};
    for (std::size_t k = 0; k < order.size(); ++k)
      for (std::size_t c : nodes_[order[k]].children) order.push_back(c);
    if (internal_only) std::erase_if(order, [&](std::size_t w) { return is_leaf(w); });
    return order;
  }

 private:
  void validate() {
    if (nodes_.empty()) throw InstanceError("scenario tree: no nodes");
    if (nodes_[0].parent || nodes_[0].depth != 0) throw InstanceError("scenario tree: node 0 must be the root");
    const std::size_t m = nodes_[0].private_noise.size();
    internal_ = 0;
    for (std::size_t v = 0; v < nodes_.size(); ++v) {
      const auto& node = nodes_[v];
      if (node.private_noise.size() != m) throw InstanceError("scenario tree: inconsistent agent count");
      if (v > 0) {
        if (!node.parent || *node.parent >= v)
          throw InstanceError("scenario tree: parents must precede children");
        const auto& parent = nodes_[*node.parent];
        if (node.depth != parent.depth + 1) throw InstanceError("scenario tree: depth mismatch");
        if (node.depth < nodes_[v - 1].depth) throw InstanceError("scenario tree: nodes not breadth-first");
        if (!(node.edge_probability >= 0.0)) throw InstanceError("scenario tree: negative edge probability");
        const double expected = parent.path_probability * node.edge_probability;
        if (std::abs(node.path_probability - expected) > 1e-12)
          throw InstanceError("scenario tree: path probability is not the product of edge probabilities");
      } else if (node.path_probability != 1.0) {
        throw InstanceError("scenario tree: root probability must be 1");
      }
      if (node.depth > horizon_) throw InstanceError("scenario tree: node deeper than the horizon");
      if (node.depth < horizon_) {
        if (node.children.empty()) throw InstanceError("scenario tree: leaf above the horizon");
        if (internal_ != v) throw InstanceError("scenario tree: non-leaf node after a leaf");
        ++internal_;
        double total = 0.0;
        for (std::size_t c : node.children) {
          if (c >= nodes_.size() || nodes_[c].parent != v)
            throw InstanceError("scenario tree: child/parent links disagree");
          total += nodes_[c].edge_probability;
        }
        if (std::abs(total - 1.0) > 1e-12)
          throw InstanceError("scenario tree: child probabilities do not sum to 1");
      } else if (!node.children.empty()) {
        throw InstanceError("scenario tree: node at the horizon has children");
      }
    }
  }

  std::vector<TreeNode> nodes_;
  std::size_t horizon_;
  std::size_t start_time_;
  std::size_t internal_ = 0;
};

/// Product-branching tree of depth `horizon` starting at absolute time
/// `start_time`. Each node branches on every joint outcome of the common law
/// and all private laws (taken as independent); outcomes are enumerated with
/// the common value outermost and the last agent innermost.
inline ScenarioTree build_tree(const NoiseLaw& common, std::span<const NoiseLaw> privates,
                               std::size_t horizon, std::size_t start_time = 0) {
  auto require_finite = [](const NoiseLaw& law) {
    if (law.kind() == NoiseLaw::Kind::gaussian)
      throw UnsupportedRegimeError("scenario trees need finite-support noise laws");
  };
  require_finite(common);
  for (const auto& law : privates) require_finite(law);

  struct Outcome {
    double common;
    std::vector<double> privates;
    double probability;
  };
  auto joint_outcomes = [&](std::size_t t) {
    std::vector<Outcome> outcomes;
    const auto& cs = common.support_at(t);
    for (std::size_t a = 0; a < cs.values.size(); ++a)
      outcomes.push_back({cs.values[a], {}, cs.probabilities[a]});
    for (const auto& law : privates) {
      const auto& ps = law.support_at(t);
      std::vector<Outcome> next;
      next.reserve(outcomes.size() * ps.values.size());
      for (const auto& o : outcomes)
        for (std::size_t b = 0; b < ps.values.size(); ++b) {
          Outcome e = o;
          e.privates.push_back(ps.values[b]);
          e.probability *= ps.probabilities[b];
          next.push_back(std::move(e));
        }
      outcomes = std::move(next);
    }
    return outcomes;
  };

  std::vector<TreeNode> nodes(1);
  nodes[0].private_noise.assign(privates.size(), 0.0);
  std::size_t level_begin = 0;
  for (std::size_t depth = 0; depth < horizon; ++depth) {
    const auto outcomes = joint_outcomes(start_time + depth);
    const std::size_t level_end = nodes.size();
    for (std::size_t v = level_begin; v < level_end; ++v) {
      for (const auto& o : outcomes) {
        TreeNode child;
        child.parent = v;
        child.depth = depth + 1;
        child.common_noise = o.common;
        child.private_noise = o.privates;
        child.edge_probability = o.probability;
        child.path_probability = nodes[v].path_probability * o.probability;
        nodes[v].children.push_back(nodes.size());
        nodes.push_back(std::move(child));
      }
    }
    level_begin = level_end;
  }
  return ScenarioTree(std::move(nodes), horizon, start_time);
}

/// Single-path tree with zero noise: the deterministic problem seen as a tree.
inline ScenarioTree path_tree(std::size_t n_agents, std::size_t horizon, std::size_t start_time = 0) {
  const std::vector<NoiseLaw> none(n_agents);
  return build_tree(NoiseLaw::none(), none, horizon, start_time);
}

namespace detail {
inline std::string shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}
}  // namespace detail

/// Graphviz rendering: nodes labelled with time and noise, edges with probability.
inline std::string export_tree_dot(const ScenarioTree& tree) {
  std::string out = "digraph scenario_tree {\n  node [shape=circle, fontsize=10];\n";
  for (std::size_t v = 0; v < tree.size(); ++v) {
    const auto& n = tree.node(v);
    out += "  n" + std::to_string(v) + " [label=\"t=" + std::to_string(tree.time_of(v));
    if (n.parent) {
      out += "\\nc=" + detail::shortest(n.common_noise);
      if (!n.private_noise.empty()) {
        out += " p=(";
        for (std::size_t i = 0; i < n.private_noise.size(); ++i) {
          if (i) out += ",";
          out += detail::shortest(n.private_noise[i]);
        }
        out += ")";
      }
    }
    out += "\"];\n";
  }
  for (std::size_t v = 1; v < tree.size(); ++v) {
    const auto& n = tree.node(v);
    out += "  n" + std::to_string(*n.parent) + " -> n" + std::to_string(v) + " [label=\"" +
           detail::shortest(n.edge_probability) + "\"];\n";
  }
  out += "}\n";
  return out;
}

}  // namespace isomarket
