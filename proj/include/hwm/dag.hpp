#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hwm/doc/value.hpp"
#include "hwm/schema.hpp"

namespace hwm {

class DagError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Stochastic nodes are modeled; deterministic nodes only condition.
struct DagNode {
  std::string id;
  Stream stream = Stream::stochastic;

  friend bool operator==(const DagNode&, const DagNode&) = default;
};

using Edge = std::pair<std::string, std::string>;  // (parent, child)

class Dag {
 public:
  Dag() = default;
  explicit Dag(std::vector<DagNode> nodes, std::set<Edge> edges = {}) : nodes_(std::move(nodes)), edges_(std::move(edges)) {
    check();
  }

  // Structural variables of the schema; no edges.
  static Dag over(const ObservationSchema& schema) {
    std::vector<DagNode> nodes;
    for (const auto& v : schema.variables())
      if (v.structural) nodes.push_back({v.name, v.stream});
    return Dag(std::move(nodes));
  }

  const std::vector<DagNode>& nodes() const { return nodes_; }
  const std::set<Edge>& edges() const { return edges_; }
  std::size_t size() const { return nodes_.size(); }

  const DagNode* find(std::string_view id) const {
    for (const auto& n : nodes_)
      if (n.id == id) return &n;
    return nullptr;
  }
  bool modeled(std::string_view id) const {
    const auto* n = find(id);
    return n && n->stream == Stream::stochastic;
  }
  std::vector<std::string> modeled_nodes() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
      if (n.stream == Stream::stochastic) out.push_back(n.id);
    return out;
  }
  bool has_edge(const std::string& parent, const std::string& child) const { return edges_.contains({parent, child}); }

  // Sorted parent ids.
  std::vector<std::string> parents(std::string_view child) const {
    std::vector<std::string> out;
    for (const auto& [p, c] : edges_)
      if (c == child) out.push_back(p);
    std::sort(out.begin(), out.end());
    return out;
  }

  // Kahn's algorithm, ties broken by node declaration order.
  std::optional<std::vector<std::string>> topological_order() const {
    std::vector<int> indeg(nodes_.size(), 0);
    auto idx = [&](const std::string& id) {
      for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].id == id) return i;
      return nodes_.size();
    };
    for (const auto& e : edges_) ++indeg[idx(e.second)];
    std::vector<std::string> order;
    std::vector<bool> done(nodes_.size(), false);
    for (std::size_t round = 0; round < nodes_.size(); ++round) {
      std::size_t pick = nodes_.size();
      for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (!done[i] && indeg[i] == 0) {
          pick = i;
          break;
        }
      if (pick == nodes_.size()) return std::nullopt;
      done[pick] = true;
      order.push_back(nodes_[pick].id);
      for (const auto& e : edges_)
        if (e.first == nodes_[pick].id) --indeg[idx(e.second)];
    }
    return order;
  }
  bool acyclic() const { return topological_order().has_value(); }

  // Whether `to` is reachable from `from` along directed edges.
  bool reaches(const std::string& from, const std::string& to) const {
    std::vector<std::string> stack{from};
    std::set<std::string> seen;
    while (!stack.empty()) {
      std::string cur = std::move(stack.back());
      stack.pop_back();
      if (cur == to) return true;
      if (!seen.insert(cur).second) continue;
      for (const auto& [p, c] : edges_)
        if (p == cur) stack.push_back(c);
    }
    return false;
  }

  // Unchecked edits; callers check acyclicity.
  Dag with_edges(std::set<Edge> edges) const {
    Dag d;
    d.nodes_ = nodes_;
    d.edges_ = std::move(edges);
    return d;
  }

  std::set<std::pair<std::string, std::string>> skeleton() const {
    std::set<std::pair<std::string, std::string>> out;
    for (const auto& [a, b] : edges_) out.insert(a < b ? Edge{a, b} : Edge{b, a});
    return out;
  }

  // Canonical text of the edge set, for memo keys.
  std::string edge_key() const {
    std::string s;
    for (const auto& [p, c] : edges_) {
      s += p;
      s += '>';
      s += c;
      s += ';';
    }
    return s;
  }

  void check() const {
    std::set<std::string> ids;
    for (const auto& n : nodes_)
      if (!ids.insert(n.id).second) throw DagError("duplicate node '" + n.id + "'");
    for (const auto& [p, c] : edges_) {
      if (!ids.contains(p) || !ids.contains(c)) throw DagError("edge " + p + "->" + c + " names an unknown node");
      if (p == c) throw DagError("self loop on '" + p + "'");
      if (!modeled(c)) throw DagError("edge into conditioning-only node '" + c + "'");
    }
    if (!acyclic()) throw DagError("edge set has a cycle");
  }

  friend bool operator==(const Dag&, const Dag&) = default;

 private:
  std::vector<DagNode> nodes_;
  std::set<Edge> edges_;
};

inline doc::Value to_value(const Dag& d) {
  doc::Array nodes, edges;
  for (const auto& n : d.nodes())
    nodes.push_back(doc::Value::object({{"id", n.id}, {"stream", std::string(stream_name(n.stream))}}));
  for (const auto& [p, c] : d.edges()) edges.push_back(doc::Value::array({p, c}));
  return doc::Value::object({{"nodes", doc::Value(std::move(nodes))}, {"edges", doc::Value(std::move(edges))}});
}

inline Dag dag_from_value(const doc::Value& v) {
  const doc::Value* nodes = v.find("nodes");
  const doc::Value* edges = v.find("edges");
  if (!nodes || !nodes->is_array()) throw DagError("DAG needs a 'nodes' sequence");
  std::vector<DagNode> ns;
  for (const auto& n : nodes->as_array()) {
    const auto& s = n.at("stream").as_text();
    if (s != "stochastic" && s != "deterministic") throw DagError("bad stream '" + s + "'");
    ns.push_back({n.at("id").as_text(), s == "stochastic" ? Stream::stochastic : Stream::deterministic});
  }
  std::set<Edge> es;
  if (edges) {
    if (!edges->is_array()) throw DagError("'edges' must be a sequence");
    for (const auto& e : edges->as_array()) {
      if (!e.is_array() || e.as_array().size() != 2) throw DagError("edge must be a [parent, child] pair");
      es.insert({e.as_array()[0].as_text(), e.as_array()[1].as_text()});
    }
  }
  return Dag(std::move(ns), std::move(es));
}

}  // namespace hwm
