#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ozlab/error.hpp"
#include "ozlab/geometry.hpp"

namespace ozlab {

struct ModelParams {
  double p = 0.5;
  double q = 1.0;

  ModelParams() = default;
  ModelParams(double p_, double q_) : p(p_), q(q_) { validate(); }
  void validate() const {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("p must lie in [0, 1]");
    if (!(q >= 1.0) || !std::isfinite(q)) throw ContractError("q must be a finite number >= 1");
  }
};

inline double critical_p(double q) { return std::sqrt(q) / (1.0 + std::sqrt(q)); }

// Parameter of the dual model on the dual lattice.
inline double dual_parameter(const ModelParams& m) {
  const double a = m.q * (1.0 - m.p);
  return a / (m.p + a);
}

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n = 0) { reset(n); }
  void reset(std::size_t n) {
    parent_.resize(n);
    size_.assign(n, 1);
    std::iota(parent_.begin(), parent_.end(), 0u);
  }
  std::uint32_t find(std::uint32_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  bool unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    return true;
  }
  std::uint32_t component_size(std::uint32_t a) { return size_[find(a)]; }
  std::size_t size() const { return parent_.size(); }

 private:
  std::vector<std::uint32_t> parent_;
  std::vector<std::uint32_t> size_;
};

struct GraphEdge {
  std::uint32_t u = 0, v = 0;
  EdgeId id;
};

// Finite subgraph of Z^2. The boundary holds the vertices incident to a Z^2
// edge that is not in the graph.
class FiniteGraph {
 public:
  FiniteGraph() = default;

  static FiniteGraph from_edges(const std::vector<EdgeId>& ids) {
    FiniteGraph g;
    for (const auto& id : ids) {
      if (id.dual) throw ContractError("finite graphs are built from primal edges");
      const std::uint32_t u = g.add_vertex(id.endpoint);
      const std::uint32_t v = g.add_vertex(id.other_endpoint());
      g.edges_.push_back({u, v, id});
    }
    g.finish();
    return g;
  }

  // Rectangle of vertices with every lattice edge inside it. Edges are listed
  // horizontal first (row-major), then vertical (row-major).
  static FiniteGraph box(const Box& b) {
    std::vector<EdgeId> ids;
    for (int y = b.ymin; y <= b.ymax; ++y)
      for (int x = b.xmin; x < b.xmax; ++x) ids.push_back(horizontal_edge(x, y));
    for (int y = b.ymin; y < b.ymax; ++y)
      for (int x = b.xmin; x <= b.xmax; ++x) ids.push_back(vertical_edge(x, y));
    FiniteGraph g = from_edges(ids);
    g.box_ = b;
    return g;
  }

  std::size_t num_vertices() const { return vertices_.size(); }
  std::size_t num_edges() const { return edges_.size(); }
  const std::vector<LatticePoint>& vertices() const { return vertices_; }
  const std::vector<GraphEdge>& edges() const { return edges_; }
  const std::vector<std::uint32_t>& boundary() const { return boundary_; }
  const std::vector<std::uint32_t>& incident(std::uint32_t v) const { return incident_[v]; }
  const Box* box() const { return box_ ? &*box_ : nullptr; }

  std::int64_t index_of(LatticePoint p) const {
    auto it = index_.find(p);
    return it == index_.end() ? -1 : static_cast<std::int64_t>(it->second);
  }
  std::int64_t edge_index(const EdgeId& e) const {
    for (std::size_t i = 0; i < edges_.size(); ++i)
      if (edges_[i].id == e) return static_cast<std::int64_t>(i);
    return -1;
  }

 private:
  std::uint32_t add_vertex(LatticePoint p) {
    auto [it, fresh] = index_.try_emplace(p, static_cast<std::uint32_t>(vertices_.size()));
    if (fresh) vertices_.push_back(p);
    return it->second;
  }
  void finish() {
    incident_.assign(vertices_.size(), {});
    for (std::uint32_t i = 0; i < edges_.size(); ++i) {
      incident_[edges_[i].u].push_back(i);
      incident_[edges_[i].v].push_back(i);
    }
    for (std::uint32_t v = 0; v < vertices_.size(); ++v)
      if (incident_[v].size() < 4) boundary_.push_back(v);
  }

  std::vector<LatticePoint> vertices_;
  std::vector<GraphEdge> edges_;
  std::vector<std::vector<std::uint32_t>> incident_;
  std::vector<std::uint32_t> boundary_;
  std::unordered_map<LatticePoint, std::uint32_t> index_;
  std::optional<Box> box_;
};

// Partition of the boundary vertices into wired blocks.
class BoundaryCondition {
 public:
  BoundaryCondition() = default;

  static BoundaryCondition free(const FiniteGraph& g) {
    BoundaryCondition bc;
    for (auto v : g.boundary()) bc.blocks_.push_back({v});
    bc.name_ = "free";
    return bc;
  }
  static BoundaryCondition wired(const FiniteGraph& g) {
    BoundaryCondition bc;
    if (!g.boundary().empty()) bc.blocks_.push_back(g.boundary());
    bc.name_ = "wired";
    return bc;
  }
  // Unlisted boundary vertices become singletons.
  static BoundaryCondition from_blocks(const FiniteGraph& g, std::vector<std::vector<std::uint32_t>> blocks) {
    std::vector<int> seen(g.num_vertices(), 0);
    std::vector<int> is_boundary(g.num_vertices(), 0);
    for (auto v : g.boundary()) is_boundary[v] = 1;
    for (const auto& b : blocks)
      for (auto v : b) {
        if (v >= g.num_vertices() || !is_boundary[v]) throw ContractError("boundary block holds a non-boundary vertex");
        if (seen[v]++) throw ContractError("boundary blocks overlap");
      }
    for (auto v : g.boundary())
      if (!seen[v]) blocks.push_back({v});
    BoundaryCondition bc;
    bc.blocks_ = std::move(blocks);
    bc.name_ = "custom";
    return bc;
  }

  const std::vector<std::vector<std::uint32_t>>& blocks() const { return blocks_; }
  const std::string& name() const { return name_; }

  // Merge wired blocks into a disjoint-set structure over the graph vertices.
  void wire(DisjointSets& ds) const {
    for (const auto& b : blocks_)
      for (std::size_t i = 1; i < b.size(); ++i) ds.unite(b[0], b[i]);
  }

  // True when every block of `finer` lies inside one block of *this.
  bool coarser_than(const BoundaryCondition& finer, std::size_t num_vertices) const {
    std::vector<std::int64_t> owner(num_vertices, -1);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      for (auto v : blocks_[i]) owner[v] = static_cast<std::int64_t>(i);
    for (const auto& b : finer.blocks_)
      for (auto v : b)
        if (owner[v] != owner[b[0]]) return false;
    return true;
  }

 private:
  std::vector<std::vector<std::uint32_t>> blocks_;
  std::string name_ = "custom";
};

// Packed edge states. Bit i is edge i of the owning graph.
class BondConfig {
 public:
  BondConfig() = default;
  explicit BondConfig(std::size_t n_edges) : n_(n_edges), words_((n_edges + 63) / 64, 0) {}

  static BondConfig from_mask(std::size_t n_edges, std::uint64_t mask) {
    if (n_edges > 64) throw ContractError("mask form holds at most 64 edges");
    BondConfig c(n_edges);
    if (n_edges) c.words_[0] = n_edges == 64 ? mask : (mask & ((std::uint64_t{1} << n_edges) - 1));
    return c;
  }
  std::uint64_t to_mask() const {
    if (n_ > 64) throw ContractError("mask form holds at most 64 edges");
    return n_ ? words_[0] : 0;
  }

  std::size_t size() const { return n_; }
  bool operator[](std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1u; }
  void set(std::size_t i, bool open) {
    const std::uint64_t bit = std::uint64_t{1} << (i & 63);
    if (open)
      words_[i >> 6] |= bit;
    else
      words_[i >> 6] &= ~bit;
  }
  std::size_t count_open() const {
    std::size_t c = 0;
    for (auto w : words_) c += static_cast<std::size_t>(__builtin_popcountll(w));
    return c;
  }
  const std::vector<std::uint64_t>& words() const { return words_; }
  std::vector<std::uint64_t>& words() { return words_; }
  friend bool operator==(const BondConfig&, const BondConfig&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> words_;
};

// Union of open edges (and optionally the boundary wiring).
inline DisjointSets open_clusters(const FiniteGraph& g, const BondConfig& w, const BoundaryCondition* bc = nullptr) {
  DisjointSets ds(g.num_vertices());
  if (bc) bc->wire(ds);
  for (std::size_t i = 0; i < g.num_edges(); ++i)
    if (w[i]) ds.unite(g.edges()[i].u, g.edges()[i].v);
  return ds;
}

inline std::size_t count_clusters(DisjointSets& ds) {
  std::size_t k = 0;
  for (std::uint32_t v = 0; v < ds.size(); ++v)
    if (ds.find(v) == v) ++k;
  return k;
}

}  // namespace ozlab
