#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ozlab/error.hpp"
#include "ozlab/graph.hpp"

namespace ozlab {

// Events are predicates over edge masks: bit i set means edge i is open.
using Event = std::function<bool(std::uint64_t)>;

inline constexpr std::size_t kDefaultEnumerationCap = 24;

namespace detail {

// Union-find on a small fixed array, rebuilt per configuration.
struct TinyUnionFind {
  std::vector<std::uint16_t> parent;
  std::uint16_t find(std::uint16_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  }
  bool unite(std::uint16_t a, std::uint16_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[b] = a;
    return true;
  }
};

inline double log_add(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

}  // namespace detail

// Exhaustive random-cluster measure on a small graph. Every configuration
// stores its cluster count; weights are evaluated in log space.
class ExactRcm {
 public:
  ExactRcm(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& bc,
           std::size_t cap = kDefaultEnumerationCap)
      : g_(g), m_(m), bc_(bc) {
    if (g.num_edges() > cap || g.num_edges() > 30)
      throw EnumerationCapError("graph has " + std::to_string(g.num_edges()) + " edges, cap is " + std::to_string(cap));
    if (!(m.p > 0.0 && m.p < 1.0)) throw ContractError("exact enumeration needs p in (0, 1)");
    m.validate();
    if (g.num_vertices() >= 65535) throw ContractError("too many vertices");
    log_ratio_ = std::log(m.p) - std::log1p(-m.p);
    log_q_ = std::log(m.q);

    const std::size_t E = g.num_edges();
    const std::size_t n = std::size_t{1} << E;
    clusters_.resize(n);
    detail::TinyUnionFind base;
    base.parent.resize(g.num_vertices());
    for (std::uint16_t v = 0; v < base.parent.size(); ++v) base.parent[v] = v;
    std::uint16_t base_k = static_cast<std::uint16_t>(g.num_vertices());
    for (const auto& b : bc.blocks())
      for (std::size_t i = 1; i < b.size(); ++i)
        if (base.unite(static_cast<std::uint16_t>(b[0]), static_cast<std::uint16_t>(b[i]))) --base_k;

    detail::TinyUnionFind uf;
    double lz = -INFINITY;
    for (std::uint64_t mask = 0; mask < n; ++mask) {
      uf.parent = base.parent;
      std::uint16_t k = base_k;
      for (std::size_t e = 0; e < E; ++e)
        if ((mask >> e) & 1u)
          if (uf.unite(static_cast<std::uint16_t>(g.edges()[e].u), static_cast<std::uint16_t>(g.edges()[e].v))) --k;
      clusters_[mask] = k;
      lz = detail::log_add(lz, log_weight(mask));
    }
    log_z_ = lz;
  }

  const FiniteGraph& graph() const { return g_; }
  const ModelParams& params() const { return m_; }
  const BoundaryCondition& boundary_condition() const { return bc_; }
  std::size_t num_configs() const { return clusters_.size(); }

  double log_partition() const { return log_z_; }
  // Number of clusters of the configuration with the boundary wiring applied.
  int clusters(std::uint64_t mask) const { return clusters_[mask]; }
  double log_weight(std::uint64_t mask) const {
    return static_cast<double>(__builtin_popcountll(mask)) * log_ratio_ + clusters_[mask] * log_q_;
  }
  double probability(std::uint64_t mask) const { return std::exp(log_weight(mask) - log_z_); }

  template <class Pred>
  double event_probability(Pred&& event) const {
    // Neumaier-compensated sum
    double s = 0.0, c = 0.0;
    for (std::uint64_t mask = 0; mask < clusters_.size(); ++mask) {
      if (!event(mask)) continue;
      const double x = probability(mask);
      const double t = s + x;
      c += std::abs(s) >= std::abs(x) ? (s - t) + x : (x - t) + s;
      s = t;
    }
    return s + c;
  }

  std::vector<double> distribution() const {
    std::vector<double> out(clusters_.size());
    for (std::uint64_t mask = 0; mask < out.size(); ++mask) out[mask] = probability(mask);
    return out;
  }

  std::vector<double> edge_marginals() const {
    std::vector<double> out(g_.num_edges(), 0.0);
    for (std::uint64_t mask = 0; mask < clusters_.size(); ++mask) {
      const double pr = probability(mask);
      for (std::size_t e = 0; e < out.size(); ++e)
        if ((mask >> e) & 1u) out[e] += pr;
    }
    return out;
  }

 private:
  FiniteGraph g_;
  ModelParams m_;
  BoundaryCondition bc_;
  double log_ratio_ = 0.0, log_q_ = 0.0, log_z_ = 0.0;
  std::vector<std::uint16_t> clusters_;
};

// log Z for (graph, params, bc).
inline double partition_function(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& bc) {
  return ExactRcm(g, m, bc).log_partition();
}

inline double event_probability(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& bc,
                                const Event& event) {
  return ExactRcm(g, m, bc).event_probability(event);
}

// ---- common events ----

inline Event edge_open_event(std::size_t e) {
  return [e](std::uint64_t mask) { return ((mask >> e) & 1u) != 0; };
}

// Open path between any vertex of `from` and any vertex of `to` (no wiring).
inline Event connection_event(const FiniteGraph& g, std::vector<std::uint32_t> from, std::vector<std::uint32_t> to) {
  return [&g, from = std::move(from), to = std::move(to)](std::uint64_t mask) {
    detail::TinyUnionFind uf;
    uf.parent.resize(g.num_vertices());
    for (std::uint16_t v = 0; v < uf.parent.size(); ++v) uf.parent[v] = v;
    for (std::size_t e = 0; e < g.num_edges(); ++e)
      if ((mask >> e) & 1u) uf.unite(static_cast<std::uint16_t>(g.edges()[e].u), static_cast<std::uint16_t>(g.edges()[e].v));
    std::vector<char> hit(g.num_vertices(), 0);
    for (auto a : from) hit[uf.find(static_cast<std::uint16_t>(a))] = 1;
    for (auto b : to)
      if (hit[uf.find(static_cast<std::uint16_t>(b))]) return true;
    return false;
  };
}

inline bool is_increasing(const ExactRcm& ex, const Event& a) {
  const std::size_t E = ex.graph().num_edges();
  for (std::uint64_t mask = 0; mask < ex.num_configs(); ++mask) {
    if (!a(mask)) continue;
    for (std::size_t e = 0; e < E; ++e)
      if (!((mask >> e) & 1u) && !a(mask | (std::uint64_t{1} << e))) return false;
  }
  return true;
}

struct FkgResult {
  double joint = 0.0;    // phi[A and B]
  double product = 0.0;  // phi[A] phi[B]
};

inline FkgResult fkg_check(const ExactRcm& ex, const Event& a, const Event& b) {
  if (!is_increasing(ex, a) || !is_increasing(ex, b)) throw NotIncreasingError("fkg_check needs increasing events");
  FkgResult r;
  r.joint = ex.event_probability([&](std::uint64_t m) { return a(m) && b(m); });
  r.product = ex.event_probability(a) * ex.event_probability(b);
  return r;
}

inline FkgResult fkg_check(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& bc, const Event& a,
                           const Event& b) {
  return fkg_check(ExactRcm(g, m, bc), a, b);
}

struct MonResult {
  double finer = 0.0;    // phi^eta[A]
  double coarser = 0.0;  // phi^eta'[A]
};

// Monotonicity in the boundary condition for an increasing event.
inline MonResult mon_check(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& finer,
                           const BoundaryCondition& coarser, const Event& a) {
  if (!coarser.coarser_than(finer, g.num_vertices())) throw ContractError("second boundary condition is not coarser");
  ExactRcm ef(g, m, finer), ec(g, m, coarser);
  if (!is_increasing(ef, a)) throw NotIncreasingError("mon_check needs an increasing event");
  return {ef.event_probability(a), ec.event_probability(a)};
}

// Domain Markov check. `inner` lists the edge indices of the subgraph G'.
// `outside` fixes the states of the other edges (bit i of the mask refers to
// edge i of G). Returns the largest absolute difference between the
// conditional law on G' and the measure on G' with the induced boundary
// condition.
inline double dmp_check(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& bc,
                        const std::vector<std::size_t>& inner, std::uint64_t outside) {
  const ExactRcm full(g, m, bc);
  std::vector<char> is_inner(g.num_edges(), 0);
  std::vector<EdgeId> ids;
  for (auto e : inner) {
    if (e >= g.num_edges() || is_inner[e]) throw ContractError("bad inner edge list");
    is_inner[e] = 1;
    ids.push_back(g.edges()[e].id);
  }
  std::uint64_t fixed_mask = 0;
  for (std::size_t e = 0; e < g.num_edges(); ++e)
    if (!is_inner[e]) fixed_mask |= std::uint64_t{1} << e;
  const std::uint64_t xi = outside & fixed_mask;

  // conditional law from the full enumeration
  std::vector<double> cond(std::size_t{1} << inner.size(), 0.0);
  double total = 0.0;
  for (std::uint64_t sub = 0; sub < cond.size(); ++sub) {
    std::uint64_t mask = xi;
    for (std::size_t j = 0; j < inner.size(); ++j)
      if ((sub >> j) & 1u) mask |= std::uint64_t{1} << inner[j];
    cond[sub] = full.probability(mask);
    total += cond[sub];
  }
  if (!(total > 0.0)) throw ContractError("conditioning event has probability zero");
  for (auto& c : cond) c /= total;

  // induced boundary condition on G'
  const FiniteGraph sub = FiniteGraph::from_edges(ids);
  DisjointSets ds(g.num_vertices());
  bc.wire(ds);
  for (std::size_t e = 0; e < g.num_edges(); ++e)
    if (!is_inner[e] && ((xi >> e) & 1u)) ds.unite(g.edges()[e].u, g.edges()[e].v);
  std::vector<std::vector<std::uint32_t>> blocks;
  std::unordered_map<std::uint32_t, std::size_t> block_of_root;
  for (auto v : sub.boundary()) {
    const auto root = ds.find(static_cast<std::uint32_t>(g.index_of(sub.vertices()[v])));
    auto [it, fresh] = block_of_root.try_emplace(root, blocks.size());
    if (fresh) blocks.emplace_back();
    blocks[it->second].push_back(v);
  }
  const ExactRcm local(sub, m, BoundaryCondition::from_blocks(sub, blocks));
  double worst = 0.0;
  for (std::uint64_t s = 0; s < cond.size(); ++s) worst = std::max(worst, std::abs(cond[s] - local.probability(s)));
  return worst;
}

// ---- oracle export ----

inline nlohmann::json graph_json(const FiniteGraph& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges())
    edges.push_back({e.id.endpoint.x, e.id.endpoint.y, e.id.orientation == Orientation::horizontal ? "h" : "v"});
  return {{"edges", edges}};
}

inline nlohmann::json bc_json(const FiniteGraph& g, const BoundaryCondition& bc) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : bc.blocks()) {
    nlohmann::json block = nlohmann::json::array();
    for (auto v : b) block.push_back({g.vertices()[v].x, g.vertices()[v].y});
    blocks.push_back(block);
  }
  return {{"name", bc.name()}, {"blocks", blocks}};
}

struct OracleRecord {
  std::string graph_name;
  std::string event_name;
  double probability = 0.0;
};

// One JSON object per line: graph, params, bc, event, probability.
inline void write_oracle_jsonl(std::ostream& os, const ExactRcm& ex, const std::vector<OracleRecord>& records,
                               const std::string& run_id = "") {
  for (const auto& r : records) {
    nlohmann::json j;
    if (!run_id.empty()) j["run_id"] = run_id;
    j["graph"] = graph_json(ex.graph());
    j["graph"]["name"] = r.graph_name;
    j["params"] = {{"p", ex.params().p}, {"q", ex.params().q}};
    j["bc"] = bc_json(ex.graph(), ex.boundary_condition());
    j["event"] = r.event_name;
    j["probability"] = r.probability;
    os << j.dump() << '\n';
  }
}

}  // namespace ozlab
