#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ozlab/error.hpp"
#include "ozlab/graph.hpp"
#include "ozlab/rng.hpp"
#include "ozlab/stats.hpp"

namespace ozlab {

enum class Algorithm { automatic, bernoulli, heat_bath, cluster_move };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::bernoulli: return "bernoulli";
    case Algorithm::heat_bath: return "heat_bath";
    case Algorithm::cluster_move: return "cluster_move";
    default: return "auto";
  }
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "bernoulli") return Algorithm::bernoulli;
  if (s == "heat_bath" || s == "heat-bath") return Algorithm::heat_bath;
  if (s == "cluster_move" || s == "cluster-move" || s == "chayes_machta") return Algorithm::cluster_move;
  if (s == "auto" || s.empty()) return Algorithm::automatic;
  throw ContractError("unknown sampler algorithm '" + s + "'");
}

struct SamplerSpec {
  Algorithm algorithm = Algorithm::automatic;
  std::size_t burn_in = 1000;  // sweeps
  std::size_t thinning = 1;    // sweeps between recorded samples
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

struct ChainDiagnostics {
  std::size_t samples = 0;
  std::size_t sweeps = 0;
  double flip_rate = 0.0;     // fraction of edge updates that changed the edge
  double tau_int = 0.5;       // integrated autocorrelation time of the open-edge density, in recorded samples
  double tau_int_sweeps = 0.5;
  bool burn_in_ok = true;     // burn-in >= 20 tau_int (in sweeps)
  std::vector<std::string> warnings;
};

inline BondConfig sample_bernoulli(const FiniteGraph& g, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("p must lie in [0, 1]");
  BondConfig c(g.num_edges());
  const auto t = Rng::threshold(p);
  for (std::size_t e = 0; e < g.num_edges(); ++e) c.set(e, rng.bernoulli_threshold(t));
  return c;
}

inline BondConfig sample_bernoulli(const FiniteGraph& g, double p, std::uint64_t seed) {
  Rng rng(seed);
  return sample_bernoulli(g, p, rng);
}

// Markov chain for the random-cluster measure with an arbitrary boundary
// partition. Heat-bath sweeps visit edges in index order. Cluster moves
// activate each cluster (boundary blocks count as one cluster) with
// probability 1/q and resample the edges inside the active set.
class RcmChain {
 public:
  RcmChain(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& bc, const SamplerSpec& spec)
      : g_(g), m_(m), bc_(bc), spec_(spec), rng_(spec.seed, spec.stream), state_(g.num_edges()) {
    m_.validate();
    if (spec_.algorithm == Algorithm::automatic)
      spec_.algorithm = m.q == 1.0 ? Algorithm::bernoulli : Algorithm::cluster_move;
    if (spec_.algorithm == Algorithm::bernoulli && m.q != 1.0)
      throw ContractError("independent Bernoulli sampling is exact only for q = 1");
    if (spec_.thinning == 0) throw ContractError("thinning must be at least 1");
    const std::size_t V = g.num_vertices();
    block_of_.assign(V, -1);
    for (std::size_t b = 0; b < bc.blocks().size(); ++b)
      if (bc.blocks()[b].size() > 1)
        for (auto v : bc.blocks()[b]) block_of_[v] = static_cast<int>(b);
    small_ = V <= 64;
    if (small_) {
      static_adj_.assign(V, 0);
      for (const auto& b : bc.blocks())
        for (auto v : b)
          for (auto u : b)
            if (u != v) static_adj_[v] |= std::uint64_t{1} << u;
      adj_ = static_adj_;
    } else {
      vis_a_.assign(V, 0);
      vis_b_.assign(V, 0);
      blk_a_.assign(bc.blocks().size(), 0);
      blk_b_.assign(bc.blocks().size(), 0);
    }
    open_thr_ = Rng::threshold(m.p);
    closed_thr_ = Rng::threshold(m.p / (m.p + m.q * (1.0 - m.p)));
    active_thr_ = Rng::threshold(1.0 / m.q);
  }

  const BondConfig& state() const { return state_; }
  const FiniteGraph& graph() const { return g_; }
  Algorithm algorithm() const { return spec_.algorithm; }

  void set_state(const BondConfig& c) {
    if (c.size() != g_.num_edges()) throw ContractError("configuration size mismatch");
    state_ = c;
    if (small_) {
      adj_ = static_adj_;
      for (std::size_t e = 0; e < g_.num_edges(); ++e)
        if (state_[e]) link(e, true);
    }
  }

  void sweep() {
    switch (spec_.algorithm) {
      case Algorithm::bernoulli: bernoulli_sweep(); break;
      case Algorithm::heat_bath: heat_bath_sweep(); break;
      default: cluster_move(); break;
    }
    ++sweeps_;
  }

  // Next recorded sample. The first call performs the burn-in.
  const BondConfig& next() {
    if (!burned_) {
      for (std::size_t i = 0; i < spec_.burn_in; ++i) sweep();
      burned_ = true;
      updates_ = flips_ = 0;
    }
    for (std::size_t i = 0; i < spec_.thinning; ++i) sweep();
    if (density_.size() < kMaxSeries) density_.push_back(static_cast<double>(state_.count_open()));
    return state_;
  }

  ChainDiagnostics diagnostics() const {
    ChainDiagnostics d;
    d.samples = density_.size();
    d.sweeps = sweeps_;
    d.flip_rate = updates_ ? static_cast<double>(flips_) / static_cast<double>(updates_) : 0.0;
    d.tau_int = integrated_autocorrelation_time(density_);
    d.tau_int_sweeps = d.tau_int * static_cast<double>(spec_.thinning);
    d.burn_in_ok = static_cast<double>(spec_.burn_in) >= 20.0 * d.tau_int_sweeps;
    if (!d.burn_in_ok)
      d.warnings.push_back("burn-in of " + std::to_string(spec_.burn_in) + " sweeps is below 20 autocorrelation times (" +
                           std::to_string(d.tau_int_sweeps) + " sweeps each)");
    return d;
  }

  void heat_bath_sweep() {
    for (std::size_t e = 0; e < g_.num_edges(); ++e) {
      const bool conn = connected_without(e);
      const bool open = rng_.bernoulli_threshold(conn ? open_thr_ : closed_thr_);
      record(e, open);
    }
  }

  void bernoulli_sweep() {
    for (std::size_t e = 0; e < g_.num_edges(); ++e) record(e, rng_.bernoulli_threshold(open_thr_));
  }

  void cluster_move() {
    const std::size_t V = g_.num_vertices();
    DisjointSets& ds = ds_;
    ds.reset(V);
    bc_.wire(ds);
    for (std::size_t e = 0; e < g_.num_edges(); ++e)
      if (state_[e]) ds.unite(g_.edges()[e].u, g_.edges()[e].v);
    active_.assign(V, 0);
    // one activation draw per cluster, in order of the smallest vertex
    root_state_.assign(V, 0);
    for (std::uint32_t v = 0; v < V; ++v) {
      const auto r = ds.find(v);
      if (root_state_[r] == 0) root_state_[r] = rng_.bernoulli_threshold(active_thr_) ? 1 : 2;
      active_[v] = root_state_[r] == 1;
    }
    for (std::size_t e = 0; e < g_.num_edges(); ++e) {
      const auto& ge = g_.edges()[e];
      if (active_[ge.u] && active_[ge.v]) record(e, rng_.bernoulli_threshold(open_thr_));
    }
  }

  // True when the endpoints of e are joined by open edges other than e,
  // counting boundary wiring.
  bool connected_without(std::size_t e) {
    const auto& ge = g_.edges()[e];
    if (small_) return small_connected(ge.u, ge.v, state_[e]);
    return bfs_connected(e);
  }

 private:
  void link(std::size_t e, bool open) {
    const auto& ge = g_.edges()[e];
    if (open) {
      adj_[ge.u] |= std::uint64_t{1} << ge.v;
      adj_[ge.v] |= std::uint64_t{1} << ge.u;
    } else {
      // wiring between the endpoints survives closing the edge
      adj_[ge.u] = (adj_[ge.u] & ~(std::uint64_t{1} << ge.v)) | (static_adj_[ge.u] & (std::uint64_t{1} << ge.v));
      adj_[ge.v] = (adj_[ge.v] & ~(std::uint64_t{1} << ge.u)) | (static_adj_[ge.v] & (std::uint64_t{1} << ge.u));
    }
  }

  void record(std::size_t e, bool open) {
    ++updates_;
    if (state_[e] == open) return;
    ++flips_;
    state_.set(e, open);
    if (small_) link(e, open);
  }

  bool small_connected(std::uint32_t u, std::uint32_t v, bool edge_open) {
    const std::uint64_t bu = std::uint64_t{1} << u, bv = std::uint64_t{1} << v;
    const std::uint64_t au = adj_[u], av = adj_[v];
    if (edge_open) {
      adj_[u] = (au & ~bv) | (static_adj_[u] & bv);
      adj_[v] = (av & ~bu) | (static_adj_[v] & bu);
    }
    std::uint64_t reach = bu, frontier = bu;
    bool hit = false;
    while (frontier) {
      const int x = __builtin_ctzll(frontier);
      frontier &= frontier - 1;
      const std::uint64_t nb = adj_[x] & ~reach;
      if (nb & bv) {
        hit = true;
        break;
      }
      reach |= nb;
      frontier |= nb;
    }
    adj_[u] = au;
    adj_[v] = av;
    return hit;
  }

  // Interleaved search from both endpoints; stops as soon as one side is exhausted.
  bool bfs_connected(std::size_t e) {
    const auto& ge = g_.edges()[e];
    ++epoch_;
    qa_.clear();
    qb_.clear();
    std::size_t ha = 0, hb = 0;
    auto push = [&](std::vector<std::uint32_t>& q, std::vector<std::uint32_t>& vis, std::vector<std::uint32_t>& blk,
                    std::uint32_t x) {
      if (vis[x] == epoch_) return;
      vis[x] = epoch_;
      q.push_back(x);
      const int b = block_of_[x];
      if (b >= 0 && blk[b] != epoch_) {
        blk[b] = epoch_;
        for (auto y : bc_.blocks()[b])
          if (vis[y] != epoch_) vis[y] = epoch_, q.push_back(y);
      }
    };
    push(qa_, vis_a_, blk_a_, ge.u);
    push(qb_, vis_b_, blk_b_, ge.v);
    if (vis_a_[ge.v] == epoch_) return true;  // same wired block
    auto step = [&](std::vector<std::uint32_t>& q, std::size_t& head, std::vector<std::uint32_t>& vis,
                    std::vector<std::uint32_t>& blk, const std::vector<std::uint32_t>& other) -> int {
      if (head == q.size()) return -1;
      const std::uint32_t x = q[head++];
      for (auto f : g_.incident(x)) {
        if (f == e || !state_[f]) continue;
        const auto& ef = g_.edges()[f];
        const std::uint32_t y = ef.u == x ? ef.v : ef.u;
        if (other[y] == epoch_) return 1;
        const std::size_t before = q.size();
        push(q, vis, blk, y);
        for (std::size_t i = before; i < q.size(); ++i)
          if (other[q[i]] == epoch_) return 1;
      }
      return 0;
    };
    while (true) {
      const int a = step(qa_, ha, vis_a_, blk_a_, vis_b_);
      if (a != 0) return a > 0;
      const int b = step(qb_, hb, vis_b_, blk_b_, vis_a_);
      if (b != 0) return b > 0;
    }
  }

  static constexpr std::size_t kMaxSeries = std::size_t{1} << 22;

  FiniteGraph g_;
  ModelParams m_;
  BoundaryCondition bc_;
  SamplerSpec spec_;
  Rng rng_;
  BondConfig state_;
  std::vector<int> block_of_;
  bool small_ = false;
  std::vector<std::uint64_t> static_adj_, adj_;
  std::vector<std::uint32_t> vis_a_, vis_b_, blk_a_, blk_b_, qa_, qb_;
  std::uint32_t epoch_ = 0;
  std::vector<char> active_, root_state_;
  DisjointSets ds_;
  std::uint64_t open_thr_ = 0, closed_thr_ = 0, active_thr_ = 0;
  bool burned_ = false;
  std::size_t sweeps_ = 0, updates_ = 0, flips_ = 0;
  std::vector<double> density_;
};

// Thinning that pushes the lag correlation of recorded samples below
// `target`. A pilot run measures the integrated autocorrelation time of every
// edge indicator (up to 64 edges) and of the open-edge count; the slowest one
// is read as a single geometric mode with rate (2 tau - 1) / (2 tau + 1).
inline std::size_t calibrate_thinning(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& bc,
                                      SamplerSpec spec, std::size_t pilot = 50000, double target = 0.003,
                                      double safety = 1.25) {
  spec.thinning = 1;
  spec.stream ^= 0x5eedu;
  RcmChain chain(g, m, bc, spec);
  const std::size_t E = g.num_edges();
  const std::size_t stride = std::max<std::size_t>(1, E / 64);
  std::vector<std::vector<double>> series;
  for (std::size_t e = 0; e < E; e += stride) series.emplace_back();
  series.emplace_back();
  for (auto& s : series) s.reserve(pilot);
  for (std::size_t i = 0; i < pilot; ++i) {
    const auto& c = chain.next();
    std::size_t k = 0;
    for (std::size_t e = 0; e < E; e += stride) series[k++].push_back(c[e]);
    series[k].push_back(static_cast<double>(c.count_open()));
  }
  double tau = 0.5;
  for (const auto& s : series) tau = std::max(tau, integrated_autocorrelation_time(s));
  tau = 0.5 + safety * (tau - 0.5);
  const double lambda = (2.0 * tau - 1.0) / (2.0 * tau + 1.0);
  if (lambda <= target) return 1;
  return static_cast<std::size_t>(std::ceil(std::log(target) / std::log(lambda)));
}

// Runs a chain and hands every recorded sample to `sink(config, index)`.
template <class Sink>
ChainDiagnostics sample_chain(const FiniteGraph& g, const ModelParams& m, const BoundaryCondition& bc,
                              const SamplerSpec& spec, std::size_t n_samples, Sink&& sink) {
  RcmChain chain(g, m, bc, spec);
  for (std::size_t i = 0; i < n_samples; ++i) sink(chain.next(), i);
  return chain.diagnostics();
}

}  // namespace ozlab
