#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ozlab/csv.hpp"
#include "ozlab/error.hpp"
#include "ozlab/geometry.hpp"
#include "ozlab/graph.hpp"
#include "ozlab/kmrp.hpp"
#include "ozlab/parallel.hpp"
#include "ozlab/percolation.hpp"
#include "ozlab/stats.hpp"

namespace ozlab {

// Slice-by-slice record of the cluster of the origin. X[t] is the largest and
// X_lo[t] the smallest across coordinate in the band of slice t; both are NaN
// once the explored cluster misses that band.
struct ExplorationTrace {
  double w_angle = 0.0;
  int L = 1;
  std::vector<double> X;
  std::vector<double> X_lo;
  std::vector<int> N;
  std::vector<int> S;       // pre-renewal times S_1 < S_2 < ... (S_0 = 0 is implicit)
  int death_time = -1;      // first dead slice, or -1 if alive through the last slice
  bool truncated = false;   // cluster touched the sampling box
  int conditioned_on = 0;   // n_slices used for conditioning (0 for none)
  std::vector<LatticePoint> cluster;  // kept for cone statistics and piece geometry

  bool alive(int t) const { return t >= 0 && t < static_cast<int>(X.size()) && !std::isnan(X[static_cast<std::size_t>(t)]); }
  // Number of slices covered by pieces: death time, or the last slice + 1 boundary.
  int end_time() const { return death_time >= 0 ? death_time : static_cast<int>(X.size()) - 1; }
};

inline std::vector<int> pre_renewals(const std::vector<int>& N) {
  std::vector<int> S;
  int last = 0;
  for (int t = 2; t < static_cast<int>(N.size()); ++t)
    if (t >= last + 2 && N[static_cast<std::size_t>(t)] == 1) S.push_back(last = t);
  return S;
}

namespace detail {

// Smallest slice t with <y, w> < t L + 1.
inline int first_slice(double along, int L) { return static_cast<int>(std::floor((along - 1.0) / L)) + 1; }

}  // namespace detail

// Slice exploration of a cluster given by its vertices (seed first) and open
// edges. A vertex joins C_{<=t} once some open path from the seed stays in
// H_{<=t}; that time is a bottleneck distance, computed with a bucket queue.
// With t_max >= 0 the trace covers slices 0..t_max; otherwise it runs to death.
inline ExplorationTrace explore(const ClusterView& c, const Direction& w, int L, int t_max = -1) {
  if (L < 1) throw ContractError("slice length L must be at least 1");
  if (c.vertices.empty()) throw ContractError("empty cluster");
  const std::size_t V = c.vertices.size();
  std::vector<double> along(V), across(V);
  std::vector<int> slice(V);
  int top = 0;
  for (std::size_t i = 0; i < V; ++i) {
    along[i] = w.along(c.vertices[i]);
    across[i] = w.across(c.vertices[i]);
    slice[i] = std::max(0, detail::first_slice(along[i], L));
    top = std::max(top, slice[i]);
  }
  // adjacency in CSR form
  std::vector<std::uint32_t> start(V + 1, 0), nbr(2 * c.edges.size());
  for (auto [a, b] : c.edges) ++start[a + 1], ++start[b + 1];
  for (std::size_t i = 0; i < V; ++i) start[i + 1] += start[i];
  {
    std::vector<std::uint32_t> fill(start.begin(), start.end() - 1);
    for (auto [a, b] : c.edges) nbr[fill[a]++] = b, nbr[fill[b]++] = a;
  }
  constexpr int kUnset = std::numeric_limits<int>::max();
  std::vector<int> tau(V, kUnset);
  std::vector<std::vector<std::uint32_t>> bucket(static_cast<std::size_t>(top) + 1);
  tau[0] = slice[0];
  bucket[static_cast<std::size_t>(tau[0])].push_back(0);
  for (std::size_t b = 0; b < bucket.size(); ++b) {
    for (std::size_t k = 0; k < bucket[b].size(); ++k) {
      const std::uint32_t x = bucket[b][k];
      if (tau[x] != static_cast<int>(b)) continue;
      for (std::uint32_t j = start[x]; j < start[x + 1]; ++j) {
        const std::uint32_t y = nbr[j];
        const int cand = std::max(static_cast<int>(b), slice[y]);
        if (cand < tau[y]) {
          tau[y] = cand;
          bucket[static_cast<std::size_t>(cand)].push_back(y);
        }
      }
    }
  }
  // band contributions: (band, segment, across)
  const int horizon = t_max >= 0 ? t_max : top + 1;
  ExplorationTrace tr;
  tr.w_angle = w.angle();
  tr.L = L;
  tr.truncated = c.truncated;
  tr.X.assign(static_cast<std::size_t>(horizon) + 1, std::numeric_limits<double>::quiet_NaN());
  tr.X_lo = tr.X;
  tr.N.assign(static_cast<std::size_t>(horizon) + 1, 0);
  std::vector<std::pair<int, int>> seg;
  for (std::size_t i = 0; i < V; ++i) {
    const int b = band_index(w, L, c.vertices[i]);
    if (b < 0 || b > horizon || tau[i] > b) continue;
    auto& x = tr.X[static_cast<std::size_t>(b)];
    if (std::isnan(x) || across[i] > x) x = across[i];
    auto& lo = tr.X_lo[static_cast<std::size_t>(b)];
    if (std::isnan(lo) || across[i] < lo) lo = across[i];
    seg.emplace_back(b, static_cast<int>(std::floor(across[i] / L)));
  }
  std::sort(seg.begin(), seg.end());
  seg.erase(std::unique(seg.begin(), seg.end()), seg.end());
  for (auto [b, k] : seg) ++tr.N[static_cast<std::size_t>(b)];
  for (int t = 1; t <= horizon; ++t)
    if (std::isnan(tr.X[static_cast<std::size_t>(t)])) {
      tr.death_time = t;
      break;
    }
  if (t_max < 0 && tr.death_time >= 0) {
    tr.X.resize(static_cast<std::size_t>(tr.death_time) + 1);
    tr.X_lo.resize(static_cast<std::size_t>(tr.death_time) + 1);
    tr.N.resize(static_cast<std::size_t>(tr.death_time) + 1);
  }
  tr.S = pre_renewals(tr.N);
  if (tr.death_time >= 0) std::erase_if(tr.S, [&](int s) { return s >= tr.death_time; });
  return tr;
}

// Cluster of the origin in a configuration on a box graph.
inline ClusterView origin_cluster(const FiniteGraph& g, const BondConfig& w, LatticePoint origin = {0, 0}) {
  const auto o = g.index_of(origin);
  if (o < 0) throw ContractError("origin is not a vertex of the graph");
  ClusterView c;
  std::vector<std::int64_t> pos(g.num_vertices(), -1);
  std::vector<std::uint32_t> order{static_cast<std::uint32_t>(o)};
  pos[static_cast<std::size_t>(o)] = 0;
  for (std::size_t h = 0; h < order.size(); ++h) {
    const auto x = order[h];
    for (auto e : g.incident(x)) {
      if (!w[e]) continue;
      const auto& ge = g.edges()[e];
      const auto y = ge.u == x ? ge.v : ge.u;
      if (pos[y] < 0) pos[y] = static_cast<std::int64_t>(order.size()), order.push_back(y);
      if (x < y || ge.u == ge.v) c.edges.emplace_back(static_cast<std::uint32_t>(pos[x]), static_cast<std::uint32_t>(pos[y]));
    }
  }
  for (auto v : order) {
    c.vertices.push_back(g.vertices()[v] - origin);
    if (g.incident(v).size() < 4) c.truncated = true;
  }
  return c;
}

inline ExplorationTrace explore(const FiniteGraph& g, const BondConfig& w, const Direction& dir, int L, int t_max = -1) {
  return explore(origin_cluster(g, w), dir, L, t_max);
}

struct EnsembleSpec {
  double p = 0.35;          // q = 1 bond density
  int L = 1;
  int n_slices = 0;         // 0 gives the unconditioned ensemble
  std::size_t count = 1000; // accepted traces wanted
  std::size_t budget = 100000000;
  std::size_t block = 1 << 16;
  int radius = 0;           // sampling box radius; 0 picks a default from n_slices and L
  int t_max = -1;           // trace horizon; -1 follows each cluster to death
  bool keep_cluster = false;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct Ensemble {
  std::vector<ExplorationTrace> traces;
  std::size_t attempts = 0;
  Estimate acceptance;
};

// Clusters of the origin for q = 1, kept when X_{n_slices} is alive. That event
// is the same as the cluster reaching <x, w> >= n_slices L, which is what the
// rejection step tests before running the exploration.
inline Ensemble conditioned_ensemble(const Direction& w, const EnsembleSpec& spec) {
  if (spec.L < 1 || spec.n_slices < 0 || spec.block == 0) throw ContractError("invalid ensemble spec");
  const int radius = spec.radius > 0 ? spec.radius : 4 * (spec.n_slices * spec.L + 10);
  const double reach = static_cast<double>(spec.n_slices) * spec.L;
  struct Block {
    std::vector<std::pair<std::size_t, ExplorationTrace>> hits;
    std::size_t done = 0;
  };
  Ensemble out;
  const std::size_t blocks = (spec.budget + spec.block - 1) / spec.block;
  // one grower per worker slot; blocks in a wave run on distinct slots
  std::vector<PercolationGrower> growers;
  for (unsigned i = 0; i < std::max(1u, spec.threads); ++i) growers.emplace_back(spec.p, radius);
  std::function<Block(std::size_t)> work = [&](std::size_t b) {
    Block res;
    auto& grower = growers[b % growers.size()];
    Rng rng(spec.seed, b);
    const std::size_t n = std::min(spec.block, spec.budget - b * spec.block);
    const std::size_t want = spec.count;
    for (std::size_t i = 0; i < n && res.hits.size() < want; ++i) {
      const auto& c = grower.grow(rng);
      res.done = i + 1;
      double top = -INFINITY;
      for (const auto& v : c.vertices) top = std::max(top, w.along(v));
      if (top < reach) continue;
      auto tr = explore(c, w, spec.L, spec.t_max < 0 ? -1 : std::max(spec.t_max, spec.n_slices));
      tr.conditioned_on = spec.n_slices;
      if (spec.keep_cluster) tr.cluster = c.vertices;
      res.hits.emplace_back(i, std::move(tr));
    }
    return res;
  };
  std::size_t accepted = 0;
  std::function<bool(std::size_t, Block&)> merge = [&](std::size_t b, Block& res) {
    for (auto& [i, tr] : res.hits) {
      out.traces.push_back(std::move(tr));
      if (++accepted == spec.count) {
        out.attempts = b * spec.block + i + 1;
        return false;
      }
    }
    out.attempts = b * spec.block + res.done;
    return true;
  };
  run_blocks<Block>(blocks, spec.threads, work, merge);
  out.acceptance = binomial_estimate(out.traces.size(), out.attempts);
  if (out.traces.size() < spec.count)
    throw BudgetExhaustedError("accepted " + std::to_string(out.traces.size()) + " of " + std::to_string(spec.count) +
                               " traces within the sample budget");
  return out;
}

struct Piece {
  int start = 0, end = 0;   // slices S_{k-1} and S_k
  int length = 0;
  double displacement = 0.0;
  std::size_t edges = 0;    // open cluster edges with both ends in the piece region
  Box bbox{};
  bool terminal = false;
  bool killed = false;      // terminal piece that ends in death
};

// Pieces between consecutive pre-renewals, with the terminal piece last.
// Lengths add up to the end time of the trace.
inline std::vector<Piece> piece_decomposition(const ExplorationTrace& tr, const ClusterView* cluster = nullptr) {
  std::vector<int> cuts{0};
  cuts.insert(cuts.end(), tr.S.begin(), tr.S.end());
  const int end = tr.end_time();
  auto last_alive = [&](int t) {
    while (t > 0 && !tr.alive(t)) --t;
    return tr.X[static_cast<std::size_t>(t)];
  };
  std::vector<Piece> out;
  for (std::size_t k = 0; k < cuts.size(); ++k) {
    Piece p;
    p.start = cuts[k];
    p.terminal = k + 1 == cuts.size();
    p.end = p.terminal ? end : cuts[k + 1];
    p.length = p.end - p.start;
    p.killed = p.terminal && tr.death_time >= 0;
    p.displacement = last_alive(p.end) - tr.X[static_cast<std::size_t>(p.start)];
    if (cluster) {
      const Direction w = Direction::from_angle(tr.w_angle);
      const double lo = static_cast<double>(p.start) * tr.L, hi = static_cast<double>(p.end) * tr.L + 1.0;
      std::vector<char> in(cluster->vertices.size(), 0);
      bool any = false;
      for (std::size_t i = 0; i < cluster->vertices.size(); ++i) {
        const auto v = cluster->vertices[i];
        const double a = w.along(v);
        if (a < lo || a >= hi) continue;
        in[i] = 1;
        if (!any) p.bbox = {v.x, v.x, v.y, v.y}, any = true;
        p.bbox.xmin = std::min(p.bbox.xmin, v.x), p.bbox.xmax = std::max(p.bbox.xmax, v.x);
        p.bbox.ymin = std::min(p.bbox.ymin, v.y), p.bbox.ymax = std::max(p.bbox.ymax, v.y);
      }
      for (auto [a, b] : cluster->edges) p.edges += in[a] && in[b];
    }
    out.push_back(p);
  }
  return out;
}

struct ConeStat {
  int k = 0;
  double exit_probability = 0.0;
  double stderr = 0.0;
  std::size_t count = 0;
};

// Fraction of traces whose cluster leaves the cone of aperture alpha with
// apex at -k L w.
inline std::vector<ConeStat> cone_stats(const std::vector<ExplorationTrace>& traces, double alpha,
                                        const std::vector<int>& ks) {
  if (!(alpha > 0.0)) throw ContractError("cone aperture must be positive");
  std::vector<std::size_t> exits(ks.size(), 0);
  std::size_t n = 0;
  for (const auto& tr : traces) {
    if (tr.cluster.empty()) throw ContractError("cone statistics need traces that keep their cluster");
    ++n;
    const Direction w = Direction::from_angle(tr.w_angle);
    // the cluster exits the cone at offset k iff k < kstar
    double kstar = -INFINITY;
    for (const auto& v : tr.cluster) kstar = std::max(kstar, (std::abs(w.across(v)) / alpha - w.along(v)) / tr.L);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const double k = ks[i];
      bool out = k < kstar - 1e-9;
      if (!out && k <= kstar + 1e-9) {
        // near the boundary, defer to the exact predicate
        const double apex = -k * tr.L;
        for (const auto& v : tr.cluster)
          if (!cone_contains({{apex * w.w().x, apex * w.w().y}, w, alpha}, v)) {
            out = true;
            break;
          }
      }
      exits[i] += out;
    }
  }
  std::vector<ConeStat> out;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const auto e = binomial_estimate(exits[i], n);
    out.push_back({ks[i], e.value, e.stderr, n});
  }
  return out;
}

struct ConeDecay {
  bool monotone = true;    // P(k+1) <= P(k) + z joint sigma for every k
  bool decays = false;     // P(k_last) < P(k_first) - z joint sigma
  double worst_rise = 0.0; // largest P(k+1) - P(k) in joint sigma
};

inline ConeDecay cone_decay(const std::vector<ConeStat>& cs, double z = 3.0) {
  ConeDecay d;
  if (cs.size() < 2) throw ContractError("cone decay needs at least two offsets");
  d.worst_rise = -INFINITY;
  for (std::size_t i = 1; i < cs.size(); ++i) {
    const double s = std::hypot(cs[i].stderr, cs[i - 1].stderr);
    const double rise = (cs[i].exit_probability - cs[i - 1].exit_probability) / std::max(s, 1e-300);
    d.worst_rise = std::max(d.worst_rise, rise);
    if (rise > z) d.monotone = false;
  }
  const auto &a = cs.front(), &b = cs.back();
  d.decays = a.exit_probability - b.exit_probability > z * std::hypot(a.stderr, b.stderr);
  return d;
}

struct GapTailTest {
  int r0 = 0;
  std::vector<int> r;                // gap lengths r0, r0 + 1, ...
  std::vector<double> events, risk;  // gaps ending at r, gaps still open at r
  std::vector<double> survival;      // product-limit P[gap > r | gap >= r0]
  double hazard = 0.0, hazard_err = 0.0;
  double rate = 0.0, rate_err = 0.0;  // -log(1 - hazard)
  ChiSquareResult homogeneity;        // constant hazard across the pooled r bins
  std::size_t gaps = 0, censored = 0;
};

// Tail of the spacing between consecutive pre-renewals S_k < S_{k+1}, k >= 1.
// An exponential tail is a constant discrete hazard beyond r0; the test pools
// the hazard and checks homogeneity with a Pearson statistic. Each trace is
// observed up to end_time() - margin so that the end conditioning, which
// forces thin slices near the last slice, stays out of the sample. Gaps that
// run past that horizon are right censored.
inline GapTailTest gap_tail_test(const std::vector<ExplorationTrace>& traces, int r0 = 4, int margin = 4,
                                 double min_expected = 5.0) {
  if (r0 < 1 || margin < 0) throw ContractError("gap tail test needs r0 >= 1 and margin >= 0");
  GapTailTest g;
  g.r0 = r0;
  auto at = [&](std::vector<double>& v, int r) -> double& {
    const auto i = static_cast<std::size_t>(r - r0);
    if (v.size() <= i) v.resize(i + 1, 0.0);
    return v[i];
  };
  for (const auto& tr : traces) {
    const int horizon = tr.end_time() - margin;
    for (std::size_t k = 0; k < tr.S.size(); ++k) {
      const int s = tr.S[k];
      if (s >= horizon) break;
      const bool ends = k + 1 < tr.S.size() && tr.S[k + 1] <= horizon;
      const int last = ends ? tr.S[k + 1] - s : horizon - s;
      if (last < r0) continue;
      for (int r = r0; r <= last; ++r) at(g.risk, r) += 1.0;
      if (ends) {
        at(g.events, last) += 1.0;
        ++g.gaps;
      } else {
        ++g.censored;
      }
    }
  }
  g.events.resize(g.risk.size(), 0.0);
  const double d = std::accumulate(g.events.begin(), g.events.end(), 0.0);
  const double n = std::accumulate(g.risk.begin(), g.risk.end(), 0.0);
  if (d < 2.0 * min_expected) throw InsufficientDataError("too few gaps beyond r0 for a tail test");
  g.hazard = d / n;
  g.hazard_err = std::sqrt(g.hazard * (1.0 - g.hazard) / n);
  g.rate = -std::log1p(-g.hazard);
  g.rate_err = g.hazard_err / (1.0 - g.hazard);
  double s = 1.0;
  for (std::size_t i = 0; i < g.risk.size(); ++i) {
    g.r.push_back(r0 + static_cast<int>(i));
    if (g.risk[i] > 0.0) s *= 1.0 - g.events[i] / g.risk[i];
    g.survival.push_back(s);
  }
  // pool consecutive r until the expected event count is large enough
  std::vector<std::pair<double, double>> bins;  // (events, risk)
  double be = 0.0, br = 0.0;
  for (std::size_t i = 0; i < g.risk.size(); ++i) {
    be += g.events[i];
    br += g.risk[i];
    if (br * g.hazard >= min_expected) {
      bins.emplace_back(be, br);
      be = br = 0.0;
    }
  }
  if (br > 0.0) {
    if (bins.empty()) bins.emplace_back(be, br);
    else bins.back().first += be, bins.back().second += br;
  }
  auto& h = g.homogeneity;
  h.bins = bins.size();
  for (auto [e, r] : bins) h.statistic += (e - r * g.hazard) * (e - r * g.hazard) / (r * g.hazard * (1.0 - g.hazard));
  h.dof = static_cast<double>(bins.size()) - 1.0;
  if (h.dof >= 1.0) {
    boost::math::chi_squared dist(h.dof);
    h.p_value = boost::math::cdf(boost::math::complement(dist, h.statistic));
  } else {
    h.dof = 0.0;
  }
  return g;
}

// Step law from the interior pieces (between two pre-renewals) of a set of
// traces. Displacements are rounded to the grid h Z. Conditioned traces give
// a law with kappa = 0 that stands in for the irreducible law; unconditioned
// traces give kappa = fraction of pieces started at a pre-renewal that die.
inline StepLaw empirical_step_law(const std::vector<ExplorationTrace>& traces, double h = 1.0,
                                  std::size_t min_pieces = 1000) {
  std::map<std::pair<int, long long>, double> interior, initial;
  std::size_t n_interior = 0, n_killed = 0, n_first = 0, n_traces = 0;
  bool conditioned = false;
  for (const auto& tr : traces) {
    ++n_traces;
    conditioned = conditioned || tr.conditioned_on > 0;
    const auto pieces = piece_decomposition(tr);
    for (std::size_t k = 0; k < pieces.size(); ++k) {
      const auto& p = pieces[k];
      const long long dx = std::llround(p.displacement / h);
      if (k == 0) {
        if (!p.terminal) {
          ++n_first;
          // absolute position at S_1 relative to the seed
          initial[{p.length, std::llround(tr.X[static_cast<std::size_t>(p.end)] / h)}] += 1;
        }
        continue;
      }
      if (!p.terminal) {
        ++n_interior;
        interior[{p.length, dx}] += 1;
      } else if (p.killed) {
        ++n_killed;
      }
    }
  }
  if (n_interior < min_pieces)
    throw InsufficientDataError("only " + std::to_string(n_interior) + " interior pieces");
  StepLaw law;
  law.kappa = conditioned ? 0.0 : static_cast<double>(n_killed) / static_cast<double>(n_interior + n_killed);
  for (auto& [key, c] : interior)
    law.interior.push_back({key.first, static_cast<double>(key.second) * h, (1.0 - law.kappa) * c / static_cast<double>(n_interior)});
  const double s1 = static_cast<double>(n_first) / static_cast<double>(n_traces);
  for (auto& [key, c] : initial)
    law.initial.push_back({key.first, static_cast<double>(key.second) * h, s1 * c / static_cast<double>(n_first)});
  // absorb summation rounding so the masses are exact to the last bit
  double s = law.interior_mass();
  law.interior.back().prob += (1.0 - law.kappa) - s;
  return law;
}

inline nlohmann::json trace_json(const ExplorationTrace& tr, const std::string& run_id = "") {
  nlohmann::json X = nlohmann::json::array();
  for (double x : tr.X) X.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  nlohmann::json j;
  if (!run_id.empty()) j["run_id"] = run_id;
  j["w"] = {std::cos(tr.w_angle), std::sin(tr.w_angle)};
  j["L"] = tr.L;
  j["X"] = X;
  j["N"] = tr.N;
  j["S"] = tr.S;
  j["death_time"] = tr.death_time >= 0 ? nlohmann::json(tr.death_time) : nlohmann::json(nullptr);
  j["truncated"] = tr.truncated;
  return j;
}

inline void write_traces_jsonl(std::ostream& os, const std::vector<ExplorationTrace>& traces, const std::string& run_id) {
  for (const auto& tr : traces) os << trace_json(tr, run_id).dump() << '\n';
}

inline void write_gaps_csv(std::ostream& os, const GapTailTest& g, const std::string& run_id) {
  CsvWriter w(os, run_id);
  w.header({"r", "events", "risk", "hazard", "survival", "pooled_hazard", "rate", "rate_err", "p_value"});
  for (std::size_t i = 0; i < g.r.size(); ++i)
    w.row(g.r[i], g.events[i], g.risk[i], g.risk[i] > 0.0 ? g.events[i] / g.risk[i] : 0.0, g.survival[i], g.hazard, g.rate,
          g.rate_err, g.homogeneity.p_value);
}

inline void write_cone_csv(std::ostream& os, const std::vector<ConeStat>& cs, double alpha, const std::string& run_id) {
  CsvWriter w(os, run_id);
  w.header({"alpha", "k", "exit_probability", "stderr", "count"});
  for (const auto& c : cs) w.row(alpha, c.k, c.exit_probability, c.stderr, c.count);
}

}  // namespace ozlab
