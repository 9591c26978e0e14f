#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ozlab/csv.hpp"
#include "ozlab/exact.hpp"
#include "ozlab/observables.hpp"
#include "ozlab/parallel.hpp"
#include "ozlab/sampler.hpp"
#include "ozlab/stats.hpp"

namespace ozlab {

struct OracleCase {
  std::string graph;  // "square2" (4 edges) or "box3" (12 edges)
  ModelParams model;
  BcKind bc = BcKind::free;
  Algorithm algorithm = Algorithm::heat_bath;
};

struct OracleResult {
  OracleCase c;
  std::size_t thinning = 1;
  std::size_t samples = 0;
  ChiSquareResult chi2;
};

inline FiniteGraph oracle_graph(const std::string& name) {
  if (name == "square2") return FiniteGraph::box({0, 1, 0, 1});
  if (name == "box3") return FiniteGraph::box({0, 2, 0, 2});
  throw ContractError("unknown oracle graph '" + name + "'");
}

// Full grid: both graphs, q in {1, 1.5, 2, 3}, p in {0.3, 0.5, 0.7}, free and
// wired, heat bath and cluster move.
inline std::vector<OracleCase> oracle_cases() {
  std::vector<OracleCase> out;
  for (const char* g : {"square2", "box3"})
    for (double q : {1.0, 1.5, 2.0, 3.0})
      for (double p : {0.3, 0.5, 0.7})
        for (BcKind bc : {BcKind::free, BcKind::wired})
          for (Algorithm a : {Algorithm::heat_bath, Algorithm::cluster_move}) out.push_back({g, {p, q}, bc, a});
  return out;
}

// Pearson test of the configuration histogram of a thinned chain against
// exact enumeration. Thinning is calibrated from a pilot run.
inline OracleResult run_oracle_case(const OracleCase& c, std::size_t samples, std::uint64_t seed, std::uint64_t stream) {
  const auto g = oracle_graph(c.graph);
  const auto bc = make_bc(g, c.bc);
  const ExactRcm ex(g, c.model, bc);
  SamplerSpec spec{c.algorithm, 200, 1, seed, stream};
  spec.thinning = calibrate_thinning(g, c.model, bc, spec);
  std::vector<double> counts(ex.num_configs(), 0.0);
  sample_chain(g, c.model, bc, spec, samples, [&](const BondConfig& w, std::size_t) { counts[w.to_mask()] += 1.0; });
  return {c, spec.thinning, samples, chi_square_test(counts, ex.distribution())};
}

inline std::vector<OracleResult> oracle_suite(std::size_t samples, std::uint64_t seed, unsigned threads = 1) {
  const auto cases = oracle_cases();
  std::vector<OracleResult> out(cases.size());
  run_blocks<OracleResult>(
      cases.size(), threads, [&](std::size_t i) { return run_oracle_case(cases[i], samples, seed, i); },
      [&](std::size_t i, OracleResult& r) {
        out[i] = std::move(r);
        return true;
      });
  return out;
}

// ---------------------------------------------------------------- exact properties

struct ExactSuiteReport {
  std::size_t fkg_pairs = 0, mon_checks = 0, dmp_checks = 0;
  double fkg_worst = INFINITY;  // min over pairs of phi[A and B] - phi[A] phi[B]
  double mon_worst = INFINITY;  // min over events of phi^coarser[A] - phi^finer[A]
  double dmp_worst = 0.0;       // max conditional-law discrepancy
};

namespace detail {

// Increasing events on at most two edges: {e}, {e and f}, {e or f}.
inline std::vector<std::vector<char>> small_increasing_events(std::size_t E) {
  const std::size_t n = std::size_t{1} << E;
  std::vector<std::vector<char>> out;
  auto make = [&](auto pred) {
    std::vector<char> v(n);
    for (std::uint64_t m = 0; m < n; ++m) v[m] = pred(m) ? 1 : 0;
    out.push_back(std::move(v));
  };
  for (std::size_t e = 0; e < E; ++e) {
    make([e](std::uint64_t m) { return (m >> e) & 1u; });
    for (std::size_t f = e + 1; f < E; ++f) {
      make([e, f](std::uint64_t m) { return ((m >> e) & 1u) && ((m >> f) & 1u); });
      make([e, f](std::uint64_t m) { return ((m >> e) & 1u) || ((m >> f) & 1u); });
    }
  }
  return out;
}

// free, boundary split into pairs, into two halves, wired: each coarser than the last
inline std::vector<BoundaryCondition> refinement_chain(const FiniteGraph& g) {
  const auto& b = g.boundary();
  std::vector<std::vector<std::uint32_t>> pairs, halves(2);
  for (std::size_t i = 0; i + 1 < b.size(); i += 2) pairs.push_back({b[i], b[i + 1]});
  // halves are unions of whole pairs so that each partition refines the next
  const std::size_t n_pairs = (b.size() + 1) / 2;
  for (std::size_t i = 0; i < b.size(); ++i) halves[i / 2 < (n_pairs + 1) / 2 ? 0 : 1].push_back(b[i]);
  std::vector<BoundaryCondition> chain{BoundaryCondition::free(g), BoundaryCondition::from_blocks(g, pairs),
                                       BoundaryCondition::from_blocks(g, halves), BoundaryCondition::wired(g)};
  for (std::size_t c = 1; c < chain.size(); ++c)
    if (!chain[c].coarser_than(chain[c - 1], g.num_vertices())) throw ContractError("boundary chain is not monotone");
  return chain;
}

}  // namespace detail

// FKG for every pair of small increasing events, monotonicity along a chain
// of coarser boundary partitions, and the domain Markov property for every
// outside configuration of the given inner edge sets.
inline ExactSuiteReport exact_property_suite(const std::vector<FiniteGraph>& graphs, const std::vector<double>& qs,
                                             const std::vector<double>& ps,
                                             const std::vector<std::vector<std::vector<std::size_t>>>& inner_sets) {
  ExactSuiteReport rep;
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const auto& g = graphs[gi];
    const auto events = detail::small_increasing_events(g.num_edges());
    const auto chain = detail::refinement_chain(g);
    for (double q : qs)
      for (double p : ps) {
        const ModelParams m{p, q};
        std::vector<std::vector<double>> probs;  // per chain element, per event
        for (std::size_t c = 0; c < chain.size(); ++c) {
          const ExactRcm ex(g, m, chain[c]);
          const auto dist = ex.distribution();
          std::vector<double> pa(events.size(), 0.0);
          for (std::size_t i = 0; i < events.size(); ++i)
            for (std::size_t k = 0; k < dist.size(); ++k)
              if (events[i][k]) pa[i] += dist[k];
          for (std::size_t i = 0; i < events.size(); ++i)
            for (std::size_t j = i; j < events.size(); ++j) {
              double joint = 0.0;
              for (std::size_t k = 0; k < dist.size(); ++k)
                if (events[i][k] && events[j][k]) joint += dist[k];
              rep.fkg_worst = std::min(rep.fkg_worst, joint - pa[i] * pa[j]);
              ++rep.fkg_pairs;
            }
          probs.push_back(std::move(pa));
        }
        for (std::size_t c = 1; c < chain.size(); ++c)
          for (std::size_t i = 0; i < events.size(); ++i) {
            rep.mon_worst = std::min(rep.mon_worst, probs[c][i] - probs[c - 1][i]);
            ++rep.mon_checks;
          }
        if (gi < inner_sets.size())
          for (const auto& inner : inner_sets[gi]) {
            std::vector<std::size_t> outer;
            for (std::size_t e = 0; e < g.num_edges(); ++e)
              if (std::find(inner.begin(), inner.end(), e) == inner.end()) outer.push_back(e);
            for (std::uint64_t s = 0; s < (std::uint64_t{1} << outer.size()); ++s) {
              std::uint64_t fixed = 0;
              for (std::size_t j = 0; j < outer.size(); ++j)
                if ((s >> j) & 1u) fixed |= std::uint64_t{1} << outer[j];
              for (const auto& bc : {chain.front(), chain.back()}) {
                rep.dmp_worst = std::max(rep.dmp_worst, dmp_check(g, m, bc, inner, fixed));
                ++rep.dmp_checks;
              }
            }
          }
      }
  }
  return rep;
}

inline void write_oracle_csv(std::ostream& os, const std::vector<OracleResult>& rs, const std::string& run_id) {
  CsvWriter w(os, run_id);
  w.header({"graph", "q", "p", "bc", "algorithm", "thinning", "samples", "chi2", "dof", "p_value"});
  for (const auto& r : rs)
    w.row(r.c.graph, r.c.model.q, r.c.model.p, r.c.bc == BcKind::free ? "free" : "wired", to_string(r.c.algorithm),
          r.thinning, r.samples, r.chi2.statistic, r.chi2.dof, r.chi2.p_value);
}

}  // namespace ozlab
