#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <queue>
#include <set>
#include <sstream>

#include "ozlab/exact.hpp"
#include "ozlab/explorer.hpp"
#include "ozlab/sampler.hpp"

using namespace ozlab;

namespace {

ClusterView path_along_x(int length) {
  ClusterView c;
  for (int x = 0; x <= length; ++x) c.vertices.push_back({x, 0});
  for (int x = 0; x < length; ++x) c.edges.emplace_back(x, x + 1);
  return c;
}

// Independent oracle: for each t, breadth-first search from the seed through
// vertices with <x, w> < tL + 1, then scan the band of slice t.
void brute_trace(const ClusterView& c, const Direction& w, int L, int horizon, std::vector<double>& X,
                 std::vector<int>& N) {
  const std::size_t V = c.vertices.size();
  std::vector<std::vector<std::size_t>> adj(V);
  for (auto [a, b] : c.edges) adj[a].push_back(b), adj[b].push_back(a);
  X.assign(static_cast<std::size_t>(horizon) + 1, std::nan(""));
  N.assign(static_cast<std::size_t>(horizon) + 1, 0);
  for (int t = 0; t <= horizon; ++t) {
    const double cap = static_cast<double>(t) * L + 1.0;
    std::vector<char> seen(V, 0);
    std::queue<std::size_t> bfs;
    seen[0] = 1;
    bfs.push(0);
    std::set<int> segs;
    while (!bfs.empty()) {
      const auto x = bfs.front();
      bfs.pop();
      const auto v = c.vertices[x];
      if (in_band({w, L, t}, v)) {
        auto& m = X[static_cast<std::size_t>(t)];
        if (std::isnan(m) || w.across(v) > m) m = w.across(v);
        segs.insert(segment_of(v, {w, L, t}));
      }
      for (auto y : adj[x])
        if (!seen[y] && w.along(c.vertices[y]) < cap) seen[y] = 1, bfs.push(y);
    }
    N[static_cast<std::size_t>(t)] = static_cast<int>(segs.size());
  }
}

}  // namespace

TEST(Explorer, AllClosed) {
  ClusterView c;
  c.vertices = {{0, 0}};
  const auto tr = explore(c, Direction(1, 0), 3);
  ASSERT_EQ(tr.X.size(), 2u);
  EXPECT_EQ(tr.X[0], 0.0);
  EXPECT_TRUE(std::isnan(tr.X[1]));
  EXPECT_EQ(tr.N[1], 0);
  EXPECT_EQ(tr.death_time, 1);
  EXPECT_TRUE(tr.S.empty());
}

TEST(Explorer, StraightPathOfThreeSlabs) {
  const auto tr = explore(path_along_x(12), Direction(1, 0), 4);
  for (int t = 1; t <= 3; ++t) {
    EXPECT_EQ(tr.X[static_cast<std::size_t>(t)], 0.0);
    EXPECT_EQ(tr.N[static_cast<std::size_t>(t)], 1);
  }
  EXPECT_EQ(tr.S, std::vector<int>{2});
  EXPECT_EQ(tr.death_time, 4);
}

TEST(Explorer, SpacingRule) {
  EXPECT_EQ(pre_renewals({1, 1, 1, 1, 1, 1}), (std::vector<int>{2, 4}));
  EXPECT_EQ(pre_renewals({1, 2, 1, 1, 2, 1, 1}), (std::vector<int>{2, 5}));
  EXPECT_EQ(pre_renewals({1, 1}), std::vector<int>{});
}

TEST(Explorer, PathLeavingThroughTheBackIsNotExplored) {
  // the only route to (4,1) passes through x = 6, beyond slice 1 for L = 4
  ClusterView c;
  c.vertices = {{0, 0}, {1, 0}, {2, 0}, {3, 0}, {4, 0}, {5, 0}, {6, 0}, {6, 1}, {5, 1}, {4, 1}};
  for (std::uint32_t i = 0; i + 1 < c.vertices.size(); ++i) c.edges.emplace_back(i, i + 1);
  const Direction w(1, 0);
  auto tr = explore(c, w, 4, 2);
  EXPECT_EQ(tr.X[1], 0.0);
  c.edges.emplace_back(3, 9);  // non-lattice shortcut from (3,0) to (4,1)
  tr = explore(c, w, 4, 2);
  EXPECT_EQ(tr.X[1], 1.0);
}

TEST(Explorer, AgreesWithBruteForceOnRandomClusters) {
  PercolationGrower grower(0.47, 40);
  Rng rng(5);
  const double angles[] = {0.0, 0.3, std::numbers::pi / 4, 1.2, std::numbers::pi / 2, 2.5, -0.7};
  int checked = 0;
  for (int s = 0; s < 400; ++s) {
    const ClusterView c = grower.grow(rng);
    if (c.vertices.size() < 5) continue;
    for (double a : angles)
      for (int L : {1, 2, 3}) {
        const auto w = Direction::from_angle(a);
        const int horizon = 30;
        const auto tr = explore(c, w, L, horizon);
        std::vector<double> X;
        std::vector<int> N;
        brute_trace(c, w, L, horizon, X, N);
        ++checked;
        for (int t = 0; t <= horizon; ++t) {
          const auto i = static_cast<std::size_t>(t);
          ASSERT_EQ(std::isnan(tr.X[i]), std::isnan(X[i])) << "t=" << t;
          if (!std::isnan(X[i])) {
            ASSERT_DOUBLE_EQ(tr.X[i], X[i]);
          }
          ASSERT_EQ(tr.N[i], N[i]);
          ASSERT_EQ(tr.N[i] == 0, std::isnan(tr.X[i]));
          if (tr.death_time >= 0 && t >= tr.death_time) {
            ASSERT_EQ(tr.N[i], 0);
          }
        }
        // the run-to-death horizon agrees on the common prefix
        const auto free_run = explore(c, w, L);
        for (std::size_t i = 0; i < free_run.N.size() && i < tr.N.size(); ++i) ASSERT_EQ(free_run.N[i], tr.N[i]);
        if (free_run.death_time >= 0 && free_run.death_time <= horizon) {
          ASSERT_EQ(free_run.death_time, tr.death_time);
          ASSERT_EQ(free_run.S, tr.S);
        }
        for (std::size_t k = 1; k < tr.S.size(); ++k) ASSERT_GE(tr.S[k] - tr.S[k - 1], 2);
      }
  }
  EXPECT_GT(checked, 1000);
}

TEST(Explorer, OriginClusterMatchesUnionFind) {
  const auto g = FiniteGraph::box(Box::centered(10));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = sample_bernoulli(g, 0.5, seed);
    const auto c = origin_cluster(g, w);
    DisjointSets ds(g.num_vertices());
    for (std::size_t e = 0; e < g.num_edges(); ++e)
      if (w[e]) ds.unite(g.edges()[e].u, g.edges()[e].v);
    const auto o = static_cast<std::size_t>(g.index_of({0, 0}));
    EXPECT_EQ(c.vertices.size(), ds.component_size(o));
    EXPECT_EQ(c.vertices[0], (LatticePoint{0, 0}));
    std::size_t open_inside = 0;
    for (std::size_t e = 0; e < g.num_edges(); ++e) open_inside += w[e] && ds.find(g.edges()[e].u) == ds.find(o);
    EXPECT_EQ(c.edges.size(), open_inside);
  }
}

TEST(Explorer, GrowerMatchesExactClusterSizeLaw) {
  // Lambda_1 has 12 edges; the exact law of |C(0)| comes from enumeration
  const auto g = FiniteGraph::box(Box::centered(1));
  const double p = 0.4;
  ExactRcm ex(g, {p, 1.0}, BoundaryCondition::free(g));
  const auto o = static_cast<std::size_t>(g.index_of({0, 0}));
  std::vector<double> exact(10, 0.0);
  for (std::uint64_t mask = 0; mask < ex.num_configs(); ++mask) {
    DisjointSets ds(g.num_vertices());
    for (std::size_t e = 0; e < g.num_edges(); ++e)
      if ((mask >> e) & 1u) ds.unite(g.edges()[e].u, g.edges()[e].v);
    exact[ds.component_size(o)] += ex.probability(mask);
  }
  PercolationGrower grower(p, 1);
  Rng rng(17);
  std::vector<double> counts(10, 0.0);
  const int n = 400000;
  for (int i = 0; i < n; ++i) counts[grower.grow(rng).vertices.size()] += 1;
  EXPECT_GT(chi_square_test(counts, exact).p_value, 1e-3);
}

TEST(Explorer, GrowerContainsAndTruncation) {
  PercolationGrower grower(1.0, 3);
  Rng rng(1);
  const auto& c = grower.grow(rng);
  EXPECT_EQ(c.vertices.size(), 49u);
  EXPECT_EQ(c.edges.size(), 84u);
  EXPECT_TRUE(c.truncated);
  EXPECT_TRUE(grower.contains({3, -3}));
  EXPECT_FALSE(grower.contains({4, 0}));
  PercolationGrower none(0.0, 3);
  EXPECT_EQ(none.grow(rng).vertices.size(), 1u);
  EXPECT_FALSE(none.last().truncated);
}

TEST(Explorer, PiecesTelescope) {
  const auto c = path_along_x(20);
  const auto tr = explore(c, Direction(1, 0), 2);
  EXPECT_EQ(tr.S, (std::vector<int>{2, 4, 6, 8, 10}));
  const auto pieces = piece_decomposition(tr, &c);
  ASSERT_EQ(pieces.size(), 6u);
  int total = 0;
  for (const auto& p : pieces) total += p.length;
  EXPECT_EQ(total, tr.death_time);
  EXPECT_TRUE(pieces.back().terminal);
  EXPECT_TRUE(pieces.back().killed);
  EXPECT_EQ(pieces[1].edges, 4u);  // x in [4, 9): edges 4-5 ... 8-9 minus the one leaving
  EXPECT_EQ(pieces[1].bbox.xmin, 4);
  EXPECT_EQ(pieces[1].bbox.xmax, 8);

  PercolationGrower grower(0.45, 60);
  Rng rng(3);
  for (int s = 0; s < 300; ++s) {
    const auto t2 = explore(grower.grow(rng), Direction::from_angle(0.4), 2);
    int sum = 0;
    for (const auto& p : piece_decomposition(t2)) {
      sum += p.length;
      if (!p.terminal && p.start > 0) {
        EXPECT_GE(p.length, 2);
      }
    }
    EXPECT_EQ(sum, t2.end_time());
  }
}

TEST(Explorer, StraightPathStepLaw) {
  std::vector<ExplorationTrace> traces;
  for (int i = 0; i < 10; ++i) {
    auto tr = explore(path_along_x(40), Direction(1, 0), 2, 20);
    tr.conditioned_on = 20;
    traces.push_back(tr);
  }
  const auto law = empirical_step_law(traces, 1.0, 10);
  EXPECT_EQ(law.kappa, 0.0);
  ASSERT_EQ(law.interior.size(), 1u);
  EXPECT_EQ(law.interior[0].tau, 2);
  EXPECT_EQ(law.interior[0].x, 0.0);
  EXPECT_NEAR(law.interior[0].prob, 1.0, 1e-15);
  EXPECT_THROW(empirical_step_law(traces, 1.0, 1000), InsufficientDataError);

  // unconditioned paths die one slice after the last pre-renewal
  const auto killed = explore(path_along_x(20), Direction(1, 0), 2);
  const auto law2 = empirical_step_law({killed}, 1.0, 1);
  EXPECT_NEAR(law2.kappa, 0.2, 1e-15);
  EXPECT_NO_THROW(law2.validate());
}

TEST(Explorer, ConeStats) {
  ExplorationTrace tr = explore(path_along_x(6), Direction(1, 0), 1);
  tr.cluster = {{0, 0}, {1, 0}, {0, 3}, {-2, 0}};
  // (0,3) leaves |y| <= alpha (x + k) when 3 > alpha k; (-2,0) leaves when k < 2
  const auto s = cone_stats({tr}, 1.0, {0, 1, 2, 3, 4});
  EXPECT_EQ(s[0].exit_probability, 1.0);
  EXPECT_EQ(s[1].exit_probability, 1.0);
  EXPECT_EQ(s[2].exit_probability, 1.0);
  EXPECT_EQ(s[3].exit_probability, 0.0);  // boundary point (0,3) counts as inside
  EXPECT_EQ(s[4].exit_probability, 0.0);
  EXPECT_EQ(cone_stats({tr}, 1e9, {2})[0].exit_probability, 0.0);
  tr.cluster = {{0, 0}, {1, 1}};
  EXPECT_EQ(cone_stats({tr}, 1e-3, {0})[0].exit_probability, 1.0);
}

TEST(Explorer, ConditionedEnsemble) {
  EnsembleSpec spec;
  spec.p = 0.35;
  spec.L = 2;
  spec.n_slices = 3;
  spec.count = 300;
  spec.block = 1000;
  spec.seed = 9;
  spec.keep_cluster = true;
  const Direction w(1, 0);
  const auto e1 = conditioned_ensemble(w, spec);
  ASSERT_EQ(e1.traces.size(), 300u);
  for (const auto& tr : e1.traces) {
    EXPECT_TRUE(tr.alive(3));
    EXPECT_FALSE(tr.cluster.empty());
  }
  // the acceptance event equals the half-space hit, counted directly here
  PercolationGrower grower(spec.p, 4 * (6 + 10));
  std::size_t hits = 0, n = 0;
  for (std::size_t b = 0; n < e1.attempts; ++b) {
    Rng rng(spec.seed, b);
    for (std::size_t i = 0; i < spec.block && n < e1.attempts; ++i, ++n) {
      double top = -INFINITY;
      for (const auto& v : grower.grow(rng).vertices) top = std::max(top, w.along(v));
      hits += top >= 6.0;
    }
  }
  EXPECT_EQ(hits, 300u);

  spec.threads = 3;
  const auto e3 = conditioned_ensemble(w, spec);
  ASSERT_EQ(e3.attempts, e1.attempts);
  for (std::size_t i = 0; i < e1.traces.size(); ++i) EXPECT_EQ(e1.traces[i].N, e3.traces[i].N);

  spec.n_slices = 0;
  spec.count = 50;
  EXPECT_EQ(conditioned_ensemble(w, spec).attempts, 50u);
  spec.n_slices = 40;
  spec.budget = 5000;
  EXPECT_THROW(conditioned_ensemble(w, spec), BudgetExhaustedError);
}

TEST(Explorer, TraceJson) {
  const auto tr = explore(path_along_x(12), Direction(1, 0), 4);
  std::ostringstream os;
  write_traces_jsonl(os, {tr}, "r1");
  const auto j = nlohmann::json::parse(os.str());
  EXPECT_EQ(j["run_id"], "r1");
  EXPECT_EQ(j["L"], 4);
  EXPECT_EQ(j["S"], nlohmann::json::array({2}));
  EXPECT_TRUE(j["X"][4].is_null());
  EXPECT_EQ(j["death_time"], 4);
}

namespace {

ExplorationTrace gap_trace(std::vector<int> S, int end) {
  ExplorationTrace tr;
  tr.X.assign(static_cast<std::size_t>(end) + 1, 0.0);
  tr.S = std::move(S);
  return tr;
}

}  // namespace

TEST(Explorer, GapTailCountsAndCensoring) {
  // end 20, margin 4: horizon 16. Gaps 2->8 and 8->13 end inside, 13 has a gap
  // shorter than r0 left, and a trace with S = {2} is censored at r = 14.
  std::vector<ExplorationTrace> trs(10, gap_trace({2, 8, 13}, 20));
  trs.push_back(gap_trace({2}, 20));
  const auto g = gap_tail_test(trs, 4, 4, 1.0);
  EXPECT_EQ(g.gaps, 20u);
  EXPECT_EQ(g.censored, 1u);
  ASSERT_EQ(g.r.front(), 4);
  EXPECT_EQ(g.events[0], 0.0);
  EXPECT_EQ(g.events[1], 10.0);  // r = 5
  EXPECT_EQ(g.events[2], 10.0);  // r = 6
  EXPECT_EQ(g.risk[0], 21.0);
  EXPECT_EQ(g.risk[1], 21.0);
  EXPECT_EQ(g.risk[2], 11.0);
  EXPECT_EQ(g.risk.back(), 1.0);  // r = 14, the censored gap
  EXPECT_NEAR(g.hazard, 20.0 / (21 + 21 + 11 + 8), 1e-12);
  EXPECT_NEAR(g.survival[2], (1 - 10.0 / 21) * (1 - 10.0 / 11), 1e-12);
  EXPECT_THROW(gap_tail_test({gap_trace({2, 8}, 20)}, 4, 4), InsufficientDataError);
}

TEST(Explorer, GapTailRecoversGeometricHazard) {
  const double h = 0.2;
  Rng rng(31);
  std::vector<ExplorationTrace> geo, uni;
  for (int i = 0; i < 20000; ++i) {
    std::vector<int> s{1}, u{1};
    while (s.back() < 60) {
      int gap = 2;
      while (!rng.bernoulli(h)) ++gap;
      s.push_back(s.back() + gap);
    }
    while (u.back() < 60) u.push_back(u.back() + 4 + static_cast<int>(rng() % 7));
    geo.push_back(gap_trace(s, 60));
    uni.push_back(gap_trace(u, 60));
  }
  const auto g = gap_tail_test(geo, 4, 4);
  EXPECT_NEAR(g.hazard, h, 4 * g.hazard_err);
  EXPECT_NEAR(g.rate, -std::log(1 - h), 4 * g.rate_err);
  EXPECT_GT(g.homogeneity.p_value, 1e-3);
  EXPECT_GT(g.censored, 0u);
  // uniform gaps on 4..10 have a rising hazard
  EXPECT_LT(gap_tail_test(uni, 4, 4).homogeneity.p_value, 1e-6);
}

TEST(Explorer, ConeDecay) {
  std::vector<ConeStat> cs{{1, 0.8, 0.01, 100}, {2, 0.6, 0.01, 100}, {3, 0.61, 0.01, 100}};
  auto d = cone_decay(cs);
  EXPECT_TRUE(d.monotone);  // a rise of 0.7 sigma is within 3 sigma
  EXPECT_TRUE(d.decays);
  cs[2].exit_probability = 0.7;
  d = cone_decay(cs);
  EXPECT_FALSE(d.monotone);
  EXPECT_NEAR(d.worst_rise, 0.1 / std::hypot(0.01, 0.01), 1e-9);
  const std::vector<ConeStat> flat{{1, 0.5, 0.05, 100}, {2, 0.5, 0.05, 100}};
  EXPECT_FALSE(cone_decay(flat).decays);
  EXPECT_THROW(cone_decay({cs[0]}), ContractError);
}
