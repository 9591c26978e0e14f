#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "ozlab/exact.hpp"
#include "ozlab/observables.hpp"

using namespace ozlab;

namespace {

TwoPointCurve synthetic_curve(Vec2 v, int n_max, const std::function<double(double)>& g_of_distance) {
  TwoPointCurve c{v, {}};
  for (int n = 0; n <= n_max; ++n) {
    const auto t = round_to_lattice({n * v.x, n * v.y});
    const double g = g_of_distance(std::hypot(t.x, t.y));
    c.points.push_back({n, t, g, 1e-3 * g, 1000000, 1000000, false});
  }
  return c;
}

Event horizontal_crossing(const FiniteGraph& g) {
  const Box b = *g.box();
  std::vector<std::uint32_t> left, right;
  for (int y = b.ymin; y <= b.ymax; ++y) {
    left.push_back(static_cast<std::uint32_t>(g.index_of({b.xmin, y})));
    right.push_back(static_cast<std::uint32_t>(g.index_of({b.xmax, y})));
  }
  return connection_event(g, left, right);
}

}  // namespace

TEST(Observables, CrossingExtremes) {
  SampleSpec s;
  s.samples = 200;
  EXPECT_EQ(crossing_probability(4, {0.0, 1.0}, s).value, 0.0);
  EXPECT_EQ(crossing_probability(4, {1.0, 1.0}, s).value, 1.0);
}

TEST(Observables, SelfDualRectangleIsOneHalf) {
  // a rectangle with one more column than rows is its own dual
  const auto g = FiniteGraph::box({0, 3, 0, 2});
  EXPECT_NEAR(event_probability(g, {0.5, 1.0}, BoundaryCondition::free(g), horizontal_crossing(g)), 0.5, 1e-12);
  SampleSpec s;
  s.samples = 6000;
  s.seed = 4;
  const auto e = crossing_probability(Box{0, 16, 0, 15}, {0.5, 1.0}, s);
  EXPECT_NEAR(e.value, 0.5, 3.5 * e.stderr);
}

TEST(Observables, ChainCrossingMatchesExact) {
  const Box box{0, 2, 0, 2};
  const auto g = FiniteGraph::box(box);
  const ModelParams m(0.5, 2.0);
  const double exact = event_probability(g, m, BoundaryCondition::free(g), horizontal_crossing(g));
  SampleSpec s;
  s.samples = 60000;
  s.seed = 8;
  s.chain = {Algorithm::cluster_move, 500, 4, 0, 0};
  const auto e = crossing_probability(box, m, s);
  EXPECT_NEAR(e.value, exact, 4.0 * e.stderr);
}

TEST(Observables, CharacteristicLength) {
  SampleSpec s;
  s.samples = 4000;
  s.seed = 2;
  EXPECT_EQ(characteristic_length({0.01, 1.0}, 0.05, 32, s).value, 1.0);
  const auto l25 = characteristic_length({0.25, 1.0}, 0.05, 32, s);
  EXPECT_FALSE(l25.censored);
  EXPECT_LE(l25.value, 8.0);
  EXPECT_GE(l25.value, 1.0);
  s.samples = 1000;
  EXPECT_TRUE(characteristic_length({0.5, 1.0}, 0.05, 8, s).censored);
  EXPECT_THROW(characteristic_length({0.3, 1.0}, 0.6, 8, s), ContractError);
}

TEST(Observables, OneArm) {
  SampleSpec s;
  s.samples = 100000;
  s.seed = 6;
  EXPECT_EQ(one_arm(0, {0.4, 1.0}, s).value, 1.0);
  double prev = 1.0, prev_err = 0.0;
  for (int R = 1; R <= 6; ++R) {
    const auto e = one_arm(R, {0.45, 1.0}, s);
    EXPECT_LE(e.value, prev + 3.0 * std::hypot(e.stderr, prev_err));
    prev = e.value, prev_err = e.stderr;
  }
  // chain path against the cluster-growth path at a q just above 1
  SampleSpec c = s;
  c.samples = 20000;
  c.chain = {Algorithm::cluster_move, 200, 2, 0, 0};
  const auto a = one_arm(2, {0.4, 1.0}, s), b = one_arm(2, {0.4, 1.0 + 1e-9}, c);
  EXPECT_NEAR(a.value, b.value, 4.0 * std::hypot(a.stderr, b.stderr));
}

TEST(Observables, TwoPointGrowerMatchesExactOnTinyBox) {
  // cluster growth confined to Lambda_1 is exact percolation on that box
  const auto g = FiniteGraph::box(Box::centered(1));
  const double p = 0.45;
  const auto curves = two_point_curves(p, {{{1, 0}, {0, 1}}, {{1, 1}, {1}}, {{0, -1}, {1}}}, 400000, 3, 1, 1);
  const auto o = static_cast<std::uint32_t>(g.index_of({0, 0}));
  auto exact = [&](LatticePoint x) {
    return event_probability(g, {p, 1.0}, BoundaryCondition::free(g),
                             connection_event(g, {o}, {static_cast<std::uint32_t>(g.index_of(x))}));
  };
  EXPECT_EQ(curves[0].points[0].estimate, 1.0);
  for (const auto& c : curves) {
    const auto& pt = c.points.back();
    EXPECT_NEAR(pt.estimate, exact(pt.target), 4.0 * pt.stderr) << pt.target.x << "," << pt.target.y;
  }
}

TEST(Observables, TwoPointProperties) {
  const double p = 0.4;
  std::vector<int> ns;
  for (int n = 0; n <= 12; ++n) ns.push_back(n);
  const auto cs = two_point_curves(p, {{{1, 0}, ns}, {{0, 1}, ns}}, 400000, 11);
  const auto& e1 = cs[0].points;
  const auto& e2 = cs[1].points;
  EXPECT_EQ(e1[0].estimate, 1.0);
  for (std::size_t n = 1; n < e1.size(); ++n) {
    EXPECT_LE(e1[n].estimate, e1[n - 1].estimate + 3.0 * std::hypot(e1[n].stderr, e1[n - 1].stderr));
    EXPECT_NEAR(e1[n].estimate, e2[n].estimate, 3.5 * std::hypot(e1[n].stderr, e2[n].stderr));
  }
  // gluing lower bound G(n + m) >= G(n) G(m)
  for (int a = 1; a <= 6; ++a)
    for (int b = 1; a + b <= 12; ++b) {
      const auto& s = e1[static_cast<std::size_t>(a + b)];
      EXPECT_GE(s.estimate + 3.0 * s.stderr, e1[static_cast<std::size_t>(a)].estimate * e1[static_cast<std::size_t>(b)].estimate);
    }
  // the chain-on-a-box path agrees with cluster growth
  SampleSpec s;
  s.samples = 300;
  s.seed = 12;
  const auto box = two_point_curve_chain({1, 0}, {1, 2, 3, 4}, {p, 1.0}, 30, 10, s);
  for (std::size_t i = 0; i < box.points.size(); ++i) {
    const auto& a = box.points[i];
    const auto& b = e1[static_cast<std::size_t>(a.n)];
    EXPECT_NEAR(a.estimate, b.estimate, 4.0 * std::hypot(a.stderr, b.stderr));
  }
}

TEST(Observables, XiExactOnSyntheticCurves) {
  const auto pure = synthetic_curve({1, 0}, 60, [](double d) { return std::exp(-d / 7.0); });
  const auto f = estimate_xi(pure, Correction::none);
  EXPECT_NEAR(f.xi.value, 7.0, 1e-6);
  EXPECT_GE(f.xi.window_lo, 13.9);
  EXPECT_LE(f.xi.window_hi, 42.1);
  const auto oz = synthetic_curve({1, 0}, 80, [](double d) { return 0.3 * std::exp(-d / 7.0) / std::sqrt(d); });
  EXPECT_NEAR(estimate_xi(oz, Correction::oz).xi.value, 7.0, 1e-6);
  // the n^(-1/2) prefactor steepens the apparent decay: 1/xi' = 1/xi + 1/(2n)
  const auto biased = estimate_xi(oz, Correction::none);
  EXPECT_LT(biased.xi.value, 6.95);
  EXPECT_GT(biased.spread, estimate_xi(oz, Correction::oz).spread);
}

TEST(Observables, XiScalesWithTheDirectionVector) {
  auto g = [](double d) { return std::exp(-d / 5.0); };
  const auto v = estimate_xi(synthetic_curve({1, 0}, 60, g), Correction::none);
  const auto v2 = estimate_xi(synthetic_curve({2, 0}, 30, g), Correction::none);
  EXPECT_NEAR(v2.xi.value, 0.5 * v.xi.value, 1e-6);
  // distance abscissa removes the scaling
  const auto d2 = estimate_xi(synthetic_curve({2, 0}, 30, g), Correction::none, Abscissa::distance);
  EXPECT_NEAR(d2.xi.value, 5.0, 1e-6);
}

TEST(Observables, XiFitNeedsThreePoints) {
  auto c = synthetic_curve({1, 0}, 3, [](double d) { return std::exp(-d); });
  c.points[2].censored = true;
  EXPECT_THROW(fit_xi_window(c, Correction::none, Abscissa::index, 0, 10), FitError);
}

TEST(Observables, HalfspaceProfileAndZeta) {
  const double p = 0.35;
  const std::vector<Direction> dirs{Direction(1, 0), Direction(0, 1)};
  std::vector<int> ns;
  for (int n = 0; n <= 12; ++n) ns.push_back(n);
  struct Both {
    HalfspaceAccumulator h;
    TwoPointAccumulator t;
    void observe(const ClusterView& c, const PercolationGrower& g) { h.observe(c, g), t.observe(c, g); }
    void merge(const Both& o) { h.merge(o.h), t.merge(o.t); }
  };
  const auto acc = accumulate_clusters(p, 1000000, 21, 1, 128, Both{{dirs, 24}, TwoPointAccumulator({{{1, 0}, ns}})});
  const auto prof = acc.h.profiles();
  EXPECT_EQ(prof[0].hit(0), 1.0);
  const auto g = acc.t.curves()[0];
  // event inclusion per sample, so it holds exactly
  for (int n = 0; n <= 12; ++n) EXPECT_GE(prof[0].hit(n), g.points[static_cast<std::size_t>(n)].estimate);
  const auto z1 = estimate_zeta(prof[0], 1, 4, 12), z2 = estimate_zeta(prof[1], 1, 4, 12);
  EXPECT_NEAR(z1.value, z2.value, 3.0 * std::hypot(z1.stderr, z2.stderr));
  EXPECT_GT(z1.value, 0.1);
  EXPECT_LT(z1.value, 10.0);
  // slab granularity L: zeta scales down by L
  const auto zl = estimate_zeta(prof[0], 3, 2, 4);
  EXPECT_NEAR(zl.value * 3, z1.value, 4.0 * (3 * zl.stderr + z1.stderr));
  // ratios settle to a constant
  const auto rs = slab_ratios(prof[0], 2);
  EXPECT_NEAR(rs[3].ratio, rs[5].ratio, 0.02 * rs[3].ratio + 3 * std::hypot(rs[3].stderr, rs[5].stderr));
}

TEST(Observables, ZetaOnSyntheticProfile) {
  HalfspaceProfile prof{Direction(1, 0), {}, 1u << 30};
  for (int n = 0; n <= 20; ++n) prof.reach.push_back(static_cast<std::size_t>(std::ldexp(1.0, 30 - n)));
  const auto z = estimate_zeta(prof, 2, 1, 10);
  EXPECT_NEAR(z.value, 1.0 / std::log(4.0), 1e-12);
  const auto xs = estimate_xi_star(prof, 1, 20);
  EXPECT_NEAR(xs.value, 1.0 / std::log(2.0), 1e-12);
  const auto rs = slab_ratios(prof, 1);
  const auto [lo, hi] = resolvable_window(rs, 0.004);
  EXPECT_EQ(lo, 2);
  // relative error 1 / sqrt(den) stays within 0.004 while den >= 62500
  EXPECT_EQ(hi, 15);
}

TEST(Observables, RationalDirections) {
  EXPECT_EQ(rational_direction(Direction(1, 0)), (std::pair{1, 0}));
  EXPECT_EQ(rational_direction(Direction(2, 2)), (std::pair{1, 1}));
  EXPECT_EQ(rational_direction(Direction(-3, 2)), (std::pair{-3, 2}));
  EXPECT_FALSE(rational_direction(Direction::from_angle(0.3)).has_value());
}

// On the diagonal the half-space event only changes at multiples of 1/sqrt(2),
// so integer thresholds see a staircase that a plain pooled ratio misreads.
TEST(Observables, XiStarOnDiagonalStaircase) {
  const double xi = 2.0, s2 = std::sqrt(2.0), N = 1e12;
  auto level = [&](double a) { return std::ceil(a * s2 - 1e-9) / s2; };
  HalfspaceProfile prof{Direction(1, 1), {}, static_cast<std::size_t>(N)};
  for (int n = 0; n <= 20; ++n) prof.reach.push_back(static_cast<std::size_t>(std::llround(N * std::exp(-level(n) / xi))));
  EXPECT_NEAR(estimate_xi_star(prof, 2, 12).value, xi, 1e-6);
  const double pooled = -1.0 / std::log(static_cast<double>(prof.reach[3]) / static_cast<double>(prof.reach[2]));
  EXPECT_GT(std::abs(pooled - xi), 0.1);
  // the same staircase through fine counts and smoothing
  for (int i = 0; i <= 20 * HalfspaceProfile::kFine; ++i)
    prof.fine.push_back(static_cast<std::size_t>(std::llround(N * std::exp(-level(static_cast<double>(i) / HalfspaceProfile::kFine) / xi))));
  EXPECT_NEAR(estimate_xi_star(prof, 2, 12, 3.0).value, xi, 1e-6);
  EXPECT_THROW(estimate_xi_star(prof, 2, 19, 3.0), ContractError);
}

TEST(Observables, XiStarSmoothedOnExponentialTail) {
  const double xi = 2.5, N = 1e12;
  HalfspaceProfile prof{Direction::from_angle(0.3), {}, static_cast<std::size_t>(N)};
  for (int i = 0; i <= 30 * HalfspaceProfile::kFine; ++i)
    prof.fine.push_back(static_cast<std::size_t>(std::llround(N * std::exp(-static_cast<double>(i) / HalfspaceProfile::kFine / xi))));
  for (int n = 0; n <= 30; ++n) prof.reach.push_back(prof.fine[static_cast<std::size_t>(n * HalfspaceProfile::kFine)]);
  const auto e = estimate_xi_star(prof, 4, 20);
  EXPECT_NEAR(e.value, xi, 1e-6);
  EXPECT_GT(e.stderr, 0.0);
  EXPECT_EQ(e.method, "halfspace_xi_star_smoothed");
}

TEST(Observables, XiStarOnSimulatedAxis) {
  // with unit levels, smoothing over [n, n + 1) reads reach(n + 1)
  const auto acc = accumulate_clusters(0.3, 200000, 3, 1, 100, HalfspaceAccumulator({Direction(1, 0)}, 20));
  const auto prof = acc.profiles().front();
  ASSERT_EQ(prof.fine.size(), 20u * HalfspaceProfile::kFine + 1);
  for (int n = 0; n <= 20; ++n) EXPECT_EQ(prof.reach[static_cast<std::size_t>(n)], prof.fine[static_cast<std::size_t>(n * HalfspaceProfile::kFine)]);
  const auto a = estimate_xi_star(prof, 2, 8, 1.0), b = estimate_xi_star(prof, 3, 9, 0.0);
  EXPECT_NEAR(a.value, b.value, 1e-9);
}

TEST(Observables, CsvOutputs) {
  const auto c = synthetic_curve({1, 0}, 3, [](double d) { return std::exp(-d); });
  std::ostringstream os;
  write_two_point_csv(os, {c}, "run7");
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "run_id,direction,vx,vy,n,target_x,target_y,estimate,stderr,samples,successes,censored");
  int rows = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(line.rfind("run7,", 0), 0u);
    ++rows;
  }
  EXPECT_EQ(rows, 4);
  std::ostringstream ls;
  write_lengths_csv(ls, {{2.5, 0.1, 4, 12, "two_point_oz", false}}, "run7");
  EXPECT_EQ(ls.str(), "run_id,method,value,stderr,window_lo,window_hi,censored\nrun7,two_point_oz,2.5,0.10000000000000001,4,12,0\n");
}

TEST(Observables, RatioVariationAndWindowSplit) {
  HalfspaceProfile prof{Direction(1, 0), {}, 1u << 30};
  for (int n = 0; n <= 20; ++n) prof.reach.push_back(static_cast<std::size_t>(std::ldexp(1.0, 30 - n)));
  const auto rs = slab_ratios(prof, 1);
  EXPECT_NEAR(ratio_variation(rs, 2, 15), 0.0, 1e-12);
  const auto s = split_window_zeta(prof, 1, 2, 7);
  EXPECT_EQ(s.first.window_lo, 2);
  EXPECT_EQ(s.first.window_hi, 4);
  EXPECT_EQ(s.second.window_lo, 5);
  EXPECT_EQ(s.second.window_hi, 7);
  EXPECT_NEAR(s.first.value, s.second.value, 1e-12);
  EXPECT_LT(s.z, 1e-6);
  EXPECT_THROW(split_window_zeta(prof, 1, 3, 3), InsufficientDataError);

  // ratios 0.5, 0.4, 0.6 around mean 0.5 vary by 0.4
  std::vector<SlabRatio> r3{{1, 0.5, 0, 1, 2}, {2, 0.4, 0, 2, 5}, {3, 0.6, 0, 3, 5}};
  EXPECT_NEAR(ratio_variation(r3, 1, 3), 0.4, 1e-12);
  EXPECT_NEAR(ratio_variation(r3, 1, 1), 0.0, 1e-12);
  EXPECT_THROW(ratio_variation(r3, 5, 6), ContractError);
}
