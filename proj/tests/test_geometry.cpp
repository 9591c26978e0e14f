#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "ozlab/geometry.hpp"

using namespace ozlab;

TEST(Geometry, AxisBandIsOneColumn) {
  const SliceSpec s{Direction(1, 0), 4, 3};
  const auto band = halfspace_band_vertices(s, Box::centered(20));
  ASSERT_EQ(band.size(), 41u);
  for (auto p : band) EXPECT_EQ(p.x, 12);
}

TEST(Geometry, BandsPartitionNothingTwiceAndLeaveGaps) {
  const Direction w = Direction::from_angle(0.3);
  const int L = 3;
  const Box box = Box::centered(15);
  std::map<LatticePoint, int> hits;
  for (int t = -10; t <= 10; ++t)
    for (auto p : halfspace_band_vertices({w, L, t}, box)) ++hits[p];
  for (auto& [p, c] : hits) {
    EXPECT_EQ(c, 1);
    EXPECT_EQ(band_index(w, L, p), static_cast<int>(std::floor(w.along(p) / L)));
  }
}

TEST(Geometry, SegmentOf) {
  const SliceSpec s{Direction(1, 0), 4, 1};
  EXPECT_EQ(segment_of(Vec2(4, 7), s), 1);
  EXPECT_EQ(segment_of(Vec2(4, -1), s), -1);
  EXPECT_EQ(segment_of(Vec2(4, 0), s), 0);
  EXPECT_THROW(segment_of(Vec2(5, 0), s), ContractError);
}

TEST(Geometry, ConeBoundaryIsInside) {
  const ConeSpec c{{0, 0}, Direction(1, 0), 4.0};
  EXPECT_TRUE(cone_contains(c, {1, 4}));
  EXPECT_TRUE(cone_contains(c, {1, -4}));
  EXPECT_FALSE(cone_contains(c, {1, 4.0001}));
  EXPECT_FALSE(cone_contains(c, {-1, 0}));
  EXPECT_TRUE(cone_contains(c, {0, 0}));
}

TEST(Geometry, RoundingTieBreak) {
  EXPECT_EQ(round_to_lattice({0.5, 0.0}), (LatticePoint{0, 0}));
  EXPECT_EQ(round_to_lattice({0.5, 0.5}), (LatticePoint{0, 1}));
  EXPECT_EQ(round_to_lattice({-0.5, -0.5}), (LatticePoint{-1, 0}));
  EXPECT_EQ(round_to_lattice({2.4, -3.6}), (LatticePoint{2, -4}));
  EXPECT_EQ(round_to_lattice({7.0, 1.0}), (LatticePoint{7, 1}));
}

TEST(Geometry, DualEdgeIsInvolution) {
  for (int x = -2; x <= 2; ++x)
    for (int y = -2; y <= 2; ++y)
      for (auto o : {Orientation::horizontal, Orientation::vertical}) {
        const EdgeId e{{x, y}, o, false};
        const EdgeId d = dual_edge(e);
        EXPECT_TRUE(d.dual);
        EXPECT_NE(d.orientation, e.orientation);
        EXPECT_EQ(dual_edge(d), e);
        // the two edges cross at their common midpoint
        const double ex = e.endpoint.x + (o == Orientation::horizontal ? 0.5 : 0.0);
        const double ey = e.endpoint.y + (o == Orientation::vertical ? 0.5 : 0.0);
        const double dx = d.endpoint.x + 0.5 + (d.orientation == Orientation::horizontal ? 0.5 : 0.0);
        const double dy = d.endpoint.y + 0.5 + (d.orientation == Orientation::vertical ? 0.5 : 0.0);
        EXPECT_DOUBLE_EQ(ex, dx);
        EXPECT_DOUBLE_EQ(ey, dy);
      }
}

TEST(Geometry, AxisDirectionsAreSnapped) {
  const Direction up = Direction::from_angle(M_PI / 2);
  EXPECT_EQ(up.w().x, 0.0);
  EXPECT_EQ(up.w().y, 1.0);
  EXPECT_TRUE(up.is_axis());
  EXPECT_EQ(up.perp().x, -1.0);
  EXPECT_THROW(Direction(0, 0), ContractError);
}

TEST(Geometry, PerpIsPlusNinety) {
  const Direction w = Direction::from_angle(0.7);
  EXPECT_NEAR(w.perp().x, -std::sin(0.7), 1e-15);
  EXPECT_NEAR(w.perp().y, std::cos(0.7), 1e-15);
  EXPECT_NEAR(w.across(w.perp()), 1.0, 1e-15);
}
