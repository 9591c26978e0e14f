#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ozlab/error.hpp"

namespace ozlab {

struct LatticePoint {
  int x = 0;
  int y = 0;
  friend constexpr auto operator<=>(const LatticePoint&, const LatticePoint&) = default;
  friend constexpr LatticePoint operator+(LatticePoint a, LatticePoint b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr LatticePoint operator-(LatticePoint a, LatticePoint b) { return {a.x - b.x, a.y - b.y}; }
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  Vec2() = default;
  constexpr Vec2(double x_, double y_) : x(x_), y(y_) {}
  constexpr Vec2(LatticePoint p) : x(p.x), y(p.y) {}
  friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  double norm() const { return std::hypot(x, y); }
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

enum class Orientation : std::uint8_t { horizontal, vertical };

// An edge is named by its lower-left endpoint. Dual edges live on the shifted
// lattice Z^2 + (1/2, 1/2); `endpoint` then stores the dual vertex minus (1/2, 1/2).
struct EdgeId {
  LatticePoint endpoint;
  Orientation orientation = Orientation::horizontal;
  bool dual = false;

  LatticePoint other_endpoint() const {
    return orientation == Orientation::horizontal ? LatticePoint{endpoint.x + 1, endpoint.y}
                                                  : LatticePoint{endpoint.x, endpoint.y + 1};
  }
  friend constexpr auto operator<=>(const EdgeId&, const EdgeId&) = default;
};

inline EdgeId horizontal_edge(int x, int y) { return {{x, y}, Orientation::horizontal, false}; }
inline EdgeId vertical_edge(int x, int y) { return {{x, y}, Orientation::vertical, false}; }

// The dual edge crossing e. Applying it twice returns e.
inline EdgeId dual_edge(const EdgeId& e) {
  EdgeId d;
  d.dual = !e.dual;
  if (e.orientation == Orientation::horizontal) {
    d.orientation = Orientation::vertical;
    d.endpoint = e.dual ? LatticePoint{e.endpoint.x + 1, e.endpoint.y} : LatticePoint{e.endpoint.x, e.endpoint.y - 1};
  } else {
    d.orientation = Orientation::horizontal;
    d.endpoint = e.dual ? LatticePoint{e.endpoint.x, e.endpoint.y + 1} : LatticePoint{e.endpoint.x - 1, e.endpoint.y};
  }
  return d;
}

// Unit vector with its +90 degree rotation. Components within 1e-14 of zero
// are snapped so that axis directions use exact integer arithmetic.
class Direction {
 public:
  Direction() : Direction(1.0, 0.0) {}
  Direction(double x, double y) {
    const double n = std::hypot(x, y);
    if (!(n > 0.0) || !std::isfinite(n)) throw ContractError("direction must be a nonzero finite vector");
    x /= n;
    y /= n;
    if (std::abs(x) < 1e-14) x = 0.0, y = y > 0 ? 1.0 : -1.0;
    if (std::abs(y) < 1e-14) y = 0.0, x = x > 0 ? 1.0 : -1.0;
    w_ = {x, y};
  }
  static Direction from_angle(double theta) { return Direction(std::cos(theta), std::sin(theta)); }

  Vec2 w() const { return w_; }
  Vec2 perp() const { return {-w_.y, w_.x}; }
  double angle() const { return std::atan2(w_.y, w_.x); }
  double along(Vec2 p) const { return p.x * w_.x + p.y * w_.y; }
  double across(Vec2 p) const { return -p.x * w_.y + p.y * w_.x; }
  bool is_axis() const { return w_.x == 0.0 || w_.y == 0.0; }

  // Reflection across the horizontal axis.
  Direction reflected() const { return Direction(w_.x, -w_.y); }

 private:
  Vec2 w_;
};

struct SliceSpec {
  Direction w;
  int L = 1;
  int t = 0;
};

struct ConeSpec {
  Vec2 apex;
  Direction w;
  double alpha = 1.0;
};

// Axis-aligned vertex rectangle [xmin, xmax] x [ymin, ymax].
struct Box {
  int xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  static Box centered(int R) { return {-R, R, -R, R}; }
  int width() const { return xmax - xmin + 1; }
  int height() const { return ymax - ymin + 1; }
  bool contains(LatticePoint p) const { return p.x >= xmin && p.x <= xmax && p.y >= ymin && p.y <= ymax; }
};

// Nearest lattice vertex. Ties go to the smallest x, then the largest y.
inline LatticePoint round_to_lattice(Vec2 v) {
  const int x0 = static_cast<int>(std::floor(v.x));
  const int y0 = static_cast<int>(std::floor(v.y));
  LatticePoint best{};
  double best_d = INFINITY;
  for (int dx = 0; dx <= 1; ++dx) {
    for (int dy = 1; dy >= 0; --dy) {
      const LatticePoint c{x0 + dx, y0 + dy};
      const double d = (v.x - c.x) * (v.x - c.x) + (v.y - c.y) * (v.y - c.y);
      // scanning x upward and y downward makes strict < implement the tie rule
      if (d < best_d) best_d = d, best = c;
    }
  }
  return best;
}

inline bool in_band(const SliceSpec& s, Vec2 p) {
  const double a = s.w.along(p);
  const double lo = static_cast<double>(s.t) * s.L;
  return a >= lo && a < lo + 1.0;
}

// Index of the band containing p, or INT_MIN when p sits between bands.
inline int band_index(const Direction& w, int L, Vec2 p) {
  const double a = w.along(p);
  const double t = std::floor(a / L);
  if (a - t * L < 1.0) return static_cast<int>(t);
  return std::numeric_limits<int>::min();
}

inline std::vector<LatticePoint> halfspace_band_vertices(const SliceSpec& s, const Box& box) {
  if (s.L < 1) throw ContractError("slice length L must be at least 1");
  std::vector<LatticePoint> out;
  for (int x = box.xmin; x <= box.xmax; ++x)
    for (int y = box.ymin; y <= box.ymax; ++y)
      if (in_band(s, LatticePoint{x, y})) out.push_back({x, y});
  return out;
}

inline int segment_of(Vec2 p, const SliceSpec& s) {
  if (!in_band(s, p)) throw ContractError("point is not in the band of the slice");
  return static_cast<int>(std::floor(s.w.across(p) / s.L));
}

inline bool cone_contains(const ConeSpec& c, Vec2 p) {
  const Vec2 z = p - c.apex;
  return std::abs(c.w.across(z)) <= c.alpha * c.w.along(z);
}

}  // namespace ozlab

template <>
struct std::hash<ozlab::LatticePoint> {
  std::size_t operator()(const ozlab::LatticePoint& p) const noexcept {
    return std::hash<std::uint64_t>{}((static_cast<std::uint64_t>(static_cast<std::uint32_t>(p.x)) << 32) |
                                      static_cast<std::uint32_t>(p.y));
  }
};
