#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "ozlab/error.hpp"
#include "ozlab/geometry.hpp"
#include "ozlab/rng.hpp"

namespace ozlab {

// Open cluster of a vertex set plus the open edges between its vertices.
// vertices[0] is the seed; edges index into vertices.
struct ClusterView {
  std::vector<LatticePoint> vertices;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  bool truncated = false;
};

// Grows the open cluster of the origin for Bernoulli bond percolation inside
// the box Lambda_R, sampling each edge the first time it is examined. Arrays
// are stamped with a generation counter so nothing is cleared between samples.
class PercolationGrower {
 public:
  PercolationGrower(double p, int radius) : R_(radius), side_(2 * radius + 1) {
    if (radius < 1) throw ContractError("box radius must be positive");
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("p must lie in [0, 1]");
    thr_ = Rng::threshold(p);
    const std::size_t n = static_cast<std::size_t>(side_) * static_cast<std::size_t>(side_);
    vstamp_.assign(n, 0);
    vpos_.assign(n, 0);
    estamp_.assign(2 * n, 0);
  }

  int radius() const { return R_; }

  // Grows the cluster; growth stops early once it holds `max_vertices`.
  const ClusterView& grow(Rng& rng, std::size_t max_vertices = std::numeric_limits<std::size_t>::max()) {
    if (++gen_ == kMaxGen) reset_stamps();
    view_.vertices.clear();
    view_.edges.clear();
    view_.truncated = false;
    add_vertex(id_of(0, 0), {0, 0});
    for (std::size_t head = 0; head < view_.vertices.size(); ++head) {
      if (view_.vertices.size() >= max_vertices) {
        view_.truncated = true;
        break;
      }
      const LatticePoint x = view_.vertices[head];
      const std::uint32_t id = id_of(x.x, x.y);
      if (x.x == -R_ || x.x == R_ || x.y == -R_ || x.y == R_) view_.truncated = true;
      if (x.x < R_) explore(rng, head, 2 * id, id + 1, {x.x + 1, x.y});
      if (x.x > -R_) explore(rng, head, 2 * (id - 1), id - 1, {x.x - 1, x.y});
      if (x.y < R_) explore(rng, head, 2 * id + 1, id + static_cast<std::uint32_t>(side_), {x.x, x.y + 1});
      if (x.y > -R_) explore(rng, head, 2 * (id - static_cast<std::uint32_t>(side_)) + 1, id - static_cast<std::uint32_t>(side_), {x.x, x.y - 1});
    }
    return view_;
  }

  const ClusterView& last() const { return view_; }

  // Membership in the last grown cluster.
  bool contains(LatticePoint p) const {
    if (p.x < -R_ || p.x > R_ || p.y < -R_ || p.y > R_) return false;
    return vstamp_[id_of(p.x, p.y)] == gen_;
  }

 private:
  static constexpr std::uint32_t kMaxGen = std::numeric_limits<std::uint32_t>::max() >> 1;

  std::uint32_t id_of(int x, int y) const {
    return static_cast<std::uint32_t>((y + R_) * side_ + (x + R_));
  }

  void add_vertex(std::uint32_t id, LatticePoint p) {
    vstamp_[id] = gen_;
    vpos_[id] = static_cast<std::uint32_t>(view_.vertices.size());
    view_.vertices.push_back(p);
  }

  // Edge slot e joins the vertex at cluster index `from` to vertex id `to`.
  void explore(Rng& rng, std::size_t from, std::uint32_t e, std::uint32_t to, LatticePoint tp) {
    const std::uint32_t s = estamp_[e];
    if ((s >> 1) == gen_) return;  // already sampled from the other side
    const bool open = rng.bernoulli_threshold(thr_);
    estamp_[e] = (gen_ << 1) | (open ? 1u : 0u);
    if (!open) return;
    if (vstamp_[to] != gen_) add_vertex(to, tp);
    view_.edges.emplace_back(static_cast<std::uint32_t>(from), vpos_[to]);
  }

  void reset_stamps() {
    std::fill(vstamp_.begin(), vstamp_.end(), 0);
    std::fill(estamp_.begin(), estamp_.end(), 0);
    gen_ = 1;
  }

  int R_, side_;
  std::uint64_t thr_ = 0;
  std::uint32_t gen_ = 0;
  std::vector<std::uint32_t> vstamp_, vpos_, estamp_;
  ClusterView view_;
};

}  // namespace ozlab
