#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <nlohmann/json.hpp>

#include "ozlab/csv.hpp"
#include "ozlab/error.hpp"
#include "ozlab/explorer.hpp"
#include "ozlab/geometry.hpp"
#include "ozlab/observables.hpp"
#include "ozlab/stats.hpp"

namespace ozlab {

// ---------------------------------------------------------------- drift

// Moments of the band midpoint (X_t + X_lo_t) / 2 over clusters alive at slice
// t, one set per direction. The midpoint is odd under the reflection that
// fixes w, so lattice symmetry axes carry no transient drift, while it grows
// at the same asymptotic rate as X_t. The
// sums are kept in `batches` groups (by merge order) so that slopes get
// batch-spread errors that account for the correlation across t.
struct DriftAccumulator {
  struct Moments {
    std::vector<double> s1, s2;
    std::vector<std::size_t> n;
    explicit Moments(int t_max = 0)
        : s1(static_cast<std::size_t>(t_max) + 1, 0.0), s2(static_cast<std::size_t>(t_max) + 1, 0.0),
          n(static_cast<std::size_t>(t_max) + 1, 0) {}
    void add(const Moments& o) {
      for (std::size_t t = 0; t < s1.size(); ++t) s1[t] += o.s1[t], s2[t] += o.s2[t], n[t] += o.n[t];
    }
  };

  std::vector<Direction> dirs;
  int L = 1, t_lo = 1, t_max = 1;
  std::size_t batches = 16;
  std::vector<std::vector<Moments>> batch;  // [dir][batch]
  std::size_t merged = 0;

  DriftAccumulator() = default;
  DriftAccumulator(std::vector<Direction> d, int L_, int t_lo_, int t_max_, std::size_t batches_ = 16)
      : dirs(std::move(d)), L(L_), t_lo(t_lo_), t_max(t_max_), batches(batches_),
        batch(dirs.size(), std::vector<Moments>(1, Moments(t_max_))) {
    if (L < 1 || t_lo < 1 || t_max < t_lo || batches < 2) throw ContractError("invalid drift window");
  }

  void observe(const ClusterView& c, const PercolationGrower&) {
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      double top = -INFINITY;
      for (const auto& v : c.vertices) top = std::max(top, dirs[k].along(v));
      if (top < static_cast<double>(t_lo) * L) continue;  // dead before the window
      const auto tr = explore(c, dirs[k], L, t_max);
      auto& m = batch[k][0];
      for (int t = t_lo; t <= t_max && tr.alive(t); ++t) {
        const double x = 0.5 * (tr.X[static_cast<std::size_t>(t)] + tr.X_lo[static_cast<std::size_t>(t)]);
        m.s1[static_cast<std::size_t>(t)] += x;
        m.s2[static_cast<std::size_t>(t)] += x * x;
        ++m.n[static_cast<std::size_t>(t)];
      }
    }
  }

  // A fresh accumulator holds one group; merged ones fan out over `batches`.
  void merge(const DriftAccumulator& o) {
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      if (batch[k].size() < batches) batch[k].resize(batches, Moments(t_max));
      for (const auto& m : o.batch[k]) batch[k][merged % batches].add(m);
    }
    ++merged;
  }
};

struct DriftFit {
  double mu = 0.0, mu_err = 0.0;        // slope of E[X_t] per slice, in units of L
  double sigma = 0.0, sigma_err = 0.0;  // sqrt of the slope of Var[X_t], in units of L
  int t_lo = 0, t_hi = 0;
  std::size_t clusters_at_end = 0;
};

namespace detail {

inline std::pair<double, double> drift_slopes(const DriftAccumulator::Moments& m, int t_lo, int t_hi) {
  std::vector<double> t, mean, var, sm, sv;
  for (int s = t_lo; s <= t_hi; ++s) {
    const auto i = static_cast<std::size_t>(s);
    if (m.n[i] < 2) continue;
    const double n = static_cast<double>(m.n[i]);
    const double mu = m.s1[i] / n, v = std::max(0.0, m.s2[i] / n - mu * mu);
    t.push_back(s);
    mean.push_back(mu);
    var.push_back(v);
    sm.push_back(std::sqrt(std::max(v, 1e-12) / n));
    sv.push_back(std::max(v, 1e-12) * std::sqrt(2.0 / (n - 1.0)));
  }
  if (t.size() < 3) throw InsufficientDataError("too few alive slices for the drift regression");
  return {fit_line(t, mean, sm).beta(1), fit_line(t, var, sv).beta(1)};
}

}  // namespace detail

inline DriftFit fit_drift(const DriftAccumulator& acc, std::size_t dir, int t_lo, int t_hi) {
  if (t_lo < acc.t_lo || t_hi > acc.t_max || t_hi - t_lo < 2) throw ContractError("drift window outside the accumulated range");
  DriftAccumulator::Moments all(acc.t_max);
  for (const auto& m : acc.batch.at(dir)) all.add(m);
  const auto [a, b] = detail::drift_slopes(all, t_lo, t_hi);
  RunningStats sa, sb;
  for (const auto& m : acc.batch[dir]) {
    try {
      const auto [x, y] = detail::drift_slopes(m, t_lo, t_hi);
      sa.add(x);
      sb.add(y);
    } catch (const InsufficientDataError&) {
    }
  }
  if (sa.count() < 2) throw InsufficientDataError("too few batches for drift errors");
  DriftFit f;
  const double L = acc.L;
  f.mu = a / L;
  f.mu_err = sa.stderr_of_mean() / L;
  const double s2 = b / (L * L);
  if (!(s2 > 0.0)) throw FitError("non-positive variance growth");
  f.sigma = std::sqrt(s2);
  f.sigma_err = sb.stderr_of_mean() / (L * L) / (2.0 * f.sigma);
  f.t_lo = t_lo;
  f.t_hi = t_hi;
  f.clusters_at_end = all.n[static_cast<std::size_t>(t_hi)];
  return f;
}

// ---------------------------------------------------------------- half-space orbits

// Angles of the images of theta under the symmetry group of Z^2, without repeats.
inline std::vector<double> dihedral_images(double theta) {
  std::vector<double> out;
  const double h = std::numbers::pi / 2;
  for (int k = 0; k < 4; ++k)
    for (double t : {theta + k * h, h - theta + k * h}) {
      const double a = std::remainder(t, 2.0 * std::numbers::pi);
      bool seen = false;
      for (double b : out) seen = seen || std::abs(std::remainder(a - b, 2.0 * std::numbers::pi)) < 1e-9;
      if (!seen) out.push_back(a);
    }
  return out;
}

// Every image of every quadrant angle, for a half-space accumulator.
inline std::vector<Direction> dihedral_orbit(const std::vector<double>& quadrant) {
  std::vector<double> all;
  for (double t : quadrant)
    for (double a : dihedral_images(t)) {
      bool seen = false;
      for (double b : all) seen = seen || std::abs(std::remainder(a - b, 2.0 * std::numbers::pi)) < 1e-9;
      if (!seen) all.push_back(a);
    }
  std::vector<Direction> dirs;
  for (double a : all) dirs.push_back(Direction::from_angle(a));
  return dirs;
}

namespace detail {

inline HalfspaceProfile pooled_profile(const std::vector<HalfspaceProfile>& ps, double theta) {
  HalfspaceProfile out{Direction::from_angle(theta), {}, 0, {}};
  for (double a : dihedral_images(theta)) {
    const auto it = std::find_if(ps.begin(), ps.end(), [&](const HalfspaceProfile& p) {
      return std::abs(std::remainder(p.w.angle() - a, 2.0 * std::numbers::pi)) < 1e-9;
    });
    if (it == ps.end()) throw ContractError("half-space accumulator lacks a dihedral image");
    if (out.reach.empty()) {
      out.reach.assign(it->reach.size(), 0);
      out.fine.assign(it->fine.size(), 0);
    }
    for (std::size_t i = 0; i < out.reach.size(); ++i) out.reach[i] += it->reach[i];
    for (std::size_t i = 0; i < out.fine.size(); ++i) out.fine[i] += it->fine[i];
    out.samples += it->samples;
  }
  return out;
}

}  // namespace detail

// xi* per quadrant angle from the pooled counts of its images, which is the
// dihedral symmetrization done on the data. The images share clusters, so the
// error comes from the spread of per-group estimates rather than from counts.
inline std::vector<LengthEstimate> dihedral_xi_star(const HalfspaceAccumulator& acc, const std::vector<double>& quadrant,
                                                    int n_lo, int n_hi, double smooth = 3.0) {
  if (acc.groups() < 2) throw InsufficientDataError("half-space accumulator has fewer than two groups");
  const auto all = acc.profiles();
  std::vector<std::vector<HalfspaceProfile>> groups;
  for (std::size_t g = 0; g < acc.groups(); ++g) groups.push_back(acc.profiles(static_cast<int>(g)));
  std::vector<LengthEstimate> out;
  for (double t : quadrant) {
    auto e = estimate_xi_star(detail::pooled_profile(all, t), n_lo, n_hi, smooth);
    RunningStats rs;
    for (const auto& g : groups) {
      try {
        rs.add(estimate_xi_star(detail::pooled_profile(g, t), n_lo, n_hi, smooth).value);
      } catch (const InsufficientDataError&) {
      }
    }
    if (rs.count() < 2) throw InsufficientDataError("too few groups reach the half-space window");
    e.stderr = rs.stderr_of_mean();
    e.method = "halfspace_xi_star_dihedral";
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------- profiles

struct DirectionProfile {
  Direction w;
  int L = 1;
  LengthEstimate zeta;
  double mu = 0.0, mu_err = 0.0;
  double sigma = 0.0, sigma_err = 0.0;
  Direction v;
  double theta_v = 0.0, theta_v_err = 0.0;
  LengthEstimate xi_star;
  LengthEstimate xi_along_v;
};

// v(w) = normalize(w + mu w_perp), xi* = zeta L, xi(v) = xi* / <v, w>.
inline DirectionProfile direction_profile(const Direction& w, int L, const LengthEstimate& zeta, const DriftFit& d) {
  DirectionProfile p;
  p.w = w;
  p.L = L;
  p.zeta = zeta;
  p.mu = d.mu;
  p.mu_err = d.mu_err;
  p.sigma = d.sigma;
  p.sigma_err = d.sigma_err;
  const Vec2 a = w.w(), b = w.perp();
  p.v = Direction(a.x + d.mu * b.x, a.y + d.mu * b.y);
  p.theta_v = w.angle() + std::atan(d.mu);
  p.theta_v_err = d.mu_err / (1.0 + d.mu * d.mu);
  p.xi_star = zeta;
  p.xi_star.value = zeta.value * L;
  p.xi_star.stderr = zeta.stderr * L;
  p.xi_star.method = "xi_star";
  const double stretch = std::hypot(1.0, d.mu);
  p.xi_along_v = p.xi_star;
  p.xi_along_v.value = p.xi_star.value * stretch;
  p.xi_along_v.stderr = std::hypot(p.xi_star.stderr * stretch, p.xi_star.value * d.mu / stretch * d.mu_err);
  p.xi_along_v.method = "xi_along_v";
  return p;
}

// Image of a profile under a lattice symmetry that maps w to its reflection.
inline DirectionProfile reflect_profile(const DirectionProfile& p, double axis_angle) {
  auto refl = [&](double th) { return 2.0 * axis_angle - th; };
  DirectionProfile r = p;
  r.w = Direction::from_angle(refl(p.w.angle()));
  r.v = Direction::from_angle(refl(p.theta_v));
  r.theta_v = refl(p.theta_v);
  r.mu = -p.mu;
  return r;
}

struct AngleMapReport {
  bool monotone = true;
  double min_increment = INFINITY;  // smallest theta_v step along the grid
  std::size_t worst = 0;
};

// theta_w -> theta_v must increase along a grid sorted by theta_w; a step counts
// as a violation only when it is negative beyond `z` standard errors.
inline AngleMapReport angle_map_check(const std::vector<DirectionProfile>& ps, double z = 3.0) {
  AngleMapReport r;
  for (std::size_t i = 1; i < ps.size(); ++i) {
    const double d = ps[i].theta_v - ps[i - 1].theta_v;
    if (d < r.min_increment) r.min_increment = d, r.worst = i;
    if (d < -z * std::hypot(ps[i].theta_v_err, ps[i - 1].theta_v_err)) r.monotone = false;
  }
  return r;
}

// Inverse of the angle map by monotone linear interpolation on the grid.
inline Direction w_of_v(const Direction& v, const std::vector<DirectionProfile>& ps) {
  if (ps.size() < 2) throw ContractError("need at least two profiles");
  if (!angle_map_check(ps, 0.0).monotone) throw ContractError("angle map is not increasing on the grid");
  const double th = v.angle();
  // allow v anywhere on the circle by shifting into the grid's range
  const double lo = ps.front().theta_v, period = 2.0 * std::numbers::pi;
  double t = th;
  while (t < lo) t += period;
  while (t >= lo + period) t -= period;
  auto lerp = [&](double v0, double v1, double w0, double w1) {
    const double dw = std::remainder(w1 - w0, period);
    return Direction::from_angle(w0 + (t - v0) / (v1 - v0) * dw);
  };
  for (std::size_t i = 1; i < ps.size(); ++i)
    if (t <= ps[i].theta_v) return lerp(ps[i - 1].theta_v, ps[i].theta_v, ps[i - 1].w.angle(), ps[i].w.angle());
  // a grid spanning the full circle closes up across 2 pi
  const double v1 = ps.front().theta_v + period;
  if (t <= v1 && v1 - ps.back().theta_v < std::numbers::pi)
    return lerp(ps.back().theta_v, v1, ps.back().w.angle(), ps.front().w.angle());
  throw ContractError("direction outside the span of the grid");
}

// Extends profiles measured for theta in [0, pi/2) to the full circle by the
// symmetries of Z^2, sorted by theta_w.
inline std::vector<DirectionProfile> dihedral_extend(const std::vector<DirectionProfile>& quadrant) {
  std::vector<DirectionProfile> out;
  const double h = std::numbers::pi / 2;
  for (int k = 0; k < 4; ++k)
    for (const auto& p : quadrant) {
      DirectionProfile r = p;
      const double rot = k * h;
      r.w = Direction::from_angle(p.w.angle() + rot);
      r.v = Direction::from_angle(p.theta_v + rot);
      r.theta_v = p.theta_v + rot;
      out.push_back(r);
    }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    auto ang = [](const DirectionProfile& p) {
      double t = p.w.angle();
      return t < -1e-12 ? t + 2.0 * std::numbers::pi : t;
    };
    return ang(a) < ang(b);
  });
  return out;
}

// Averages each grid direction with its mirror image theta -> pi/2 - theta.
// Mirror estimates come from the same clusters, so errors are averaged as if
// fully correlated. Returns the largest mirror asymmetry of xi* in units of the
// larger of the two errors.
inline double symmetrize_quadrant(std::vector<DirectionProfile>& ps) {
  const double h = std::numbers::pi / 2;
  double worst = 0.0;
  std::vector<DirectionProfile> out = ps;
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < ps.size(); ++j) {
      if (std::abs(ps[i].w.angle() + ps[j].w.angle() - h) > 1e-9) continue;
      const auto m = reflect_profile(ps[j], h / 2);
      auto& o = out[i];
      const double dz = ps[i].xi_star.value - m.xi_star.value;
      worst = std::max(worst, std::abs(dz) / std::max(ps[i].xi_star.stderr, m.xi_star.stderr));
      auto avg = [](double a, double b) { return 0.5 * (a + b); };
      o.xi_star.value = avg(ps[i].xi_star.value, m.xi_star.value);
      o.xi_star.stderr = avg(ps[i].xi_star.stderr, m.xi_star.stderr);
      o.zeta.value = o.xi_star.value / o.L;
      o.zeta.stderr = o.xi_star.stderr / o.L;
      o.mu = avg(ps[i].mu, m.mu);
      o.mu_err = avg(ps[i].mu_err, m.mu_err);
      o.sigma = avg(ps[i].sigma, m.sigma);
      o.sigma_err = avg(ps[i].sigma_err, m.sigma_err);
      const auto fresh = direction_profile(o.w, o.L, o.zeta, {o.mu, o.mu_err, o.sigma, o.sigma_err, 0, 0, 0});
      o.v = fresh.v;
      o.theta_v = fresh.theta_v;
      o.theta_v_err = fresh.theta_v_err;
      o.xi_along_v = fresh.xi_along_v;
    }
  ps = out;
  return worst;
}

// ---------------------------------------------------------------- shapes

// Dihedral-invariant smooth model of a function of the angle:
// f(theta) = sum_k a_k cos(4 k theta), fitted by weighted least squares.
struct DihedralSeries {
  Eigen::VectorXd a;
  Eigen::MatrixXd cov;
  double chi2 = 0.0;
  std::size_t dof = 0;

  double operator()(double th) const {
    double s = 0.0;
    for (Eigen::Index k = 0; k < a.size(); ++k) s += a(k) * std::cos(4.0 * static_cast<double>(k) * th);
    return s;
  }
  double stderr_at(double th) const {
    Eigen::VectorXd b(a.size());
    for (Eigen::Index k = 0; k < a.size(); ++k) b(k) = std::cos(4.0 * static_cast<double>(k) * th);
    return std::sqrt(std::max(0.0, b.dot(cov * b)));
  }
};

inline DihedralSeries fit_dihedral(const std::vector<double>& theta, const std::vector<double>& y,
                                   const std::vector<double>& sigma, int terms = 3) {
  const auto n = static_cast<Eigen::Index>(theta.size());
  Eigen::MatrixXd X(n, terms);
  Eigen::VectorXd Y(n), W(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < terms; ++k) X(i, k) = std::cos(4.0 * k * theta[static_cast<std::size_t>(i)]);
    Y(i) = y[static_cast<std::size_t>(i)];
    W(i) = 1.0 / (sigma[static_cast<std::size_t>(i)] * sigma[static_cast<std::size_t>(i)]);
  }
  const auto f = weighted_least_squares(X, Y, W);
  DihedralSeries s{f.beta, f.covariance, f.chi2, f.dof};
  // inflate by the reduced chi-square when the model is under strain
  if (f.dof > 0 && f.chi2 > static_cast<double>(f.dof)) s.cov *= f.chi2 / static_cast<double>(f.dof);
  return s;
}

// ---------------------------------------------------------------- two-point field

// Connection counts for every lattice point with max(|x|, |y|) <= R, folded
// into the fundamental domain 0 <= y <= x of the dihedral group of Z^2. Counts
// are kept in `batches` groups by merge order for batch-spread errors.
struct TwoPointField {
  int R = 0;
  std::size_t batches = 16;
  std::vector<std::vector<std::size_t>> counts;  // [batch][index(x, y)]
  std::vector<std::size_t> samples;              // per batch
  std::size_t merged = 0;

  TwoPointField() = default;
  TwoPointField(int radius, std::size_t batches_ = 16)
      : R(radius), batches(batches_), counts(1, std::vector<std::size_t>(size(), 0)), samples(1, 0) {
    if (R < 1 || batches < 2) throw ContractError("invalid two-point field");
  }

  std::size_t size() const { return static_cast<std::size_t>((R + 1) * (R + 2) / 2); }
  static std::size_t index(int x, int y) { return static_cast<std::size_t>(x * (x + 1) / 2 + y); }
  static int orbit(int x, int y) { return x == 0 ? 1 : (y == 0 || y == x) ? 4 : 8; }

  void observe(const ClusterView& c, const PercolationGrower&) {
    ++samples[0];
    auto& cnt = counts[0];
    for (const auto& v : c.vertices) {
      int x = std::abs(v.x), y = std::abs(v.y);
      if (y > x) std::swap(x, y);
      if (x <= R) ++cnt[index(x, y)];
    }
  }

  void merge(const TwoPointField& o) {
    if (counts.size() < batches) {
      counts.resize(batches, std::vector<std::size_t>(size(), 0));
      samples.resize(batches, 0);
    }
    for (std::size_t b = 0; b < o.counts.size(); ++b) {
      auto& dst = counts[merged % batches];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += o.counts[b][i];
      samples[merged % batches] += o.samples[b];
    }
    ++merged;
  }

  std::size_t total_samples() const { return std::accumulate(samples.begin(), samples.end(), std::size_t{0}); }
  std::size_t total(std::size_t i) const {
    std::size_t t = 0;
    for (const auto& c : counts) t += c[i];
    return t;
  }
};

// log G(x) + 1/2 log r = sum_k [c_k - r u_k + sum_j b_jk / r^j] cos(4 k theta),
// with u(theta) = 1 / xi(theta) and j = 1..orders. The b terms carry the
// corrections to the leading asymptotics, still visible at r ~ 5 xi.
// u has `terms` harmonics; c and each b_j have `amp_terms`, since lattice
// effects in the amplitude are less smooth in theta than the decay rate.
// Coefficients are laid out as (c, u, b_1, ...).
struct XiField {
  int terms = 3;
  int amp_terms = 3;
  int orders = 1;
  double r_lo = 0.0, r_hi = 0.0;
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;  // from the spread of per-batch fits
  DihedralSeries inv_xi;
  std::size_t points = 0;
  double chi2 = 0.0;  // against counting errors, which ignore correlations
  std::size_t dof = 0;

  double operator()(double th) const { return 1.0 / inv_xi(th); }
  double stderr_at(double th) const {
    const double u = inv_xi(th);
    return inv_xi.stderr_at(th) / (u * u);
  }
};

namespace detail {

struct FieldPoint {
  int x, y;
  std::size_t i;
  double r, th;
};

inline Eigen::MatrixXd field_design(const std::vector<FieldPoint>& pts, int terms, int amp_terms, int orders) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(pts.size()), terms + (1 + orders) * amp_terms);
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    const double r = pts[j].r;
    for (int k = 0; k < std::max(terms, amp_terms); ++k) {
      const double c = std::cos(4.0 * k * pts[j].th);
      if (k < amp_terms) {
        X(row, k) = c;
        for (int o = 1; o <= orders; ++o) X(row, amp_terms + terms + (o - 1) * amp_terms + k) = c / std::pow(r, o);
      }
      if (k < terms) X(row, amp_terms + k) = -r * c;
    }
  }
  return X;
}

inline Eigen::VectorXd field_response(const std::vector<FieldPoint>& pts, const std::vector<std::size_t>& cnt,
                                      std::size_t samples, bool oz) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(pts.size()));
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const auto& p = pts[j];
    const double g = static_cast<double>(cnt[p.i]) / (static_cast<double>(samples) * TwoPointField::orbit(p.x, p.y));
    y(static_cast<Eigen::Index>(j)) = std::log(g) + (oz ? 0.5 * std::log(p.r) : 0.0);
  }
  return y;
}

}  // namespace detail

// Fit over lattice points with r in [r_lo, r_hi]. A point enters when every
// batch saw it at least `min_batch_count` times, so all batches share one
// design and one set of weights; the covariance is the spread of the batch fits.
// amp_terms < 0 means amp_terms = terms.
inline XiField fit_xi_field(const TwoPointField& f, double r_lo, double r_hi, int terms = 3, bool oz = true,
                            int orders = 1, std::size_t min_batch_count = 5, int amp_terms = -1) {
  if (f.counts.size() < 2) throw InsufficientDataError("two-point field has fewer than two batches");
  if (terms < 1) throw ContractError("field fit needs at least one harmonic");
  if (amp_terms < 0) amp_terms = terms;
  std::vector<detail::FieldPoint> pts;
  for (int x = 0; x <= f.R; ++x)
    for (int y = 0; y <= x; ++y) {
      const double r = std::hypot(x, y);
      if (r < r_lo || r > r_hi || r == 0.0) continue;
      const auto i = TwoPointField::index(x, y);
      bool ok = true;
      for (const auto& c : f.counts) ok = ok && c[i] >= min_batch_count;
      if (ok) pts.push_back({x, y, i, r, std::atan2(y, x)});
    }
  const auto X = detail::field_design(pts, terms, amp_terms, orders);
  if (static_cast<Eigen::Index>(pts.size()) < X.cols() + 2) throw FitError("too few lattice points in the field window");
  Eigen::VectorXd w(X.rows());
  for (std::size_t j = 0; j < pts.size(); ++j) w(static_cast<Eigen::Index>(j)) = static_cast<double>(f.total(pts[j].i));
  std::vector<std::size_t> tot(f.size());
  for (std::size_t i = 0; i < tot.size(); ++i) tot[i] = f.total(i);
  const auto all = weighted_least_squares(X, detail::field_response(pts, tot, f.total_samples(), oz), w);
  const auto B = static_cast<Eigen::Index>(f.counts.size());
  Eigen::MatrixXd betas(B, X.cols());
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto sb = static_cast<std::size_t>(b);
    betas.row(b) = weighted_least_squares(X, detail::field_response(pts, f.counts[sb], f.samples[sb], oz), w).beta.transpose();
  }
  const Eigen::RowVectorXd mean = betas.colwise().mean();
  const Eigen::MatrixXd d = betas.rowwise() - mean;
  XiField r;
  r.terms = terms;
  r.amp_terms = amp_terms;
  r.orders = orders;
  r.r_lo = r_lo;
  r.r_hi = r_hi;
  r.beta = all.beta;
  r.cov = d.transpose() * d / static_cast<double>(B - 1) / static_cast<double>(B);
  r.inv_xi.a = all.beta.segment(amp_terms, terms);
  r.inv_xi.cov = r.cov.block(amp_terms, amp_terms, terms, terms);
  r.points = pts.size();
  r.chi2 = all.chi2;
  r.dof = all.dof;
  if (!(r.inv_xi.a(0) > 0.0)) throw FitError("two-point field does not decay over the window");
  return r;
}

// Window [lo xi0, hi xi0], with xi0 from the isotropic fit of the same form
// (1/2 log r and the correction orders) on that window, refined until stable.
// An uncorrected xi0 runs low and drags the window into the lattice-dominated
// range. The amplitude harmonics then grow from `terms` through the candidates
// below while each step lowers chi2 by more than its 95% quantile.
inline XiField estimate_xi_field(const TwoPointField& f, int terms = 3, int orders = 2, double lo = 2.0, double hi = 8.0) {
  auto window_fit = [&](double xi, int t, int at) {
    return fit_xi_field(f, lo * xi, std::min<double>(hi * xi, f.R), t, true, orders, 5, at);
  };
  double xi = 1.0 / fit_xi_field(f, 1.0, f.R, 1, false, 0).inv_xi.a(0);
  for (int it = 0; it < 50; ++it) {
    const double next = 1.0 / window_fit(xi, 1, 1).inv_xi.a(0);
    if (std::abs(next - xi) < 1e-9 * xi) break;
    xi = next;
  }
  auto best = window_fit(xi, terms, terms);
  for (const int at : {terms + 1, terms + 3, terms + 5}) {
    XiField cand;
    try {
      cand = window_fit(xi, terms, at);
    } catch (const FitError&) {
      break;
    }
    const double k = static_cast<double>((at - best.amp_terms) * (1 + orders));
    if (best.chi2 - cand.chi2 <= boost::math::quantile(boost::math::chi_squared(k), 0.95)) break;
    best = std::move(cand);
  }
  return best;
}

struct ShapeApprox {
  double p = 0.0, q = 1.0;
  std::vector<Vec2> U;  // xi(v) v
  std::vector<Vec2> W;  // xi*(w) w
};

struct DirectXi {
  double theta = 0.0;  // direction of v
  double value = 0.0, stderr = 0.0;
};

// Polygons on the full circle from quadrant measurements, closed under the
// dihedral group.
inline ShapeApprox build_shapes(const std::vector<DirectionProfile>& quadrant, const std::vector<DirectXi>& xi_direct,
                                double p, double q) {
  ShapeApprox s{p, q, {}, {}};
  const double h = std::numbers::pi / 2;
  for (const auto& pr : dihedral_extend(quadrant)) {
    const double r = pr.xi_star.value;
    s.W.push_back({r * pr.w.w().x, r * pr.w.w().y});
  }
  std::vector<std::pair<double, double>> u;
  for (int k = 0; k < 4; ++k)
    for (const auto& d : xi_direct) u.emplace_back(d.theta + k * h, d.value);
  std::sort(u.begin(), u.end());
  for (auto [th, r] : u) s.U.push_back({r * std::cos(th), r * std::sin(th)});
  return s;
}

inline nlohmann::json shapes_json(const ShapeApprox& s, const std::string& run_id) {
  auto poly = [](const std::vector<Vec2>& pts) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& v : pts) a.push_back({v.x, v.y});
    return a;
  };
  return {{"run_id", run_id}, {"p", s.p}, {"q", s.q}, {"U", poly(s.U)}, {"W", poly(s.W)}};
}

// ---------------------------------------------------------------- duality

struct DualityReport {
  double max_violation_sigma = -INFINITY;  // max over pairs of (xi(v)<v,w> - xi*(w)) / joint sigma
  std::size_t pairs = 0;
  std::size_t violations = 0;  // pairs beyond the tolerance
  double max_angle_gap = 0.0;  // |argmax_v xi(v)<v,w> - theta_v(w)|, radians
  std::vector<double> argmax_theta;
  std::vector<double> equality_z;  // (xi(v(w))<v(w),w> - xi*(w)) / joint sigma, per w
};

// Checks xi(v)<v,w> <= xi*(w) over all grid pairs with a smooth model of
// xi(v) (callable with stderr_at), and that the maximum over v sits at v(w).
template <class Model>
DualityReport duality_check(const std::vector<DirectionProfile>& ws, const Model& xi, double z = 2.0,
                                   const std::vector<double>& v_grid = {}) {
  DualityReport r;
  std::vector<double> vs = v_grid;
  if (vs.empty())
    for (const auto& p : ws) vs.push_back(p.w.angle());
  for (const auto& p : ws) {
    const double tw = p.w.angle();
    for (double tv : vs) {
      const double c = std::cos(tv - tw);
      if (c <= 0.0) continue;
      ++r.pairs;
      const double d = xi(tv) * c - p.xi_star.value;
      const double s = std::hypot(xi.stderr_at(tv) * c, p.xi_star.stderr);
      const double zz = d / s;
      r.max_violation_sigma = std::max(r.max_violation_sigma, zz);
      if (zz > z) ++r.violations;
    }
    // fine search for the maximiser of xi(theta) cos(theta - theta_w)
    double best = -INFINITY, arg = tw;
    const int steps = 20000;
    for (int i = 0; i <= steps; ++i) {
      const double th = tw - std::numbers::pi / 2 + std::numbers::pi * i / steps;
      const double val = xi(th) * std::cos(th - tw);
      if (val > best) best = val, arg = th;
    }
    r.argmax_theta.push_back(arg);
    r.max_angle_gap = std::max(r.max_angle_gap, std::abs(std::remainder(arg - p.theta_v, 2.0 * std::numbers::pi)));
    const double c = std::cos(p.theta_v - tw);
    r.equality_z.push_back((xi(p.theta_v) * c - p.xi_star.value) /
                           std::hypot(xi.stderr_at(p.theta_v) * c, p.xi_star.stderr));
  }
  return r;
}

// Support function reconstruction: xi(v) = min_w xi*(w) / <v, w>.
inline double xi_from_support(double theta_v, const std::vector<DirectionProfile>& full_circle) {
  double best = INFINITY;
  for (const auto& p : full_circle) {
    const double c = std::cos(theta_v - p.w.angle());
    if (c > 1e-9) best = std::min(best, p.xi_star.value / c);
  }
  return best;
}

struct ConvexityReport {
  std::vector<double> curvature_radius;  // h + h'' per grid point
  std::vector<double> curvature_err;
  double positive_fraction = 0.0;        // fraction with h + h'' > 2 sigma
  std::vector<double> bulge;             // outward distance of each boundary point from its neighbours' chord
  std::vector<std::size_t> facets;       // bulge within noise, i.e. three collinear boundary points
};

// Values r_i on the uniform periodic grid theta_i = 2 pi i / n, read two ways.
// As a support function, h + h'' is the radius of curvature of the boundary
// and must be positive. As radii of boundary points r_i (cos, sin)(theta_i), a
// point that sits on the chord of its neighbours flags a potential facet.
// `stride` widens both stencils to beat noise.
inline ConvexityReport convexity_check(const std::vector<double>& r, const std::vector<double>& sigma, int stride = 1,
                                       double facet_floor = 1e-6) {
  const std::size_t n = r.size();
  if (n < 3 || sigma.size() != n || stride < 1 || static_cast<std::size_t>(2 * stride) >= n)
    throw ContractError("invalid support-function grid");
  const double step = 2.0 * std::numbers::pi / static_cast<double>(n);
  const double d = step * stride;
  auto point = [&](std::size_t i) {
    const double t = step * static_cast<double>(i);
    return Vec2{r[i] * std::cos(t), r[i] * std::sin(t)};
  };
  ConvexityReport rep;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = (i + n - static_cast<std::size_t>(stride)) % n, b = (i + static_cast<std::size_t>(stride)) % n;
    const double rho = r[i] + (r[a] - 2.0 * r[i] + r[b]) / (d * d);
    const double c0 = 1.0 - 2.0 / (d * d), c1 = 1.0 / (d * d);
    const double err = std::sqrt(c0 * c0 * sigma[i] * sigma[i] + c1 * c1 * (sigma[a] * sigma[a] + sigma[b] * sigma[b]));
    rep.curvature_radius.push_back(rho);
    rep.curvature_err.push_back(err);
    if (rho > 2.0 * err && rho > facet_floor * r[i]) ++pos;

    const Vec2 pa = point(a), pb = point(b), pi = point(i);
    const double cx = pb.x - pa.x, cy = pb.y - pa.y;
    const double bulge = (cy * (pi.x - pa.x) - cx * (pi.y - pa.y)) / std::hypot(cx, cy);
    const double berr = std::sqrt(sigma[i] * sigma[i] + 0.25 * (sigma[a] * sigma[a] + sigma[b] * sigma[b]));
    rep.bulge.push_back(bulge);
    if (bulge <= std::max(2.0 * berr, facet_floor * r[i])) rep.facets.push_back(i);
  }
  rep.positive_fraction = static_cast<double>(pos) / static_cast<double>(n);
  return rep;
}

// ---------------------------------------------------------------- CSV

inline void write_wulff_csv(std::ostream& os, const std::vector<DirectionProfile>& ps, const std::string& run_id,
                            bool header = true) {
  CsvWriter w(os, run_id);
  if (header)
    w.header({"theta_w", "zeta", "zeta_err", "mu", "mu_err", "sigma", "sigma_err", "theta_v", "theta_v_err", "xi_star",
              "xi_star_err", "xi", "xi_err", "L"});
  for (const auto& p : ps)
    w.row(p.w.angle(), p.zeta.value, p.zeta.stderr, p.mu, p.mu_err, p.sigma, p.sigma_err, p.theta_v, p.theta_v_err,
          p.xi_star.value, p.xi_star.stderr, p.xi_along_v.value, p.xi_along_v.stderr, p.L);
}

// ---------------------------------------------------------------- pipeline

struct WulffSpec {
  double p = 0.35;
  int directions = 16;  // per quadrant, theta_i = i pi / (2 directions)
  std::size_t samples = 100000000;
  std::size_t drift_samples = 20000000;
  int L = 1;
  int n_max = 40;
  int halfspace_lo = 6;
  double smooth = 3.0;
  int drift_prefilter = 4;
  int drift_lo = 6, drift_hi = 20;
  int field_radius = 40;
  std::size_t batches = 16;
  int grow_radius = 200;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

struct WulffResult {
  std::vector<DirectionProfile> quadrant;  // symmetrized
  std::vector<DirectionProfile> raw;       // before symmetrization
  double mirror_asymmetry = 0.0;
  XiField xi;
  std::vector<DirectXi> direct;
  DriftFit axis_drift;
  DualityReport duality;
  AngleMapReport angle_map;
  ConvexityReport convexity;
  ShapeApprox shapes;
};

inline std::vector<double> quadrant_angles(int directions) {
  std::vector<double> t;
  for (int i = 0; i < directions; ++i) t.push_back(std::numbers::pi / 2 * i / directions);
  return t;
}

// Half-space and two-point statistics in one pass over cluster samples, drift
// in a second pass, then profiles, shapes and the duality and convexity checks.
inline WulffResult run_wulff(const WulffSpec& s) {
  if (s.directions < 2) throw ContractError("need at least two directions per quadrant");
  const auto angles = quadrant_angles(s.directions);
  struct Pass {
    HalfspaceAccumulator h;
    TwoPointField t;
    void observe(const ClusterView& c, const PercolationGrower& g) {
      h.observe(c, g);
      t.observe(c, g);
    }
    void merge(const Pass& o) {
      h.merge(o.h);
      t.merge(o.t);
    }
  };
  const auto pass = accumulate_clusters(
      s.p, s.samples, s.seed, s.threads, s.grow_radius,
      Pass{HalfspaceAccumulator(dihedral_orbit(angles), s.n_max, s.batches), TwoPointField(s.field_radius, s.batches)});
  const int n_hi = s.n_max - static_cast<int>(std::ceil(s.smooth * 3.0)) - 1;
  const auto xs = dihedral_xi_star(pass.h, angles, s.halfspace_lo, n_hi, s.smooth);

  std::vector<Direction> dirs;
  for (double t : angles) dirs.push_back(Direction::from_angle(t));
  const auto drift = accumulate_clusters(s.p, s.drift_samples, s.seed ^ 0x9e3779b97f4a7c15ULL, s.threads, s.grow_radius,
                                         DriftAccumulator(dirs, s.L, s.drift_prefilter, s.drift_hi, s.batches));
  WulffResult r;
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    const auto d = fit_drift(drift, k, s.drift_lo, s.drift_hi);
    if (k == 0) r.axis_drift = d;
    LengthEstimate zeta = xs[k];
    zeta.value /= s.L;
    zeta.stderr /= s.L;
    zeta.method = "zeta";
    r.raw.push_back(direction_profile(dirs[k], s.L, zeta, d));
  }
  r.quadrant = r.raw;
  r.mirror_asymmetry = symmetrize_quadrant(r.quadrant);
  const auto full = dihedral_extend(r.quadrant);
  r.angle_map = angle_map_check(full, 0.0);

  r.xi = estimate_xi_field(pass.t);
  for (double t : angles) r.direct.push_back({t, r.xi(t), r.xi.stderr_at(t)});
  r.duality = duality_check(full, r.xi, 2.0);

  std::vector<double> h, sig;
  for (const auto& p : full) {
    h.push_back(p.xi_star.value);
    sig.push_back(p.xi_star.stderr);
  }
  r.convexity = convexity_check(h, sig);
  r.shapes = build_shapes(r.quadrant, r.direct, s.p, 1.0);
  return r;
}

}  // namespace ozlab
