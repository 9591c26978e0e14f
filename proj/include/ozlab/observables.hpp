#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ozlab/csv.hpp"
#include "ozlab/error.hpp"
#include "ozlab/geometry.hpp"
#include "ozlab/graph.hpp"
#include "ozlab/parallel.hpp"
#include "ozlab/percolation.hpp"
#include "ozlab/sampler.hpp"
#include "ozlab/stats.hpp"

namespace ozlab {

enum class BcKind { free, wired };

inline BcKind bc_kind_from_string(const std::string& s) {
  if (s == "free") return BcKind::free;
  if (s == "wired") return BcKind::wired;
  throw ContractError("unknown boundary condition '" + s + "'");
}

inline BoundaryCondition make_bc(const FiniteGraph& g, BcKind k) {
  return k == BcKind::free ? BoundaryCondition::free(g) : BoundaryCondition::wired(g);
}

struct LengthEstimate {
  double value = 0.0;
  double stderr = 0.0;
  double window_lo = 0.0, window_hi = 0.0;
  std::string method;
  bool censored = false;
};

// How samples are drawn: i.i.d. product measure for q = 1, a chain otherwise.
struct SampleSpec {
  std::size_t samples = 10000;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  BcKind bc = BcKind::free;
  SamplerSpec chain{};
};

namespace detail {

// Averages f(config, clusters) over samples on g and returns mean and stderr.
// Chain samples get batch-means errors.
inline Estimate average_over_samples(const FiniteGraph& g, const ModelParams& m, const SampleSpec& s,
                                     const std::function<double(const BondConfig&, DisjointSets&)>& f) {
  std::vector<double> xs;
  xs.reserve(s.samples);
  if (m.q == 1.0) {
    Rng rng(s.seed, s.stream);
    for (std::size_t i = 0; i < s.samples; ++i) {
      const auto w = sample_bernoulli(g, m.p, rng);
      auto ds = open_clusters(g, w);
      xs.push_back(f(w, ds));
    }
    RunningStats st;
    for (double x : xs) st.add(x);
    return {st.mean(), st.stderr_of_mean(), xs.size()};
  }
  SamplerSpec spec = s.chain;
  spec.seed = s.seed;
  spec.stream = s.stream;
  const auto bc = make_bc(g, s.bc);
  sample_chain(g, m, bc, spec, s.samples, [&](const BondConfig& w, std::size_t) {
    auto ds = open_clusters(g, w);
    xs.push_back(f(w, ds));
  });
  RunningStats st;
  for (double x : xs) st.add(x);
  return {st.mean(), batch_means_stderr(xs), xs.size()};
}

}  // namespace detail

// Left-right open crossing of a rectangle of vertices.
inline bool crosses_horizontally(const FiniteGraph& g, DisjointSets& ds) {
  if (!g.box()) throw ContractError("crossing needs a box graph");
  const Box& b = *g.box();
  std::vector<std::size_t> left;
  for (int y = b.ymin; y <= b.ymax; ++y) left.push_back(ds.find(static_cast<std::size_t>(g.index_of({b.xmin, y}))));
  std::sort(left.begin(), left.end());
  for (int y = b.ymin; y <= b.ymax; ++y)
    if (std::binary_search(left.begin(), left.end(), ds.find(static_cast<std::size_t>(g.index_of({b.xmax, y})))))
      return true;
  return false;
}

inline Estimate crossing_probability(const Box& box, const ModelParams& m, const SampleSpec& s) {
  m.validate();
  const auto g = FiniteGraph::box(box);
  return detail::average_over_samples(g, m, s, [&](const BondConfig&, DisjointSets& ds) {
    return crosses_horizontally(g, ds) ? 1.0 : 0.0;
  });
}

inline Estimate crossing_probability(int n, const ModelParams& m, const SampleSpec& s) {
  if (n < 1) throw ContractError("crossing box radius must be at least 1");
  return crossing_probability(Box::centered(n), m, s);
}

// Smallest n whose crossing estimate for Lambda_n leaves [delta, 1 - delta],
// found by doubling then bisection. Each n uses its own stream so the result
// does not depend on the search path. The stderr is one lattice unit when a
// bracketing estimate sits within two standard errors of the threshold.
inline LengthEstimate characteristic_length(const ModelParams& m, double delta, int n_max, SampleSpec s) {
  if (!(delta > 0.0 && delta < 0.5)) throw ContractError("delta must lie in (0, 0.5)");
  if (n_max < 1) throw ContractError("n_max must be at least 1");
  std::map<int, Estimate> cache;
  auto est = [&](int n) {
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    SampleSpec sn = s;
    sn.stream = s.stream + static_cast<std::uint64_t>(n);
    return cache[n] = crossing_probability(n, m, sn);
  };
  auto outside = [&](int n) {
    const double v = est(n).value;
    return v < delta || v > 1.0 - delta;
  };
  auto near = [&](int n) {
    const auto e = est(n);
    return std::min(std::abs(e.value - delta), std::abs(e.value - (1.0 - delta))) < 2.0 * e.stderr;
  };
  LengthEstimate out;
  out.method = "crossing";
  int lo = 0, hi = 1;
  while (!outside(hi)) {
    lo = hi;
    if (hi == n_max) {
      out.value = n_max;
      out.censored = true;
      out.window_lo = out.window_hi = n_max;
      return out;
    }
    hi = std::min(2 * hi, n_max);
  }
  while (hi - lo > 1) {
    const int mid = lo + (hi - lo) / 2;
    (outside(mid) ? hi : lo) = mid;
  }
  out.value = hi;
  out.window_lo = lo;
  out.window_hi = hi;
  out.stderr = (near(hi) || (lo > 0 && near(lo))) ? 1.0 : 0.0;
  return out;
}

// Accumulates statistics over i.i.d. q = 1 clusters of the origin. Acc needs
// observe(const ClusterView&, const PercolationGrower&) and merge(const Acc&).
// Blocks draw from stream = block index and merge in order.
template <class Acc>
Acc accumulate_clusters(double p, std::size_t samples, std::uint64_t seed, unsigned threads, int radius,
                        const Acc& proto, std::size_t block = std::size_t{1} << 16) {
  Acc total = proto;
  std::vector<PercolationGrower> growers;
  for (unsigned i = 0; i < std::max(1u, threads); ++i) growers.emplace_back(p, radius);
  const std::size_t blocks = (samples + block - 1) / block;
  std::function<Acc(std::size_t)> work = [&](std::size_t b) {
    Acc acc = proto;
    auto& grower = growers[b % growers.size()];
    Rng rng(seed, b);
    const std::size_t n = std::min(block, samples - b * block);
    for (std::size_t i = 0; i < n; ++i) acc.observe(grower.grow(rng), grower);
    return acc;
  };
  std::function<bool(std::size_t, Acc&)> merge = [&](std::size_t, Acc& acc) {
    total.merge(acc);
    return true;
  };
  run_blocks<Acc>(blocks, threads, work, merge);
  return total;
}

inline Estimate one_arm(int R, const ModelParams& m, const SampleSpec& s, unsigned threads = 1) {
  if (R < 0) throw ContractError("radius must be non-negative");
  if (R == 0) return {1.0, 0.0, s.samples};
  m.validate();
  if (m.q == 1.0) {
    struct Acc {
      int R = 0;
      std::size_t hits = 0, n = 0;
      void observe(const ClusterView& c, const PercolationGrower&) {
        ++n;
        for (const auto& v : c.vertices)
          if (std::max(std::abs(v.x), std::abs(v.y)) >= R) {
            ++hits;
            return;
          }
      }
      void merge(const Acc& o) { hits += o.hits, n += o.n; }
    };
    const auto a = accumulate_clusters(m.p, s.samples, s.seed ^ s.stream, threads, 2 * R, Acc{R});
    return binomial_estimate(a.hits, a.n);
  }
  const auto g = FiniteGraph::box(Box::centered(2 * R));
  std::vector<std::size_t> sphere;
  for (const auto& v : g.vertices())
    if (std::max(std::abs(v.x), std::abs(v.y)) == R) sphere.push_back(static_cast<std::size_t>(g.index_of(v)));
  const auto o = static_cast<std::size_t>(g.index_of({0, 0}));
  return detail::average_over_samples(g, m, s, [&](const BondConfig&, DisjointSets& ds) {
    const auto r = ds.find(o);
    for (auto v : sphere)
      if (ds.find(v) == r) return 1.0;
    return 0.0;
  });
}

// ---------------------------------------------------------------- two-point

struct TwoPointPoint {
  int n = 0;
  LatticePoint target{};
  double estimate = 0.0;
  double stderr = 0.0;
  std::size_t successes = 0;
  std::size_t samples = 0;
  bool censored = false;
};

struct TwoPointCurve {
  Vec2 v{};
  std::vector<TwoPointPoint> points;
};

inline constexpr std::size_t kCensorFloor = 10;

// Two-point counts for q = 1 along several directions from the same clusters.
struct TwoPointAccumulator {
  struct Series {
    Vec2 v;
    std::vector<int> ns;
    std::vector<LatticePoint> targets;
    std::vector<int> l1;
    std::vector<std::size_t> hits;
  };
  std::vector<Series> series;
  std::size_t n = 0;

  TwoPointAccumulator() = default;
  explicit TwoPointAccumulator(const std::vector<std::pair<Vec2, std::vector<int>>>& requests) {
    for (const auto& [v, ns] : requests) {
      Series s{v, ns, {}, {}, std::vector<std::size_t>(ns.size(), 0)};
      for (int k : ns) {
        if (k < 0) throw ContractError("two-point distances must be non-negative");
        const auto t = round_to_lattice({k * v.x, k * v.y});
        s.targets.push_back(t);
        s.l1.push_back(std::abs(t.x) + std::abs(t.y));
      }
      series.push_back(std::move(s));
    }
  }

  int max_l1() const {
    int m = 0;
    for (const auto& s : series)
      for (int d : s.l1) m = std::max(m, d);
    return m;
  }

  void observe(const ClusterView& c, const PercolationGrower& g) {
    ++n;
    // a cluster with k vertices reaches l1 distance at most k - 1
    const int reach = static_cast<int>(c.vertices.size()) - 1;
    for (auto& s : series)
      for (std::size_t i = 0; i < s.targets.size(); ++i)
        if (s.l1[i] <= reach && g.contains(s.targets[i])) ++s.hits[i];
  }

  void merge(const TwoPointAccumulator& o) {
    n += o.n;
    for (std::size_t k = 0; k < series.size(); ++k)
      for (std::size_t i = 0; i < series[k].hits.size(); ++i) series[k].hits[i] += o.series[k].hits[i];
  }

  std::vector<TwoPointCurve> curves() const {
    std::vector<TwoPointCurve> out;
    for (const auto& s : series) {
      TwoPointCurve c{s.v, {}};
      for (std::size_t i = 0; i < s.ns.size(); ++i) {
        const auto e = binomial_estimate(s.hits[i], n);
        c.points.push_back({s.ns[i], s.targets[i], e.value, e.stderr, s.hits[i], n, s.hits[i] < kCensorFloor});
      }
      out.push_back(std::move(c));
    }
    return out;
  }
};

inline int default_radius(int reach) { return std::max(64, 4 * reach + 16); }

inline std::vector<TwoPointCurve> two_point_curves(double p, const std::vector<std::pair<Vec2, std::vector<int>>>& requests,
                                                   std::size_t samples, std::uint64_t seed, unsigned threads = 1,
                                                   int radius = 0) {
  TwoPointAccumulator proto(requests);
  if (radius <= 0) radius = default_radius(proto.max_l1());
  return accumulate_clusters(p, samples, seed, threads, radius, proto).curves();
}

inline TwoPointCurve two_point_curve(const Vec2& v, const std::vector<int>& ns, double p, std::size_t samples,
                                     std::uint64_t seed, unsigned threads = 1) {
  return two_point_curves(p, {{v, ns}}, samples, seed, threads).front();
}

// Two-point function from a chain on Lambda_R. Each configuration contributes
// the fraction of origins x0 with |x0|_inf <= origin_radius joined to x0 + target;
// errors come from batch means over configurations.
inline TwoPointCurve two_point_curve_chain(const Vec2& v, const std::vector<int>& ns, const ModelParams& m, int R,
                                           int origin_radius, const SampleSpec& s) {
  m.validate();
  const auto g = FiniteGraph::box(Box::centered(R));
  std::vector<LatticePoint> targets;
  for (int k : ns) targets.push_back(round_to_lattice({k * v.x, k * v.y}));
  std::vector<std::size_t> origins;
  for (int x = -origin_radius; x <= origin_radius; ++x)
    for (int y = -origin_radius; y <= origin_radius; ++y) origins.push_back(static_cast<std::size_t>(g.index_of({x, y})));
  std::vector<std::vector<std::size_t>> partner(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (int x = -origin_radius; x <= origin_radius; ++x)
      for (int y = -origin_radius; y <= origin_radius; ++y) {
        const auto j = g.index_of({x + targets[i].x, y + targets[i].y});
        if (j < 0) throw ContractError("two-point target leaves the sampling box");
        partner[i].push_back(static_cast<std::size_t>(j));
      }
  std::vector<std::vector<double>> series(targets.size());
  std::vector<std::size_t> hits(targets.size(), 0);
  auto record = [&](DisjointSets& ds) {
    for (std::size_t i = 0; i < targets.size(); ++i) {
      std::size_t h = 0;
      for (std::size_t k = 0; k < origins.size(); ++k) h += ds.find(origins[k]) == ds.find(partner[i][k]);
      hits[i] += h;
      series[i].push_back(static_cast<double>(h) / static_cast<double>(origins.size()));
    }
  };
  if (m.q == 1.0) {
    Rng rng(s.seed, s.stream);
    for (std::size_t c = 0; c < s.samples; ++c) {
      auto ds = open_clusters(g, sample_bernoulli(g, m.p, rng));
      record(ds);
    }
  } else {
    SamplerSpec spec = s.chain;
    spec.seed = s.seed;
    spec.stream = s.stream;
    sample_chain(g, m, make_bc(g, s.bc), spec, s.samples, [&](const BondConfig& w, std::size_t) {
      auto ds = open_clusters(g, w);
      record(ds);
    });
  }
  TwoPointCurve out{v, {}};
  for (std::size_t i = 0; i < targets.size(); ++i) {
    RunningStats st;
    for (double x : series[i]) st.add(x);
    out.points.push_back({ns[i], targets[i], st.mean(), batch_means_stderr(series[i]), hits[i], s.samples * origins.size(),
                          hits[i] < kCensorFloor});
  }
  return out;
}

// ---------------------------------------------------------------- xi fits

// oz adds 1/2 log x to log G; oz_next also fits the next c/x term of the expansion.
enum class Correction { none, oz, oz_next };
enum class Abscissa { index, distance };

struct XiFit {
  LengthEstimate xi;
  double intercept = 0.0;
  Correction correction = Correction::none;
  std::vector<double> x, y, residuals;
  double spread = 0.0;  // max minus min residual
  double chi2 = 0.0;
  std::size_t dof = 0;
  bool few_points = false;
};

namespace detail {

inline double abscissa_of(const TwoPointPoint& pt, Abscissa a) {
  return a == Abscissa::index ? static_cast<double>(pt.n) : std::hypot(pt.target.x, pt.target.y);
}

inline bool usable(const TwoPointPoint& pt) { return !pt.censored && pt.n >= 1 && pt.estimate > 0.0 && pt.stderr > 0.0; }

}  // namespace detail

// Weighted least squares of log G against c - x/xi (optionally - 1/2 log x)
// over points with x in [lo, hi].
inline XiFit fit_xi_window(const TwoPointCurve& curve, Correction corr, Abscissa a, double lo, double hi) {
  XiFit f;
  f.correction = corr;
  std::vector<double> sig;
  for (const auto& pt : curve.points) {
    if (!detail::usable(pt)) continue;
    const double x = detail::abscissa_of(pt, a);
    if (x < lo || x > hi) continue;
    f.x.push_back(x);
    f.y.push_back(std::log(pt.estimate) + (corr != Correction::none ? 0.5 * std::log(x) : 0.0));
    sig.push_back(pt.stderr / pt.estimate);
  }
  const std::size_t need = corr == Correction::oz_next ? 4 : 3;
  if (f.x.size() < need) throw FitError("too few usable points in the fit window");
  f.few_points = f.x.size() < need + 2;
  const auto k = static_cast<Eigen::Index>(f.x.size());
  Eigen::MatrixXd X(k, corr == Correction::oz_next ? 3 : 2);
  Eigen::VectorXd Y(k), W(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i);
    X(i, 0) = 1.0;
    X(i, 1) = f.x[j];
    if (X.cols() == 3) X(i, 2) = 1.0 / f.x[j];
    Y(i) = f.y[j];
    W(i) = 1.0 / (sig[j] * sig[j]);
  }
  const auto lf = weighted_least_squares(X, Y, W);
  const double b = lf.beta(1);
  if (!(b < 0.0)) throw FitError("two-point function does not decay over the fit window");
  f.intercept = lf.beta(0);
  f.xi.value = -1.0 / b;
  f.xi.stderr = std::sqrt(lf.covariance(1, 1)) / (b * b);
  f.xi.window_lo = lo;
  f.xi.window_hi = hi;
  f.xi.method = corr == Correction::oz ? "two_point_oz" : corr == Correction::oz_next ? "two_point_oz_next" : "two_point";
  f.residuals = lf.residuals;
  f.chi2 = lf.chi2;
  f.dof = lf.dof;
  const auto [mn, mx] = std::minmax_element(f.residuals.begin(), f.residuals.end());
  f.spread = *mx - *mn;
  return f;
}

// Window [2 xi, 6 xi] from an uncorrected fit, refined until the set of points
// in the window stops changing, then the requested fit on that window.
inline XiFit estimate_xi(const TwoPointCurve& curve, Correction corr, Abscissa a = Abscissa::index) {
  double xi = fit_xi_window(curve, Correction::none, a, 0.0, INFINITY).xi.value;
  std::size_t last = 0;
  for (int it = 0; it < 20; ++it) {
    XiFit pre;
    try {
      pre = fit_xi_window(curve, Correction::none, a, 2.0 * xi, 6.0 * xi);
    } catch (const FitError&) {
      break;
    }
    if (pre.x.size() == last && std::abs(pre.xi.value - xi) < 1e-12 * xi) break;
    last = pre.x.size();
    xi = pre.xi.value;
  }
  return fit_xi_window(curve, corr, a, 2.0 * xi, 6.0 * xi);
}

// ---------------------------------------------------------------- half-space

// reach[n] counts clusters with max <x, w> >= n, n = 0..n_max. fine[i] counts
// max <x, w> >= i / kFine and is empty for hand-built profiles.
struct HalfspaceProfile {
  static constexpr int kFine = 32;
  Direction w;
  std::vector<std::size_t> reach;
  std::size_t samples = 0;
  std::vector<std::size_t> fine = {};

  double hit(int n) const { return static_cast<double>(reach.at(static_cast<std::size_t>(n))) / static_cast<double>(samples); }
  Estimate hit_estimate(int n) const { return binomial_estimate(reach.at(static_cast<std::size_t>(n)), samples); }
  int n_max() const { return static_cast<int>(reach.size()) - 1; }
};

// Histograms of floor(kFine max <x, w>) per direction. With batches > 1 the
// counts are kept in groups by merge order for batch-spread errors.
struct HalfspaceAccumulator {
  std::vector<Direction> dirs;
  int n_max = 0;
  std::size_t batches = 1;
  std::vector<std::vector<std::vector<std::size_t>>> hist;  // [group][direction][bin]
  std::vector<std::size_t> n;                               // samples per group
  std::size_t merged = 0;

  HalfspaceAccumulator() = default;
  HalfspaceAccumulator(std::vector<Direction> d, int nmax, std::size_t batches_ = 1)
      : dirs(std::move(d)), n_max(nmax), batches(batches_), hist(1, empty_group()), n(1, 0) {
    if (batches < 1) throw ContractError("need at least one batch");
  }

  std::vector<std::vector<std::size_t>> empty_group() const {
    return std::vector<std::vector<std::size_t>>(
        dirs.size(), std::vector<std::size_t>(static_cast<std::size_t>(n_max) * HalfspaceProfile::kFine + 1, 0));
  }

  void observe(const ClusterView& c, const PercolationGrower&) {
    ++n[0];
    const double cap = static_cast<double>(n_max) * HalfspaceProfile::kFine;
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      double top = 0.0;
      for (const auto& v : c.vertices) top = std::max(top, dirs[k].along(v));
      // the nudge keeps lattice levels that are exact multiples in their own bin
      ++hist[0][k][static_cast<std::size_t>(std::min(std::floor(top * HalfspaceProfile::kFine + 1e-9), cap))];
    }
  }

  void merge(const HalfspaceAccumulator& o) {
    if (hist.size() < batches) {
      hist.resize(batches, empty_group());
      n.resize(batches, 0);
    }
    auto& dst = hist[merged % batches];
    for (std::size_t g = 0; g < o.hist.size(); ++g) {
      n[merged % batches] += o.n[g];
      for (std::size_t k = 0; k < dst.size(); ++k)
        for (std::size_t i = 0; i < dst[k].size(); ++i) dst[k][i] += o.hist[g][k][i];
    }
    ++merged;
  }

  std::size_t groups() const { return hist.size(); }

  // Profiles from one group, or from all groups when group < 0.
  std::vector<HalfspaceProfile> profiles(int group = -1) const {
    std::vector<HalfspaceProfile> out;
    std::size_t samples = 0;
    for (std::size_t g = 0; g < hist.size(); ++g)
      if (group < 0 || static_cast<std::size_t>(group) == g) samples += n[g];
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      HalfspaceProfile p{dirs[k], std::vector<std::size_t>(static_cast<std::size_t>(n_max) + 1, 0), samples,
                         std::vector<std::size_t>(hist[0][k].size(), 0)};
      for (std::size_t g = 0; g < hist.size(); ++g) {
        if (group >= 0 && static_cast<std::size_t>(group) != g) continue;
        std::size_t acc = 0;
        for (std::size_t i = hist[g][k].size(); i-- > 0;) p.fine[i] += acc += hist[g][k][i];
      }
      for (int m = 0; m <= n_max; ++m)
        p.reach[static_cast<std::size_t>(m)] = p.fine[static_cast<std::size_t>(m) * HalfspaceProfile::kFine];
      out.push_back(std::move(p));
    }
    return out;
  }
};

inline HalfspaceProfile halfspace_profile(const Direction& w, int n_max, double p, std::size_t samples,
                                          std::uint64_t seed, unsigned threads = 1, int radius = 0) {
  if (radius <= 0) radius = default_radius(n_max);
  return accumulate_clusters(p, samples, seed, threads, radius, HalfspaceAccumulator({w}, n_max)).profiles().front();
}

inline Estimate halfspace_hit(const HalfspaceProfile& prof, int n, int L = 1) { return prof.hit_estimate(n * L); }

struct SlabRatio {
  int m = 0;
  double ratio = 0.0;
  double stderr = 0.0;
  std::size_t numerator = 0, denominator = 0;
};

// r_m = hit(m L) / hit((m - 1) L) with binomial errors given the denominator.
inline std::vector<SlabRatio> slab_ratios(const HalfspaceProfile& prof, int L) {
  if (L < 1) throw ContractError("slice length L must be at least 1");
  std::vector<SlabRatio> out;
  for (int m = 1; m * L <= prof.n_max(); ++m) {
    const auto num = prof.reach[static_cast<std::size_t>(m * L)], den = prof.reach[static_cast<std::size_t>((m - 1) * L)];
    if (den == 0) break;
    const double r = static_cast<double>(num) / static_cast<double>(den);
    out.push_back({m, r, std::sqrt(r * (1.0 - r) / static_cast<double>(den)), num, den});
  }
  return out;
}

// Last contiguous run of ratios (m >= m_min) whose relative error is at most
// rel_tol. Returns an empty range when none qualifies.
inline std::pair<int, int> resolvable_window(const std::vector<SlabRatio>& rs, double rel_tol = 0.004, int m_min = 2) {
  int hi = -1, lo = -1;
  for (auto it = rs.rbegin(); it != rs.rend(); ++it) {
    const bool ok = it->m >= m_min && it->numerator > 0 && it->stderr <= rel_tol * it->ratio;
    if (ok && hi < 0) hi = lo = it->m;
    else if (ok && it->m == lo - 1) lo = it->m;
    else if (hi >= 0) break;
  }
  return {lo, hi};
}

// Pooled ratio over slabs m in [m_lo, m_hi] and zeta = -1 / log r.
inline LengthEstimate estimate_zeta(const HalfspaceProfile& prof, int L, int m_lo, int m_hi) {
  if (m_lo < 1 || m_hi < m_lo || m_hi * L > prof.n_max()) throw ContractError("invalid slab window");
  double num = 0.0, den = 0.0;
  for (int m = m_lo; m <= m_hi; ++m) {
    num += static_cast<double>(prof.reach[static_cast<std::size_t>(m * L)]);
    den += static_cast<double>(prof.reach[static_cast<std::size_t>((m - 1) * L)]);
  }
  if (num < kCensorFloor) throw InsufficientDataError("too few clusters reach the slab window");
  const double r = num / den;
  const double sr = std::sqrt(r * (1.0 - r) / den);
  const double lr = std::log(r);
  LengthEstimate e;
  e.value = -1.0 / lr;
  e.stderr = sr / (r * lr * lr);
  e.window_lo = m_lo;
  e.window_hi = m_hi;
  e.method = "halfspace_ratio";
  return e;
}

// zeta from the resolvable window at slab granularity L.
inline LengthEstimate estimate_zeta(const HalfspaceProfile& prof, int L) {
  const auto [lo, hi] = resolvable_window(slab_ratios(prof, L));
  if (lo < 0) throw InsufficientDataError("no resolvable slab ratios");
  return estimate_zeta(prof, L, lo, hi);
}

// (max - min) / mean of the ratios r_m for m in [m_lo, m_hi].
inline double ratio_variation(const std::vector<SlabRatio>& rs, int m_lo, int m_hi) {
  double lo = INFINITY, hi = -INFINITY, sum = 0.0;
  int n = 0;
  for (const auto& r : rs)
    if (r.m >= m_lo && r.m <= m_hi) {
      lo = std::min(lo, r.ratio);
      hi = std::max(hi, r.ratio);
      sum += r.ratio;
      ++n;
    }
  if (n == 0) throw ContractError("empty ratio window");
  return (hi - lo) / (sum / n);
}

struct WindowSplit {
  LengthEstimate first, second;
  double z = 0.0;  // |difference| in joint standard errors
};

// zeta on [m_lo, mid] and [mid + 1, m_hi] with mid the floor midpoint.
inline WindowSplit split_window_zeta(const HalfspaceProfile& prof, int L, int m_lo, int m_hi) {
  if (m_hi <= m_lo) throw InsufficientDataError("window too short to split");
  const int mid = m_lo + (m_hi - m_lo) / 2;
  WindowSplit s{estimate_zeta(prof, L, m_lo, mid), estimate_zeta(prof, L, mid + 1, m_hi), 0.0};
  s.z = std::abs(s.first.value - s.second.value) / std::hypot(s.first.stderr, s.second.stderr);
  return s;
}

// Primitive integer vector (a, b) parallel to w with |a|, |b| <= max_entry, if any.
inline std::optional<std::pair<int, int>> rational_direction(const Direction& w, int max_entry = 6) {
  const Vec2 u = w.w();
  for (int a = -max_entry; a <= max_entry; ++a)
    for (int b = -max_entry; b <= max_entry; ++b) {
      if ((a == 0 && b == 0) || std::gcd(a, b) != 1) continue;
      const double nrm = std::hypot(a, b);
      if (std::abs(u.x - a / nrm) < 1e-9 && std::abs(u.y - b / nrm) < 1e-9) return std::pair{a, b};
    }
  return std::nullopt;
}

// Point-to-hyperplane length in lattice units. Each step ratio R(n) / R(n - 1)
// is treated as binomial given R(n - 1) with success probability
// exp(-step / xi*), and xi* is the maximum likelihood value over n in
// (n_lo, n_hi]. Lattice points put a staircase into the counts: for a rational
// direction (a, b) the event only changes at multiples of 1 / |(a, b)|, and
// near-rational directions show the same pattern blurred. With fine counts R(n)
// is their geometric mean over thresholds in [n, n + W'), where W' is `smooth`
// rounded up to a whole number of level spacings, so an exponential tail stays
// exponential with unit steps. Without fine counts R = reach and the steps are
// the level gaps. With unit levels and no smoothing this is the pooled ratio.
inline LengthEstimate estimate_xi_star(const HalfspaceProfile& prof, int n_lo, int n_hi, double smooth = 3.0) {
  if (n_lo < 0 || n_hi <= n_lo || n_hi > prof.n_max()) throw ContractError("invalid half-space window");
  const auto ab = rational_direction(prof.w);
  const double g = ab ? std::hypot(ab->first, ab->second) : 1.0;
  const bool fine = !prof.fine.empty() && smooth > 0.0;
  const double width = ab ? std::ceil(smooth * g - 1e-9) / g : smooth;
  const auto bins = static_cast<std::size_t>(std::lround(width * HalfspaceProfile::kFine));
  if (fine && (static_cast<std::size_t>(n_hi) * HalfspaceProfile::kFine + bins > prof.fine.size() ||
               (n_hi + width) * HalfspaceProfile::kFine + 1 > static_cast<double>(prof.fine.size())))
    throw ContractError("smoothing window runs past the recorded range");
  auto level = [&](int n) { return fine || !ab ? static_cast<double>(n) : std::ceil(n * g - 1e-9) / g; };
  auto log_count_at = [&](double a) {  // log #(max along >= a) from the fine counts
    const auto c = prof.fine[static_cast<std::size_t>(std::floor(a * HalfspaceProfile::kFine + 1e-9))];
    return c == 0 ? -INFINITY : std::log(static_cast<double>(c));
  };
  auto count = [&](int n) {
    if (!fine) return static_cast<double>(prof.reach[static_cast<std::size_t>(n)]);
    double s = 0.0;
    if (ab) {
      // #(max along >= a) is constant on (L_{k-1}, L_k] for the levels L_k = k / g
      const double a0 = n, a1 = n + width;
      for (auto k = static_cast<long>(std::ceil(a0 * g - 1e-9));; ++k) {
        const double lk = k / g, lo = std::max(a0, (k - 1) / g), hi = std::min(a1, lk);
        if (hi > lo) s += (hi - lo) * log_count_at(lk);
        if (lk >= a1) break;
      }
      s /= width;
    } else {
      for (std::size_t j = 0; j < bins; ++j)
        s += log_count_at(n + (static_cast<double>(j) + 0.5) / HalfspaceProfile::kFine);
      s /= static_cast<double>(bins);
    }
    return std::isfinite(s) ? std::exp(s) : 0.0;
  };
  struct Step {
    double d, num, den;
  };
  std::vector<Step> st;
  double total = 0.0;
  for (int n = n_lo + 1; n <= n_hi; ++n) {
    const double d = level(n) - level(n - 1), num = count(n), den = count(n - 1);
    if (num == 0.0) break;
    if (d < 1e-9) continue;  // same level, no information
    st.push_back({d, num, den});
    total += num;
  }
  if (total < kCensorFloor) throw InsufficientDataError("too few clusters reach the half-space window");
  // The score is decreasing in lambda, so bisection finds the root.
  auto score = [&](double lam) {
    double s = 0.0;
    for (const auto& x : st) {
      const double e = std::exp(-lam * x.d);
      s += x.d * ((x.den - x.num) * e / (1.0 - e) - x.num);
    }
    return s;
  };
  double lo = 1e-6, hi = 1.0;
  while (score(hi) > 0.0) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (score(mid) > 0.0 ? lo : hi) = mid;
  }
  const double lam = 0.5 * (lo + hi);
  double info = 0.0;
  for (const auto& x : st) {
    const double e = std::exp(-lam * x.d);
    info += x.den * x.d * x.d * e / (1.0 - e);
  }
  LengthEstimate e;
  e.value = 1.0 / lam;
  e.stderr = 1.0 / std::sqrt(info) / (lam * lam);
  e.window_lo = n_lo;
  e.window_hi = n_hi;
  e.method = fine ? "halfspace_xi_star_smoothed" : "halfspace_xi_star";
  return e;
}

// ---------------------------------------------------------------- CSV

inline void write_two_point_csv(std::ostream& os, const std::vector<TwoPointCurve>& curves, const std::string& run_id,
                                bool header = true) {
  CsvWriter w(os, run_id);
  if (header) w.header({"direction", "vx", "vy", "n", "target_x", "target_y", "estimate", "stderr", "samples", "successes", "censored"});
  for (const auto& c : curves)
    for (const auto& pt : c.points)
      w.row(std::atan2(c.v.y, c.v.x), c.v.x, c.v.y, pt.n, pt.target.x, pt.target.y, pt.estimate, pt.stderr, pt.samples,
            pt.successes, pt.censored);
}

inline void write_lengths_csv(std::ostream& os, const std::vector<LengthEstimate>& ls, const std::string& run_id,
                              bool header = true) {
  CsvWriter w(os, run_id);
  if (header) w.header({"method", "value", "stderr", "window_lo", "window_hi", "censored"});
  for (const auto& l : ls) w.row(l.method, l.value, l.stderr, l.window_lo, l.window_hi, l.censored);
}

inline void write_halfspace_csv(std::ostream& os, const std::vector<HalfspaceProfile>& ps, const std::string& run_id,
                                bool header = true) {
  CsvWriter w(os, run_id);
  if (header) w.header({"direction", "n", "reach", "samples", "hit", "stderr"});
  for (const auto& p : ps)
    for (int n = 0; n <= p.n_max(); ++n) {
      const auto e = p.hit_estimate(n);
      w.row(p.w.angle(), n, p.reach[static_cast<std::size_t>(n)], p.samples, e.value, e.stderr);
    }
}

inline void write_ratios_csv(std::ostream& os, const HalfspaceProfile& p, int L, const std::string& run_id,
                             bool header = true) {
  CsvWriter w(os, run_id);
  if (header) w.header({"direction", "L", "m", "ratio", "stderr", "numerator", "denominator"});
  for (const auto& r : slab_ratios(p, L)) w.row(p.w.angle(), L, r.m, r.ratio, r.stderr, r.numerator, r.denominator);
}

}  // namespace ozlab
