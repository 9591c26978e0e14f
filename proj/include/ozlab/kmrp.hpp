#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ozlab/csv.hpp"
#include "ozlab/error.hpp"
#include "ozlab/rng.hpp"
#include "ozlab/stats.hpp"

namespace ozlab {

struct StepEntry {
  int tau = 1;      // step length in slices
  double x = 0.0;   // transverse displacement
  double prob = 0.0;
};

// Step law of a killed Markov renewal process. Interior masses sum to
// 1 - kappa. kappa == 0 marks a law that is already tilted or conditioned on
// survival. tail_rate > 0 declares that the table truncates a tail with
// P[tau > n] <= exp(-tail_rate n); 0 means the support really is finite.
struct StepLaw {
  double kappa = 0.0;
  std::vector<StepEntry> initial;
  std::vector<StepEntry> interior;
  double tail_rate = 0.0;

  double interior_mass() const {
    double s = 0.0;
    for (const auto& e : interior) s += e.prob;
    return s;
  }
  double initial_mass() const {
    double s = 0.0;
    for (const auto& e : initial) s += e.prob;
    return s;
  }
  int max_tau() const {
    int m = 0;
    for (const auto& e : interior) m = std::max(m, e.tau);
    return m;
  }
  // a_tau indexed by tau, index 0 unused.
  std::vector<double> tau_marginal() const {
    std::vector<double> a(static_cast<std::size_t>(max_tau()) + 1, 0.0);
    for (const auto& e : interior) a[static_cast<std::size_t>(e.tau)] += e.prob;
    return a;
  }
  int tau_gcd() const {
    int g = 0;
    for (const auto& e : interior)
      if (e.prob > 0) g = std::gcd(g, e.tau);
    return g;
  }

  void validate() const {
    if (!(kappa >= 0.0 && kappa < 1.0)) throw ContractError("kappa must lie in [0, 1)");
    if (interior.empty()) throw ContractError("interior law is empty");
    for (const auto* table : {&initial, &interior})
      for (const auto& e : *table) {
        if (e.tau < 1) throw ContractError("step lengths must be positive");
        if (!(e.prob >= 0.0) || !std::isfinite(e.x)) throw ContractError("bad step law entry");
      }
    if (std::abs(interior_mass() - (1.0 - kappa)) > 1e-12)
      throw ContractError("interior masses must sum to 1 - kappa");
    if (!initial.empty()) {
      const double s = initial_mass();
      if (!(s > 0.0 && s <= 1.0 + 1e-12)) throw ContractError("initial survival mass must lie in (0, 1]");
    }
    if (tail_rate < 0.0) throw ContractError("tail rate must be non-negative");
    if (tail_rate > 0.0) {
      const auto a = tau_marginal();
      double tail = interior_mass();
      for (std::size_t n = 0; n < a.size(); ++n) {
        tail -= a[n];
        if (tail > std::exp(-tail_rate * static_cast<double>(n)) * (1 + 1e-12) + 1e-15)
          throw ContractError("table violates the declared tail rate");
      }
    }
  }

  static StepLaw geometric(double kappa) {
    StepLaw l;
    l.kappa = kappa;
    l.interior = {{1, 0.0, 1.0 - kappa}};
    l.initial = {{1, 0.0, 1.0}};
    return l;
  }
};

inline nlohmann::json to_json(const StepLaw& law) {
  auto table = [](const std::vector<StepEntry>& t) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& e : t) a.push_back({e.tau, e.x, e.prob});
    return a;
  };
  return {{"kappa", law.kappa}, {"initial", table(law.initial)}, {"interior", table(law.interior)},
          {"tail_rate", law.tail_rate}};
}

inline StepLaw step_law_from_json(const nlohmann::json& j) {
  auto table = [](const nlohmann::json& a) {
    std::vector<StepEntry> t;
    for (const auto& r : a) {
      if (!r.is_array() || r.size() != 3) throw ContractError("step law rows are [tau, x, prob]");
      t.push_back({r[0].get<int>(), r[1].get<double>(), r[2].get<double>()});
    }
    return t;
  };
  StepLaw l;
  l.kappa = j.at("kappa").get<double>();
  l.interior = table(j.at("interior"));
  if (j.contains("initial")) l.initial = table(j.at("initial"));
  if (j.contains("tail_rate")) l.tail_rate = j.at("tail_rate").get<double>();
  l.validate();
  return l;
}

// Generating function A(z) = sum a_tau z^tau and its derivative.
inline double gen_a(const std::vector<double>& a, double z) {
  double s = 0.0;
  for (std::size_t k = a.size(); k-- > 1;) s = (s + a[k]) * z;
  return s;
}
inline double gen_a_prime(const std::vector<double>& a, double z) {
  double s = 0.0;
  for (std::size_t k = a.size(); k-- > 1;) s = s * z + static_cast<double>(k) * a[k];
  return s;
}

struct RateSolution {
  double R_p = 1.0;
  double zeta = INFINITY;        // 1 / log R_p
  double amplitude = 1.0;        // p_n ~ amplitude R_p^-n
  double R_a = INFINITY;         // radius of convergence of A (lower bound when declared)
  double mass_gap_margin = INFINITY;
};

inline RateSolution solve_rate(const StepLaw& law) {
  law.validate();
  if (!(law.kappa > 0.0)) throw ContractError("solve_rate needs a killed law (kappa > 0)");
  if (law.tau_gcd() != 1) throw PeriodicLawError("step length support has gcd " + std::to_string(law.tau_gcd()));
  const auto a = law.tau_marginal();
  RateSolution r;
  r.R_a = law.tail_rate > 0.0 ? std::exp(law.tail_rate) : INFINITY;
  double lo = 1.0, hi;
  if (std::isfinite(r.R_a)) {
    hi = r.R_a;
    if (gen_a(a, hi * (1 - 1e-15)) < 1.0) throw NoMassGapError("A(z) stays below 1 up to the radius of convergence");
  } else {
    hi = 2.0;
    while (gen_a(a, hi) < 1.0) {
      lo = hi;
      hi *= 2.0;
      if (!std::isfinite(hi)) throw NoMassGapError("A(z) never reaches 1");
    }
  }
  // bisection, then Newton polish
  for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (gen_a(a, mid) < 1.0 ? lo : hi) = mid;
  }
  double z = 0.5 * (lo + hi);
  for (int i = 0; i < 5; ++i) {
    const double step = (gen_a(a, z) - 1.0) / gen_a_prime(a, z);
    z -= step;
    if (std::abs(step) < 1e-17 * z) break;
  }
  r.R_p = z;
  r.zeta = 1.0 / std::log(z);
  r.amplitude = 1.0 / (z * gen_a_prime(a, z));
  r.mass_gap_margin = r.R_a - r.R_p;
  return r;
}

// Renewal probabilities p_n, survival-without-renewal c_n and survival s_n.
// Killed steps die immediately after the renewal, so c_n = sum_{tau > n} a_tau
// for n >= 1 and c_0 = 1.
struct RenewalSeries {
  std::vector<double> p, c, s;
};

inline RenewalSeries convolve_renewal(const StepLaw& law, std::size_t n_max) {
  law.validate();
  const auto a = law.tau_marginal();
  RenewalSeries r;
  r.p.assign(n_max + 1, 0.0);
  r.c.assign(n_max + 1, 0.0);
  r.s.assign(n_max + 1, 0.0);
  r.p[0] = 1.0;
  for (std::size_t n = 1; n <= n_max; ++n) {
    double v = 0.0;
    for (std::size_t k = 1; k <= std::min(n, a.size() - 1); ++k) v += a[k] * r.p[n - k];
    r.p[n] = v;
  }
  r.c[0] = 1.0;
  for (std::size_t n = 1; n <= n_max; ++n) {
    double t = 0.0;
    for (std::size_t k = n + 1; k < a.size(); ++k) t += a[k];
    r.c[n] = t;
  }
  for (std::size_t n = 0; n <= n_max; ++n) {
    double v = 0.0;
    for (std::size_t k = 0; k <= n; ++k) v += r.p[k] * r.c[n - k];
    r.s[n] = v;
  }
  return r;
}

struct AsymptoticReport {
  RateSolution rate;
  std::vector<double> deviation;  // |p_n R_p^n R_p A'(R_p) - 1|
  double p_decay_rate = 0.0;      // fitted -log-slope of p_n
  double c_decay_rate = INFINITY; // fitted -log-slope of c_n (infinite once c_n vanishes)
  bool c_decays_faster = true;
};

inline AsymptoticReport asymptotic_check(const StepLaw& law, std::size_t n_max) {
  AsymptoticReport rep;
  rep.rate = solve_rate(law);
  const auto series = convolve_renewal(law, n_max);
  const double lr = std::log(rep.rate.R_p);
  rep.deviation.resize(n_max + 1);
  for (std::size_t n = 0; n <= n_max; ++n)
    rep.deviation[n] = std::abs(std::exp(std::log(series.p[n]) + lr * static_cast<double>(n)) / rep.rate.amplitude - 1.0);
  const std::size_t n0 = n_max / 2;
  rep.p_decay_rate = (std::log(series.p[n0]) - std::log(series.p[n_max])) / static_cast<double>(n_max - n0);
  if (series.c[n_max] > 0.0 && series.c[n0] > 0.0)
    rep.c_decay_rate = (std::log(series.c[n0]) - std::log(series.c[n_max])) / static_cast<double>(n_max - n0);
  rep.c_decays_faster = rep.c_decay_rate > rep.p_decay_rate;
  return rep;
}

// Multiply interior masses by factor^tau and renormalise to total mass 1.
inline StepLaw tilt(const StepLaw& law, double factor) {
  StepLaw t = law;
  t.kappa = 0.0;
  double s = 0.0;
  for (auto& e : t.interior) s += (e.prob *= std::pow(factor, e.tau));
  for (auto& e : t.interior) e.prob /= s;
  if (law.tail_rate > 0.0) t.tail_rate = std::max(0.0, law.tail_rate - std::log(factor));
  return t;
}

// Law conditioned on survival at exponential scale: a_tilde = R_p^tau a.
inline StepLaw tilted_law(const StepLaw& law, double R_p) {
  if (!(R_p >= 1.0)) throw ContractError("tilt factor must be at least 1");
  StepLaw t = law;
  t.kappa = 0.0;
  for (auto& e : t.interior) e.prob *= std::pow(R_p, e.tau);
  // exact tilt sums to A(R_p) = 1; renormalise only the rounding residue
  double s = 0.0;
  for (const auto& e : t.interior) s += e.prob;
  for (auto& e : t.interior) e.prob /= s;
  if (law.tail_rate > 0.0) t.tail_rate = std::max(0.0, law.tail_rate - std::log(R_p));
  return t;
}

// Interior law normalised to mass one.
inline StepLaw conditional_interior(const StepLaw& law) { return tilt(law, 1.0); }

struct StepMoments {
  double mean_tau = 0.0, mean_x = 0.0;
  double mu = 0.0;      // drift per slice
  double sigma2 = 0.0;  // diffusivity per slice
};

inline StepMoments step_moments(const StepLaw& law) {
  double mass = 0.0, et = 0.0, ex = 0.0;
  for (const auto& e : law.interior) mass += e.prob, et += e.prob * e.tau, ex += e.prob * e.x;
  if (!(mass > 0.0)) throw ContractError("empty interior law");
  StepMoments m;
  m.mean_tau = et / mass;
  m.mean_x = ex / mass;
  m.mu = m.mean_x / m.mean_tau;
  double v = 0.0;
  for (const auto& e : law.interior) {
    const double d = e.x - m.mu * e.tau;
    v += e.prob * d * d;
  }
  m.sigma2 = v / mass / m.mean_tau;
  return m;
}

// Samples (tau, x) from a table, with an optional kill outcome.
class StepSampler {
 public:
  StepSampler() = default;
  StepSampler(const std::vector<StepEntry>& table, double kill_mass) : table_(table) {
    double s = kill_mass;
    kill_cut_ = kill_mass;
    for (const auto& e : table_) cum_.push_back(s += e.prob);
    total_ = s;
  }
  // Index into the table, or -1 when killed.
  int draw(Rng& rng) const {
    const double u = rng.uniform() * total_;
    if (u < kill_cut_) return -1;
    auto it = std::upper_bound(cum_.begin(), cum_.end(), u);
    if (it == cum_.end()) --it;
    return static_cast<int>(it - cum_.begin());
  }
  const StepEntry& entry(int i) const { return table_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<StepEntry> table_;
  std::vector<double> cum_;
  double kill_cut_ = 0.0, total_ = 1.0;
};

// X_t for t = 0..n with NaN after death; renewal indicator Y_t.
struct KmrpPath {
  std::vector<double> X;
  std::vector<char> Y;
  std::vector<int> renewals;
  bool alive() const { return !X.empty() && !std::isnan(X.back()); }
};

inline KmrpPath simulate(const StepLaw& law, std::size_t n, Rng& rng) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  KmrpPath path;
  path.X.assign(n + 1, nan);
  path.Y.assign(n + 1, 0);
  path.X[0] = 0.0;
  const double sigma1 = law.initial.empty() ? 1.0 : law.initial_mass();
  const StepSampler first(law.initial.empty() ? law.interior : law.initial, law.initial.empty() ? law.kappa : 1.0 - sigma1);
  const StepSampler inner(law.interior, law.kappa);
  std::size_t t = 0;
  double x = 0.0;
  bool is_first = true;
  while (t < n) {
    const int k = (is_first ? first : inner).draw(rng);
    const StepSampler& src = is_first ? first : inner;
    is_first = false;
    if (k < 0) return path;  // dead from t + 1 on
    const auto& e = src.entry(k);
    const std::size_t end = t + static_cast<std::size_t>(e.tau);
    for (std::size_t s = t + 1; s <= std::min(end, n); ++s)
      path.X[s] = x + e.x * static_cast<double>(s - t) / e.tau;
    x += e.x;
    t = end;
    if (t <= n) {
      path.Y[t] = 1;
      path.renewals.push_back(static_cast<int>(t));
    }
  }
  return path;
}

inline KmrpPath simulate(const StepLaw& law, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return simulate(law, n, rng);
}

namespace detail {

// Survival-conditioned frame simulation: first step from the normalised
// initial law, then interior steps from `inner` (mass one). Returns X at the
// requested times (interpolated between renewals).
inline void conditioned_frames(const StepSampler& first, const StepSampler& inner, std::size_t n,
                               const std::vector<std::size_t>& times, Rng& rng, std::vector<double>& out) {
  out.assign(times.size(), 0.0);
  std::size_t t = 0, j = 0;
  double x = 0.0;
  bool is_first = true;
  while (j < times.size()) {
    const StepSampler& src = is_first ? first : inner;
    int k;
    do k = src.draw(rng);
    while (k < 0);
    is_first = false;
    const auto& e = src.entry(k);
    const std::size_t end = t + static_cast<std::size_t>(e.tau);
    while (j < times.size() && times[j] <= end) {
      out[j] = x + e.x * static_cast<double>(times[j] - t) / e.tau;
      ++j;
    }
    x += e.x;
    t = end;
  }
  (void)n;
}

inline StepLaw survival_law(const StepLaw& law) {
  if (law.kappa > 0.0) return tilted_law(law, solve_rate(law).R_p);
  return conditional_interior(law);
}

}  // namespace detail

struct LocalCltReport {
  double mu = 0.0, sigma = 0.0;
  double ks_distance = 0.0, ks_p_value = 1.0;
  double local_sup_deviation = 0.0;  // sup_k |sqrt(n) P[bin k] / h - g_sigma(k h / sqrt(n))|
  double bin_width = 1.0;
  std::size_t trials = 0;
  // histogram of the normalized X_n on [-4, 4] with the standard Gaussian density
  std::vector<double> hist_z, hist_density, hist_gaussian;
};

// Local CLT under the survival-conditioned law. A killed law is tilted first;
// a law with kappa == 0 is used as it stands. The first step uses the
// untilted initial law, which shifts X_n by O(1).
inline LocalCltReport local_clt_check(const StepLaw& law, std::size_t n, std::size_t trials, std::uint64_t seed) {
  law.validate();
  if (law.tau_gcd() != 1) throw PeriodicLawError("step length support is periodic");
  const StepLaw t = detail::survival_law(law);
  const auto mom = step_moments(t);
  LocalCltReport rep;
  rep.mu = mom.mu;
  rep.sigma = std::sqrt(mom.sigma2);
  rep.trials = trials;
  if (!(rep.sigma > 0.0)) throw ContractError("degenerate transverse law");
  const StepSampler first(law.initial.empty() ? t.interior : law.initial, 0.0);
  const StepSampler inner(t.interior, 0.0);
  // lattice span of the transverse increments when they are integers
  long long span = 0;
  bool integral = true;
  for (const auto& e : t.interior) {
    if (e.x != std::round(e.x)) integral = false;
    span = std::gcd(span, static_cast<long long>(std::llabs(std::llround(e.x - t.interior[0].x))));
  }
  rep.bin_width = integral && span > 0 ? static_cast<double>(span) : 1.0;

  Rng rng(seed);
  std::vector<double> z;
  z.reserve(trials);
  std::vector<double> frame;
  const double sn = std::sqrt(static_cast<double>(n));
  const double center = static_cast<double>(n) * rep.mu;
  std::map<long long, std::size_t> bins;
  for (std::size_t i = 0; i < trials; ++i) {
    detail::conditioned_frames(first, inner, n, {n}, rng, frame);
    z.push_back((frame[0] - center) / (rep.sigma * sn));
    ++bins[std::llround((frame[0] - center) / rep.bin_width)];
  }
  constexpr int kBins = 80;
  constexpr double kEdge = 4.0, kWidth = 2.0 * kEdge / kBins;
  std::vector<std::size_t> counts(kBins, 0);
  for (double x : z)
    if (x >= -kEdge && x < kEdge) ++counts[static_cast<std::size_t>((x + kEdge) / kWidth)];
  for (int b = 0; b < kBins; ++b) {
    const double c = -kEdge + (b + 0.5) * kWidth;
    rep.hist_z.push_back(c);
    rep.hist_density.push_back(static_cast<double>(counts[static_cast<std::size_t>(b)]) / (static_cast<double>(trials) * kWidth));
    rep.hist_gaussian.push_back(normal_pdf(c, 1.0));
  }
  const auto ks = ks_test(z, normal_cdf);
  rep.ks_distance = ks.distance;
  rep.ks_p_value = ks.p_value;
  const double h = rep.bin_width;
  const long long kmax = static_cast<long long>(std::ceil(4.0 * rep.sigma * sn / h));
  for (long long k = -kmax; k <= kmax; ++k) {
    const auto it = bins.find(k);
    const double pk = it == bins.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(trials);
    rep.local_sup_deviation =
        std::max(rep.local_sup_deviation, std::abs(sn * pk / h - normal_pdf(static_cast<double>(k) * h / sn, rep.sigma)));
  }
  return rep;
}

struct BridgeReport {
  std::vector<double> t;
  std::vector<double> pinned_variance, bridge_theory;
  std::vector<double> free_variance, linear_theory;
  std::size_t pinned = 0, trials = 0;
  double mu = 0.0, sigma = 0.0;
  double max_rel_dev_pinned = 0.0, max_rel_dev_free = 0.0;
};

// Variance profiles of X_{tn}: paths pinned by |X_n - n mu| <= pin sigma sqrt(n)
// against sigma^2 n t (1 - t), and all paths against sigma^2 n t.
inline BridgeReport bridge_statistics(const StepLaw& law, std::size_t n, std::size_t trials, std::uint64_t seed,
                                      std::vector<double> ts = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9},
                                      double pin = 0.1) {
  law.validate();
  const StepLaw tl = detail::survival_law(law);
  const auto mom = step_moments(tl);
  BridgeReport rep;
  rep.mu = mom.mu;
  rep.sigma = std::sqrt(mom.sigma2);
  rep.trials = trials;
  rep.t = ts;
  const StepSampler first(law.initial.empty() ? tl.interior : law.initial, 0.0);
  const StepSampler inner(tl.interior, 0.0);
  std::vector<std::size_t> times;
  for (double t : ts) times.push_back(static_cast<std::size_t>(std::llround(t * static_cast<double>(n))));
  times.push_back(n);
  std::vector<RunningStats> pinned(ts.size()), all(ts.size());
  Rng rng(seed);
  std::vector<double> frame;
  const double sn = std::sqrt(static_cast<double>(n));
  for (std::size_t i = 0; i < trials; ++i) {
    detail::conditioned_frames(first, inner, n, times, rng, frame);
    const bool is_pinned = std::abs(frame.back() - static_cast<double>(n) * rep.mu) <= pin * rep.sigma * sn;
    rep.pinned += is_pinned;
    for (std::size_t j = 0; j < ts.size(); ++j) {
      all[j].add(frame[j]);
      if (is_pinned) pinned[j].add(frame[j]);
    }
  }
  const double s2n = mom.sigma2 * static_cast<double>(n);
  for (std::size_t j = 0; j < ts.size(); ++j) {
    const double tt = static_cast<double>(times[j]) / static_cast<double>(n);
    rep.pinned_variance.push_back(pinned[j].variance());
    rep.bridge_theory.push_back(s2n * tt * (1 - tt));
    rep.free_variance.push_back(all[j].variance());
    rep.linear_theory.push_back(s2n * tt);
    rep.max_rel_dev_pinned =
        std::max(rep.max_rel_dev_pinned, std::abs(rep.pinned_variance.back() / rep.bridge_theory.back() - 1));
    rep.max_rel_dev_free = std::max(rep.max_rel_dev_free, std::abs(rep.free_variance.back() / rep.linear_theory.back() - 1));
  }
  return rep;
}

// Seeded law with killing, support 2..7 in tau and transverse steps in {-1, 0, 1}.
inline StepLaw random_step_law(std::uint64_t seed) {
  Rng rng(seed);
  const int support = 2 + static_cast<int>(rng() % 6);
  const double kappa = 0.05 + 0.5 * rng.uniform();
  StepLaw l;
  l.kappa = kappa;
  std::vector<double> w;
  double s = 0.0;
  for (int t = 1; t <= support; ++t) w.push_back(rng.uniform() + 0.05), s += w.back();
  for (int t = 1; t <= support; ++t)
    for (int x = -1; x <= 1; ++x)
      l.interior.push_back({t, static_cast<double>(x), (1 - kappa) * w[static_cast<std::size_t>(t - 1)] / s / 3.0});
  l.initial = {{1, 0.0, 0.5}, {2, 1.0, 0.3}};
  return l;
}

inline void write_rates_csv_header(std::ostream& os) {
  os << "run_id,R_p,zeta,amplitude,mass_gap_margin,kappa,mu,sigma\n";
}

inline void write_rates_csv_row(std::ostream& os, const std::string& run_id, const StepLaw& law, const RateSolution& r) {
  const auto m = step_moments(tilted_law(law, r.R_p));
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", run_id.c_str(), r.R_p, r.zeta,
                r.amplitude, r.mass_gap_margin, law.kappa, m.mu, std::sqrt(m.sigma2));
  os << buf;
}

inline void write_clt_csv(std::ostream& os, const LocalCltReport& r, std::size_t n, const std::string& run_id) {
  CsvWriter w(os, run_id);
  w.header({"n", "z", "density", "gaussian", "mu", "sigma", "ks_distance", "ks_p_value"});
  for (std::size_t i = 0; i < r.hist_z.size(); ++i)
    w.row(n, r.hist_z[i], r.hist_density[i], r.hist_gaussian[i], r.mu, r.sigma, r.ks_distance, r.ks_p_value);
}

inline void write_bridge_csv(std::ostream& os, const BridgeReport& r, std::size_t n, const std::string& run_id) {
  CsvWriter w(os, run_id);
  w.header({"n", "t", "pinned_variance", "bridge_theory", "free_variance", "linear_theory", "pinned", "trials"});
  for (std::size_t i = 0; i < r.t.size(); ++i)
    w.row(n, r.t[i], r.pinned_variance[i], r.bridge_theory[i], r.free_variance[i], r.linear_theory[i], r.pinned, r.trials);
}

}  // namespace ozlab
