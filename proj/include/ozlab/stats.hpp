#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include "ozlab/error.hpp"

namespace ozlab {

// Welford accumulator.
class RunningStats {
 public:
  void add(double x) {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
  }
  void merge(const RunningStats& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double n = static_cast<double>(n_ + o.n_);
    const double d = o.mean_ - mean_;
    mean_ += d * static_cast<double>(o.n_) / n;
    m2_ += o.m2_ + d * d * static_cast<double>(n_) * static_cast<double>(o.n_) / n;
    n_ += o.n_;
  }
  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double stderr_of_mean() const { return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : INFINITY; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0, m2_ = 0.0;
};

struct Estimate {
  double value = 0.0;
  double stderr = 0.0;
  std::size_t samples = 0;
};

inline Estimate binomial_estimate(std::size_t successes, std::size_t trials) {
  if (trials == 0) return {0.0, INFINITY, 0};
  const double p = static_cast<double>(successes) / static_cast<double>(trials);
  return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(trials)), trials};
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double normal_pdf(double x, double sigma = 1.0) {
  return std::exp(-0.5 * x * x / (sigma * sigma)) / (sigma * std::sqrt(2.0 * M_PI));
}

// Integrated autocorrelation time with Sokal's self-consistent window (c = 6).
// Clamped below at 1/2, the value for independent samples.
inline double integrated_autocorrelation_time(const std::vector<double>& x, double c = 6.0) {
  const std::size_t n = x.size();
  if (n < 4) return 0.5;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double c0 = 0.0;
  for (double v : x) c0 += (v - mean) * (v - mean);
  c0 /= static_cast<double>(n);
  if (!(c0 > 0.0)) return 0.5;
  double tau = 0.5;
  for (std::size_t t = 1; t < n / 2; ++t) {
    double ct = 0.0;
    for (std::size_t i = 0; i + t < n; ++i) ct += (x[i] - mean) * (x[i + t] - mean);
    ct /= static_cast<double>(n);
    tau += ct / c0;
    if (static_cast<double>(t) >= c * tau) break;
  }
  return std::max(0.5, tau);
}

// Standard error of the mean of a correlated series from non-overlapping
// batch means.
inline double batch_means_stderr(const std::vector<double>& x, std::size_t batches = 32) {
  if (x.size() < 2 * batches) batches = std::max<std::size_t>(2, x.size() / 2);
  if (x.size() < 2) return INFINITY;
  const std::size_t len = x.size() / batches;
  RunningStats s;
  for (std::size_t b = 0; b < batches; ++b) {
    double m = 0.0;
    for (std::size_t i = b * len; i < (b + 1) * len; ++i) m += x[i];
    s.add(m / static_cast<double>(len));
  }
  return std::sqrt(s.variance() / static_cast<double>(batches));
}

struct ChiSquareResult {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
  std::size_t bins = 0;  // after pooling
};

// Pearson goodness of fit. Bins whose expected count is below `min_expected`
// are pooled into one bin; if the pool itself stays small it joins the
// smallest regular bin.
inline ChiSquareResult chi_square_test(const std::vector<double>& observed, const std::vector<double>& probs,
                                       std::size_t fitted_params = 0, double min_expected = 5.0) {
  if (observed.size() != probs.size()) throw ContractError("observed and expected sizes differ");
  const double n = std::accumulate(observed.begin(), observed.end(), 0.0);
  const double ptot = std::accumulate(probs.begin(), probs.end(), 0.0);
  std::vector<std::pair<double, double>> bins;  // (observed, expected)
  double pool_o = 0.0, pool_e = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = n * probs[i] / ptot;
    if (e < min_expected) {
      pool_o += observed[i];
      pool_e += e;
    } else {
      bins.emplace_back(observed[i], e);
    }
  }
  if (pool_e > 0.0) {
    if (pool_e >= min_expected || bins.empty()) {
      bins.emplace_back(pool_o, pool_e);
    } else {
      auto it = std::min_element(bins.begin(), bins.end(), [](auto& a, auto& b) { return a.second < b.second; });
      it->first += pool_o;
      it->second += pool_e;
    }
  }
  ChiSquareResult r;
  r.bins = bins.size();
  for (auto [o, e] : bins) r.statistic += (o - e) * (o - e) / e;
  r.dof = static_cast<double>(bins.size()) - 1.0 - static_cast<double>(fitted_params);
  if (r.dof < 1.0) {
    r.dof = 0.0;
    r.p_value = 1.0;
    return r;
  }
  boost::math::chi_squared dist(r.dof);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

// Asymptotic Kolmogorov distribution tail P[K > x].
inline double kolmogorov_tail(double x) {
  if (x <= 0.0) return 1.0;
  if (x < 0.2) return 1.0;
  double s = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * x * x);
    s += (k % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-17) break;
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

struct KsResult {
  double distance = 0.0;
  double p_value = 1.0;
};

// One-sample KS test against a continuous CDF.
template <class Cdf>
KsResult ks_test(std::vector<double> xs, Cdf&& cdf) {
  if (xs.empty()) throw InsufficientDataError("KS test on an empty sample");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  return {d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d)};
}

struct LinearFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd covariance;  // from the weights, not rescaled
  std::vector<double> residuals;
  double chi2 = 0.0;
  std::size_t dof = 0;
};

// Weighted least squares y ~ X beta with weights 1/sigma^2.
inline LinearFit weighted_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  if (X.rows() != y.size() || w.size() != y.size()) throw ContractError("least squares dimension mismatch");
  if (X.rows() < X.cols()) throw FitError("fewer data points than parameters");
  const Eigen::VectorXd sw = w.cwiseSqrt();
  const Eigen::MatrixXd A = sw.asDiagonal() * X;
  const Eigen::VectorXd b = sw.asDiagonal() * y;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < X.cols()) throw FitError("design matrix is rank deficient");
  LinearFit f;
  f.beta = qr.solve(b);
  f.covariance = (A.transpose() * A).inverse();
  const Eigen::VectorXd r = y - X * f.beta;
  f.residuals.assign(r.data(), r.data() + r.size());
  f.chi2 = (sw.asDiagonal() * r).squaredNorm();
  f.dof = static_cast<std::size_t>(X.rows() - X.cols());
  return f;
}

// Straight line y = a + b x; returns (a, b) in beta.
inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& sigma) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd Y(n), W(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = x[static_cast<std::size_t>(i)];
    Y(i) = y[static_cast<std::size_t>(i)];
    const double s = sigma[static_cast<std::size_t>(i)];
    W(i) = 1.0 / (s * s);
  }
  return weighted_least_squares(X, Y, W);
}

}  // namespace ozlab
