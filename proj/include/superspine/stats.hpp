#pragma once

// Small sample statistics used by the Monte Carlo checks.

#include <algorithm>
#include <cmath>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "superspine/parallel.hpp"

namespace superspine {

struct MeanSE {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

/// Mean and standard error over the finite entries of v.
inline MeanSE mean_se(const std::vector<double>& v) {
  std::vector<double> f;
  f.reserve(v.size());
  for (double x : v)
    if (std::isfinite(x)) f.push_back(x);
  MeanSE r;
  r.n = f.size();
  if (f.empty()) return r;
  r.mean = pairwise_sum(f) / static_cast<double>(f.size());
  if (f.size() < 2) return r;
  std::vector<double> sq(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) sq[i] = (f[i] - r.mean) * (f[i] - r.mean);
  r.se = std::sqrt(pairwise_sum(sq) / static_cast<double>(f.size() - 1) / static_cast<double>(f.size()));
  return r;
}

/// Median; +inf entries (capped replicates) count as larger than everything.
inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  const std::size_t h = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  const double hi = v[h];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h));
  return 0.5 * (lo + hi);
}

/// |a - b| measured in units of the combined standard error.
inline double z_score(const MeanSE& a, double b) { return a.se > 0 ? std::abs(a.mean - b) / a.se : (a.mean == b ? 0.0 : INFINITY); }
inline double z_score(const MeanSE& a, const MeanSE& b) {
  const double s = std::sqrt(a.se * a.se + b.se * b.se);
  return s > 0 ? std::abs(a.mean - b.mean) / s : (a.mean == b.mean ? 0.0 : INFINITY);
}

/// Asymptotic Kolmogorov-Smirnov p-value for a one-sample statistic D on n points.
inline double ks_pvalue(double D, std::size_t n) {
  const double sn = std::sqrt(static_cast<double>(n));
  const double lam = (sn + 0.12 + 0.11 / sn) * D;
  if (lam < 1e-3) return 1.0;
  double s = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lam * lam);
    s += (k % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

/// One-sample KS statistic of samples against a CDF.
template <class Cdf>
double ks_statistic(std::vector<double> xs, Cdf&& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double D = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double F = cdf(xs[i]);
    D = std::max({D, F - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - F});
  }
  return D;
}

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double pvalue = 1.0;
};

/// Pearson goodness of fit of counts against expected probabilities; bins with
/// expected count below 5 are merged into their neighbour.
inline ChiSquareResult chi_square_gof(const std::vector<double>& counts, const std::vector<double>& probs) {
  double total = 0.0;
  for (double c : counts) total += c;
  std::vector<double> oc, ec;
  double o = 0.0, e = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    o += counts[k];
    e += probs[k] * total;
    if (e >= 5.0) {
      oc.push_back(o);
      ec.push_back(e);
      o = e = 0.0;
    }
  }
  if (e > 0.0 && !ec.empty()) {
    oc.back() += o;
    ec.back() += e;
  }
  ChiSquareResult r;
  for (std::size_t k = 0; k < oc.size(); ++k) r.statistic += (oc[k] - ec[k]) * (oc[k] - ec[k]) / ec[k];
  r.dof = oc.size() > 1 ? oc.size() - 1 : 1;
  boost::math::chi_squared dist(static_cast<double>(r.dof));
  r.pvalue = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

}  // namespace superspine
