#pragma once

// Monte Carlo side: switched diffusion paths, the phi-spine with marks and its
// series, the fixed-mass particle approximation of the superprocess, the spine
// decomposition run, and a path estimator for non-local Feynman-Kac weights.
//
// Time stepping is Euler-Maruyama for positions with a Brownian-bridge
// correction for killing. Type switches and branching events use exact
// exponential clocks with the position frozen over the step.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "superspine/errors.hpp"
#include "superspine/evolve.hpp"
#include "superspine/grid.hpp"
#include "superspine/model.hpp"
#include "superspine/parallel.hpp"
#include "superspine/rng.hpp"
#include "superspine/spectral.hpp"
#include "superspine/stats.hpp"

namespace superspine {

inline constexpr double kMaxRateStep = 0.1;

namespace detail {

/// Coefficients on a fine uniform mesh over the closed interval, nearest-node lookup.
struct RateTable {
  double lo = 0.0, hi = 1.0, dx = 0.0;
  std::size_t n = 0, K = 0;
  std::vector<double> drift, sigma, a;           // [c*K + k]
  std::vector<double> death, birth, cluster;     // b, b n~, b lambda_F
  std::vector<double> switch_rate;               // -q_ii
  std::vector<double> p, p_cdf, q_cdf;           // [(c*K + i)*K + j]

  std::size_t cell(double x) const {
    const double s = (x - lo) / dx + 0.5;
    if (s <= 0.0) return 0;
    return std::min(static_cast<std::size_t>(s), n - 1);
  }
};

inline RateTable build_rate_table(const ModelSpec& spec, std::size_t cells = 4096) {
  const auto& iv = spec.interval();
  RateTable t;
  t.lo = iv.lo;
  t.hi = iv.hi;
  t.K = spec.K;
  t.n = cells + 1;
  t.dx = (iv.hi - iv.lo) / static_cast<double>(cells);
  const std::size_t K = spec.K;
  t.drift.resize(t.n * K);
  t.sigma.resize(t.n * K);
  t.a.resize(t.n * K);
  t.death.resize(t.n * K);
  t.birth.resize(t.n * K);
  t.cluster.resize(t.n * K);
  t.switch_rate.resize(t.n * K);
  t.p.resize(t.n * K * K);
  t.p_cdf.resize(t.n * K * K);
  t.q_cdf.resize(t.n * K * K);
  for (std::size_t c = 0; c < t.n; ++c) {
    const double x = std::clamp(iv.lo + static_cast<double>(c) * t.dx, iv.lo, iv.hi);
    for (std::size_t i = 0; i < K; ++i) {
      const std::size_t r = c * K + i;
      t.drift[r] = spec.a_prime(i, x);
      t.a[r] = spec.a(i, x);
      t.sigma[r] = std::sqrt(2.0 * std::max(t.a[r], 0.0));
      t.death[r] = spec.b(x, i);
      t.birth[r] = spec.b(x, i) * std::max(spec.n_tilde(x, i), 0.0);
      t.cluster[r] = spec.b(x, i) * spec.lambda_F(x, i);
      double out = 0.0, cp = 0.0;
      for (std::size_t j = 0; j < K; ++j) {
        const double pij = spec.p(x, i, j);
        t.p[r * K + j] = pij;
        cp += pij;
        t.p_cdf[r * K + j] = cp;
        if (j != i) out += spec.q(x, i, j);
        t.q_cdf[r * K + j] = out;
      }
      t.switch_rate[r] = out;
      for (std::size_t j = 0; j < K; ++j) {
        t.p_cdf[r * K + j] = cp > 0.0 ? t.p_cdf[r * K + j] / cp : static_cast<double>(j + 1) / static_cast<double>(K);
        t.q_cdf[r * K + j] = out > 0.0 ? t.q_cdf[r * K + j] / out : 1.0;
      }
      t.p_cdf[r * K + K - 1] = 1.0;
      t.q_cdf[r * K + K - 1] = 1.0;
    }
  }
  return t;
}

inline std::size_t pick_cdf(const double* cdf, std::size_t K, double u) {
  for (std::size_t j = 0; j + 1 < K; ++j)
    if (u < cdf[j]) return j;
  return K - 1;
}

/// Probability that a Brownian bridge between x0 and x1 (variance 2a per unit time) leaves (lo, hi).
inline double bridge_exit_probability(double x0, double x1, double lo, double hi, double a, double dt) {
  const double s = a * dt;
  const double pl = std::exp(-(x0 - lo) * (x1 - lo) / s);
  const double ph = std::exp(-(hi - x0) * (hi - x1) / s);
  return 1.0 - (1.0 - pl) * (1.0 - ph);
}

/// One Euler step with killing; returns false when the particle is killed.
inline bool move(const RateTable& t, double& x, std::size_t k, double dt, double sqdt, Rng& rng,
                 std::normal_distribution<double>& normal) {
  const std::size_t r = t.cell(x) * t.K + k;
  const double x1 = x + t.drift[r] * dt + t.sigma[r] * sqdt * normal(rng);
  if (!(x1 > t.lo && x1 < t.hi)) return false;
  if (uniform_open(rng) < bridge_exit_probability(x, x1, t.lo, t.hi, t.a[r], dt)) return false;
  x = x1;
  return true;
}

inline double max_switch_rate(const RateTable& t) {
  return *std::max_element(t.switch_rate.begin(), t.switch_rate.end());
}

inline void check_rate_step(double max_rate, double dt, const char* what) {
  if (max_rate * dt > kMaxRateStep) {
    std::ostringstream os;
    os << what << ": max rate * dt = " << max_rate * dt << " exceeds " << kMaxRateStep;
    throw StabilityError(os.str(), kMaxRateStep / max_rate);
  }
}

inline void check_horizon(double T, double dt) {
  if (!(T > 0.0) || !std::isfinite(T)) throw ArgumentError("horizon must be positive and finite");
  if (!(dt > 0.0) || dt > T) throw ArgumentError("time step must be in (0, T]");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// switched diffusion
// ---------------------------------------------------------------------------

struct JumpEvent {
  double time = 0.0;
  double x = 0.0;
  std::size_t pre = 0;
  std::size_t post = 0;
};

struct SwitchedPath {
  double dt = 0.0;
  double horizon = 0.0;
  std::vector<double> times;      ///< step ends, recorded when requested
  std::vector<double> positions;
  std::vector<std::size_t> types;
  std::vector<JumpEvent> jumps;
  bool killed = false;
  double kill_time = kInf;
  double final_x = 0.0;
  std::size_t final_type = 0;
};

/// Switched diffusion (L + Q) killed on leaving D.
class SwitchedSampler {
 public:
  SwitchedSampler(const ModelSpec& spec, double dt) : table_(detail::build_rate_table(spec)), dt_(dt) {
    if (!(dt > 0.0)) throw ArgumentError("time step must be positive");
    detail::check_rate_step(detail::max_switch_rate(table_), dt, "switched diffusion");
  }

  const detail::RateTable& table() const { return table_; }
  double dt() const { return dt_; }

  /// Advances (x, i) by one step of length h <= dt. on_jump(s, x, pre, post) sees every switch
  /// (s is the offset inside the step), on_hold(x, type, ds) every constant-type piece.
  template <class OnJump, class OnHold>
  bool step(double& x, std::size_t& i, double h, Rng& rng, std::normal_distribution<double>& normal, OnJump&& on_jump,
            OnHold&& on_hold) const {
    if (!detail::move(table_, x, i, h, std::sqrt(h), rng, normal)) return false;
    const std::size_t K = table_.K;
    const std::size_t c = table_.cell(x);
    double s = 0.0;
    for (;;) {
      const double r = table_.switch_rate[c * K + i];
      const double e = r > 0.0 ? exponential(rng, r) : kInf;
      if (s + e >= h) {
        on_hold(x, i, h - s);
        return true;
      }
      on_hold(x, i, e);
      s += e;
      const std::size_t j = detail::pick_cdf(&table_.q_cdf[(c * K + i) * K], K, uniform_open(rng));
      on_jump(s, x, i, j);
      i = j;
    }
  }

 private:
  detail::RateTable table_;
  double dt_;
};

inline SwitchedPath sim_switched(const ModelSpec& spec, double x0, std::size_t i0, double T, double dt, Rng& rng,
                                 bool record = true) {
  detail::check_point(spec, x0);
  detail::check_type(spec, i0);
  detail::check_horizon(T, dt);
  const SwitchedSampler sampler(spec, dt);
  const std::size_t nsteps = detail::step_count(T, dt);
  const double h = T / static_cast<double>(nsteps);
  std::normal_distribution<double> normal;
  SwitchedPath path;
  path.dt = h;
  path.horizon = T;
  double x = x0;
  std::size_t i = i0;
  if (record) {
    path.times.push_back(0.0);
    path.positions.push_back(x);
    path.types.push_back(i);
  }
  for (std::size_t n = 0; n < nsteps; ++n) {
    const double t0 = static_cast<double>(n) * h;
    const bool alive = sampler.step(
        x, i, h, rng, normal,
        [&](double s, double xs, std::size_t pre, std::size_t post) { path.jumps.push_back({t0 + s, xs, pre, post}); },
        [](double, std::size_t, double) {});
    if (!alive) {
      path.killed = true;
      path.kill_time = t0 + h;
      break;
    }
    if (record) {
      path.times.push_back(t0 + h);
      path.positions.push_back(x);
      path.types.push_back(i);
    }
  }
  path.final_x = x;
  path.final_type = i;
  return path;
}

// ---------------------------------------------------------------------------
// spine
// ---------------------------------------------------------------------------

struct SpineStart {
  bool stationary = true;  ///< phi^2 start when true, else the point (x0, i0)
  double x0 = 0.0;
  std::size_t i0 = 0;

  static SpineStart point(double x, std::size_t i) { return {false, x, i}; }
  static SpineStart invariant() { return {}; }
};

/// The phi-transformed switched diffusion: drift a' + 2a d log phi, switch rate b n pi(phi)/phi,
/// destination law p~. Positions are clamped half a cell inside D.
class SpineSampler {
 public:
  SpineSampler(const PhiTransform& tr, double dt) : tr_(&tr), tab_(&tr.table()), dt_(dt) {
    if (!(dt > 0.0)) throw ArgumentError("time step must be positive");
    const double rmax = *std::max_element(tab_->rate.begin(), tab_->rate.end());
    detail::check_rate_step(rmax, dt, "spine");
    const Grid& g = *tr.spectral().grid;
    lo_ = g.lo + tr.clamp_margin();
    hi_ = g.hi - tr.clamp_margin();
    // phi^2 weights per node and type for the stationary start.
    const auto& d = tr.invariant_density;
    cdf_.resize(d.size());
    double acc = 0.0;
    for (std::size_t r = 0; r < d.size(); ++r) {
      acc += std::max(d.values[static_cast<Eigen::Index>(r)], 0.0);
      cdf_[r] = acc;
    }
    for (double& c : cdf_) c /= acc;
  }

  const PhiTransform& transform() const { return *tr_; }
  double dt() const { return dt_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

  /// Draws a start according to weights w(m, k) on the grid (phi^2 by default).
  std::pair<double, std::size_t> draw_start(const SpineStart& st, Rng& rng) const { return draw_start(st, rng, cdf_); }

  std::pair<double, std::size_t> draw_start(const SpineStart& st, Rng& rng, const std::vector<double>& cdf) const {
    if (!st.stationary) {
      detail::check_point(tr_->spec(), st.x0);
      detail::check_type(tr_->spec(), st.i0);
      return {std::clamp(st.x0, lo_, hi_), st.i0};
    }
    const Grid& g = *tr_->spectral().grid;
    const std::size_t K = tr_->spec().K;
    const double u = uniform_open(rng);
    const auto r = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    const std::size_t idx = std::min(r, cdf.size() - 1);
    const double x = g.nodes[idx / K] + (uniform_open(rng) - 0.5) * g.h;
    return {std::clamp(x, lo_, hi_), idx % K};
  }

  /// One step; on_jump(s, x, pre, post) with s the offset inside the step.
  template <class OnJump>
  void step(double& x, std::size_t& i, double& hazard, Rng& rng, std::normal_distribution<double>& normal,
            OnJump&& on_jump) const {
    const SpineTable& T = *tab_;
    const std::size_t K = T.K;
    auto [c, f] = T.locate(x);
    const double drift = T.lerp(T.drift, c, f, i);
    const double sig = T.lerp(T.sigma, c, f, i);
    x = std::clamp(x + drift * dt_ + sig * std::sqrt(dt_) * normal(rng), lo_, hi_);
    std::tie(c, f) = T.locate(x);
    const std::size_t cn = f < 0.5 ? c : c + 1;
    double s = 0.0;
    for (;;) {
      const double r = T.rate[cn * K + i];
      if (r * (dt_ - s) < hazard) {
        hazard -= r * (dt_ - s);
        return;
      }
      s += hazard / r;
      hazard = exponential(rng, 1.0);
      const double u = uniform_open(rng);
      const double* row = &T.ptilde[(cn * K + i) * K];
      double acc = 0.0;
      std::size_t j = K - 1;
      for (std::size_t l = 0; l < K; ++l) {
        acc += row[l];
        if (u < acc) {
          j = l;
          break;
        }
      }
      on_jump(s, x, i, j);
      i = j;
    }
  }

 private:
  const PhiTransform* tr_;
  const SpineTable* tab_;
  double dt_;
  double lo_ = 0.0, hi_ = 0.0;
  std::vector<double> cdf_;
};

inline SwitchedPath sim_spine(const PhiTransform& tr, double T, double dt, Rng& rng,
                              const SpineStart& start = SpineStart::invariant(), bool record = true) {
  detail::check_horizon(T, dt);
  const std::size_t nsteps = detail::step_count(T, dt);
  const double h = T / static_cast<double>(nsteps);
  const SpineSampler sampler(tr, h);
  std::normal_distribution<double> normal;
  auto [x, i] = sampler.draw_start(start, rng);
  double hazard = exponential(rng, 1.0);
  SwitchedPath path;
  path.dt = h;
  path.horizon = T;
  if (record) {
    path.times.reserve(nsteps + 1);
    path.positions.reserve(nsteps + 1);
    path.types.reserve(nsteps + 1);
    path.times.push_back(0.0);
    path.positions.push_back(x);
    path.types.push_back(i);
  }
  for (std::size_t n = 0; n < nsteps; ++n) {
    const double t0 = static_cast<double>(n) * h;
    sampler.step(x, i, hazard, rng, normal, [&](double s, double xs, std::size_t pre, std::size_t post) {
      path.jumps.push_back({t0 + s, xs, pre, post});
    });
    if (record) {
      path.times.push_back(t0 + h);
      path.positions.push_back(x);
      path.types.push_back(i);
    }
  }
  path.final_x = x;
  path.final_type = i;
  return path;
}

/// Binned occupation of the spine over [burn_in, T], normalized to a probability per (bin, type).
struct Occupation {
  std::size_t bins = 0;
  std::size_t K = 0;
  std::vector<double> counts;  ///< [bin*K + k]
};

inline Occupation spine_occupation(const SwitchedPath& path, double lo, double hi, std::size_t bins, std::size_t K,
                                   double burn_in = 0.0, std::size_t stride = 1) {
  Occupation oc{bins, K, std::vector<double>(bins * K, 0.0)};
  for (std::size_t n = 0; n < path.times.size(); n += std::max<std::size_t>(stride, 1)) {
    if (path.times[n] < burn_in) continue;
    const double s = (path.positions[n] - lo) / (hi - lo) * static_cast<double>(bins);
    const auto b = std::min(static_cast<std::size_t>(std::max(s, 0.0)), bins - 1);
    oc.counts[b * K + path.types[n]] += 1.0;
  }
  return oc;
}

/// phi^2 mass per (bin, type), from the piecewise-linear phi.
inline std::vector<double> invariant_bin_probabilities(const PhiTransform& tr, std::size_t bins) {
  const Grid& g = *tr.spectral().grid;
  const std::size_t K = tr.spec().K;
  std::vector<double> p(bins * K, 0.0);
  const double w = (g.hi - g.lo) / static_cast<double>(bins);
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      const double a = g.lo + w * static_cast<double>(b);
      const double v = detail::integrate([&](double x) { return std::pow(tr.phi_at(x, k), 2); }, a, a + w);
      p[b * K + k] = v;
      total += v;
    }
  for (double& v : p) v /= total;
  return p;
}

// ---------------------------------------------------------------------------
// marks and the spine series
// ---------------------------------------------------------------------------

struct SpineRealization {
  SwitchedPath path;
  JumpConvention convention = JumpConvention::PreJump;
  std::vector<double> log_marks;  ///< -inf for a zero mark
  std::vector<double> log_terms;  ///< log(e^{-lambda1 s} m_s pi(X_s, c; phi))
  std::vector<double> log_kappa;  ///< log pi(X_s, c; phi)
};

inline std::size_t convention_type(const JumpEvent& j, JumpConvention c) {
  return c == JumpConvention::PreJump ? j.pre : j.post;
}

/// Independent marks m_s ~ F~(X_s, c) at every jump, c the convention type.
inline SpineRealization sim_marks(const PhiTransform& tr, SwitchedPath path, Rng& rng) {
  const ModelSpec& spec = tr.spec();
  SpineRealization r;
  r.convention = spec.convention;
  r.log_marks.reserve(path.jumps.size());
  for (const auto& j : path.jumps) {
    const std::size_t c = convention_type(j, spec.convention);
    const double lm = ftilde(spec, j.x, c).sample_log(rng);
    const double kappa = tr.pi_phi_at(j.x, c);
    r.log_marks.push_back(lm);
    r.log_kappa.push_back(std::log(kappa));
    r.log_terms.push_back(lm + std::log(kappa) - tr.lambda1 * j.time);
  }
  r.path = std::move(path);
  return r;
}

/// Per-replicate series values at one checkpoint.
struct SeriesPoint {
  double S = 0.0;               ///< partial sum (may be +inf for heavy tails)
  double log_S = -kInf;
  double log_max_term = -kInf;  ///< running max of the terms, log scale
  std::size_t big_marks = 0;    ///< jumps with m_s pi(phi) > 1
};

struct SeriesCheckpointStats {
  double T = 0.0;
  MeanSE mean_S;
  double median_S = 0.0;
  double median_log_S = 0.0;
  std::vector<double> exceedance;  ///< fraction with max term > L, per threshold
  double mean_big_marks = 0.0;
};

struct SeriesStats {
  std::vector<double> checkpoints;
  std::vector<double> thresholds;
  std::vector<SeriesCheckpointStats> rows;
  double max_stable_fraction = 0.0;  ///< replicates whose running max is unchanged after the first checkpoint
  std::size_t replicates = 0;

  /// Exceedance fractions nondecreasing in T for every threshold; `strict` also requires growth.
  bool exceedance_monotone(bool strict = false) const {
    for (std::size_t l = 0; l < thresholds.size(); ++l)
      for (std::size_t c = 1; c < rows.size(); ++c) {
        if (rows[c].exceedance[l] < rows[c - 1].exceedance[l]) return false;
        if (strict && !(rows[c].exceedance[l] > rows[c - 1].exceedance[l])) return false;
      }
    return true;
  }
};

namespace detail {

inline double log_add(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

/// Walks terms in time order and fills one SeriesPoint per checkpoint.
struct SeriesAccumulator {
  const std::vector<double>* checkpoints;
  std::vector<SeriesPoint> out;
  SeriesPoint cur;
  std::size_t next = 0;

  explicit SeriesAccumulator(const std::vector<double>& cps) : checkpoints(&cps), out(cps.size()) {}

  void advance_to(double t) {
    while (next < checkpoints->size() && (*checkpoints)[next] < t) out[next++] = cur;
  }
  void add(double time, double log_term, double log_mark, double log_kappa) {
    advance_to(time);
    if (log_term == -kInf) return;
    cur.log_S = log_add(cur.log_S, log_term);
    cur.S = std::exp(cur.log_S);
    cur.log_max_term = std::max(cur.log_max_term, log_term);
    if (log_mark + log_kappa > 0.0) ++cur.big_marks;
  }
  void finish() { advance_to(kInf); }
};

}  // namespace detail

inline std::vector<SeriesPoint> series_points(const SpineRealization& r, const std::vector<double>& checkpoints) {
  detail::SeriesAccumulator acc(checkpoints);
  for (std::size_t k = 0; k < r.path.jumps.size(); ++k)
    acc.add(r.path.jumps[k].time, r.log_terms[k], r.log_marks[k], r.log_kappa[k]);
  acc.finish();
  return acc.out;
}

inline SeriesStats series_statistics(const std::vector<std::vector<SeriesPoint>>& per_rep,
                                     const std::vector<double>& checkpoints, const std::vector<double>& thresholds) {
  SeriesStats st;
  st.checkpoints = checkpoints;
  st.thresholds = thresholds;
  st.replicates = per_rep.size();
  const double nrep = static_cast<double>(std::max<std::size_t>(per_rep.size(), 1));
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    SeriesCheckpointStats row;
    row.T = checkpoints[c];
    std::vector<double> S, logS, big;
    for (const auto& rep : per_rep) {
      S.push_back(rep[c].S);
      logS.push_back(rep[c].log_S);
      big.push_back(static_cast<double>(rep[c].big_marks));
    }
    row.mean_S = mean_se(S);
    row.median_S = median(S);
    row.median_log_S = median(logS);
    row.mean_big_marks = mean_se(big).mean;
    for (double L : thresholds) {
      std::size_t hit = 0;
      for (const auto& rep : per_rep)
        if (rep[c].log_max_term > std::log(L)) ++hit;
      row.exceedance.push_back(static_cast<double>(hit) / nrep);
    }
    st.rows.push_back(std::move(row));
  }
  std::size_t stable = 0;
  for (const auto& rep : per_rep)
    if (!rep.empty() && rep.front().log_max_term == rep.back().log_max_term) ++stable;
  st.max_stable_fraction = static_cast<double>(stable) / nrep;
  return st;
}

/// Series statistics over a batch of realizations.
inline SeriesStats spine_series(const std::vector<SpineRealization>& batch, const std::vector<double>& checkpoints,
                                const std::vector<double>& thresholds = {1.0, 10.0, 100.0}) {
  std::vector<std::vector<SeriesPoint>> per_rep;
  per_rep.reserve(batch.size());
  for (const auto& r : batch) per_rep.push_back(series_points(r, checkpoints));
  return series_statistics(per_rep, checkpoints, thresholds);
}

struct SeriesConfig {
  std::vector<double> checkpoints{10.0, 20.0, 40.0};
  std::vector<double> thresholds{1.0, 10.0, 100.0};
  std::size_t replicates = 1000;
  double dt = 2e-3;
  std::uint64_t seed = 1;
  SpineStart start = SpineStart::invariant();
  unsigned workers = 0;
};

struct SeriesBatch {
  SeriesConfig config;
  std::vector<std::vector<SeriesPoint>> per_rep;
  SeriesStats stats;
};

/// Streams spine paths and marks without storing paths.
inline SeriesBatch spine_series_batch(const PhiTransform& tr, const SeriesConfig& cfg) {
  if (cfg.checkpoints.empty()) throw ArgumentError("series needs at least one checkpoint");
  if (!std::is_sorted(cfg.checkpoints.begin(), cfg.checkpoints.end()))
    throw ArgumentError("series checkpoints must be increasing");
  const double T = cfg.checkpoints.back();
  detail::check_horizon(T, cfg.dt);
  const std::size_t nsteps = detail::step_count(T, cfg.dt);
  const double h = T / static_cast<double>(nsteps);
  const SpineSampler sampler(tr, h);
  const ModelSpec& spec = tr.spec();
  SeriesBatch out;
  out.config = cfg;
  out.per_rep.resize(cfg.replicates);
  parallel_for(
      cfg.replicates,
      [&](std::size_t rep) {
        Rng rng = make_stream(cfg.seed, rep, stream_tag::spine);
        std::normal_distribution<double> normal;
        auto [x, i] = sampler.draw_start(cfg.start, rng);
        double hazard = exponential(rng, 1.0);
        detail::SeriesAccumulator acc(cfg.checkpoints);
        for (std::size_t n = 0; n < nsteps; ++n) {
          const double t0 = static_cast<double>(n) * h;
          sampler.step(x, i, hazard, rng, normal, [&](double s, double xs, std::size_t pre, std::size_t post) {
            const std::size_t c = spec.convention == JumpConvention::PreJump ? pre : post;
            const double lm = ftilde(spec, xs, c).sample_log(rng);
            if (lm == -kInf) return;
            const double lk = std::log(tr.pi_phi_at(xs, c));
            acc.add(t0 + s, lm + lk - tr.lambda1 * (t0 + s), lm, lk);
          });
        }
        acc.finish();
        out.per_rep[rep] = std::move(acc.out);
      },
      cfg.workers);
  out.stats = series_statistics(out.per_rep, cfg.checkpoints, cfg.thresholds);
  return out;
}

/// CSV rows "replicate,T_checkpoint,S_T,max_term".
inline void write_series_csv(std::ostream& os, const SeriesBatch& b) {
  os << "replicate,T_checkpoint,S_T,max_term\n";
  os.precision(12);
  for (std::size_t r = 0; r < b.per_rep.size(); ++r)
    for (std::size_t c = 0; c < b.config.checkpoints.size(); ++c) {
      const auto& p = b.per_rep[r][c];
      os << r << ',' << b.config.checkpoints[c] << ',' << p.S << ',' << std::exp(p.log_max_term) << '\n';
    }
}

/// E S_infinity for the stationary spine when F~ has a finite mean:
/// int sum_i phi^2 * spine_rate * E[mark] * pi(phi) dx / lambda1.
inline double stationary_series_mean(const PhiTransform& tr) {
  const ModelSpec& spec = tr.spec();
  const auto& iv = spec.interval();
  double total = 0.0;
  for (std::size_t i = 0; i < spec.K; ++i) {
    total += detail::integrate(
        [&](double x) {
          if (!(x > iv.lo && x < iv.hi)) return 0.0;
          const double ph = tr.phi_at(x, i);
          const double kap = tr.pi_phi_at(x, i);
          const FTildeLaw law = ftilde(spec, x, i);
          return ph * ph * tr.spine_rate_at(x, i) * law.mean() * kap;
        },
        iv.lo, iv.hi);
  }
  return total / tr.lambda1;
}

// ---------------------------------------------------------------------------
// fixed-mass particle system
// ---------------------------------------------------------------------------

/// Initial measure: a density on the grid (mu(dx, i) = mu(x, i) dx) or a unit point mass.
struct InitialMeasure {
  std::optional<GridField> density;
  double x0 = 0.0;
  std::size_t i0 = 0;
  double mass = 1.0;

  static InitialMeasure from_density(GridField f) { return {std::move(f), 0.0, 0, 1.0}; }
  static InitialMeasure point(double x, std::size_t i, double mass = 1.0) { return {std::nullopt, x, i, mass}; }

  /// <f, mu> with f given on the grid (density) or evaluated at the point.
  double integrate_field(const GridField& f) const {
    if (density) return inner(f, *density);
    return mass * f.interpolate(x0, i0);
  }
};

struct ParticleOptions {
  double eps = 1e-3;
  double dt = 0.02;
  std::size_t cap = 4'000'000;
  bool apportion = true;               ///< split clusters deterministically as round(u p_j / eps)
  std::vector<double> times;           ///< output times (0 allowed); defaults to {T}
  std::vector<GridField> observables;  ///< <f, chi_t> recorded at output times
};

struct WTrajectory {
  std::vector<double> times;
  std::vector<double> W;      ///< e^{-lambda1 t} eps sum phi(x_p, i_p), all particles
  std::vector<double> M;      ///< immigrant part of W (spine runs only)
  std::vector<double> mass;
  std::vector<double> count;
  std::vector<std::vector<double>> observables;  ///< [obs][time]
  bool capped = false;
  std::size_t initial_count = 0;
  double W0 = 0.0;
};

/// Immigration event inserted into a particle run at time `time`.
struct Immigration {
  double time = 0.0;
  double x = 0.0;
  std::size_t type = 0;  ///< p^{(type)}(x) apportions the mass
  double mass = 0.0;
};

namespace detail {

/// Deterministic quantile placement of round(mass_k / eps) particles per type.
inline void place_initial(const InitialMeasure& mu, const Grid& g, std::size_t K, double eps, std::vector<double>& xs,
                          std::vector<std::uint8_t>& ts) {
  if (!mu.density) {
    const auto n = static_cast<std::size_t>(std::llround(mu.mass / eps));
    xs.assign(n, mu.x0);
    ts.assign(n, static_cast<std::uint8_t>(mu.i0));
    return;
  }
  const GridField& d = *mu.density;
  for (std::size_t k = 0; k < K; ++k) {
    // Cells [x_m, x_{m+1}] for m = 0..M with zero density at the ends.
    std::vector<double> cell(g.M + 1), cum(g.M + 2, 0.0);
    auto val = [&](std::size_t idx) { return idx == 0 || idx == g.M + 1 ? 0.0 : std::max(d(idx - 1, k), 0.0); };
    for (std::size_t m = 0; m <= g.M; ++m) {
      cell[m] = 0.5 * g.h * (val(m) + val(m + 1));
      cum[m + 1] = cum[m] + cell[m];
    }
    const double total = cum.back();
    const auto n = static_cast<std::size_t>(std::llround(total / eps));
    std::size_t m = 0;
    for (std::size_t p = 0; p < n; ++p) {
      const double target = (static_cast<double>(p) + 0.5) / static_cast<double>(n) * total;
      while (m < g.M && cum[m + 1] < target) ++m;
      const double frac = cell[m] > 0.0 ? (target - cum[m]) / cell[m] : 0.5;
      const double x = g.lo + (static_cast<double>(m) + std::clamp(frac, 0.0, 1.0)) * g.h;
      xs.push_back(std::clamp(x, g.lo + 1e-12, g.hi - 1e-12));
      ts.push_back(static_cast<std::uint8_t>(k));
    }
  }
}

/// The particle engine over a fixed step; immigrant lineage is tracked for M_t.
class ParticleEngine {
 public:
  ParticleEngine(const ModelSpec& spec, const SpectralData& sd, const ParticleOptions& opt)
      : spec_(&spec), sd_(&sd), opt_(opt), tab_(build_rate_table(spec)) {
    if (!(opt.eps > 0.0)) throw ArgumentError("particle mass eps must be positive");
    if (spec.K > 255) throw ArgumentError("particle engine supports at most 255 types");
    double rmax = 0.0;
    for (std::size_t r = 0; r < tab_.death.size(); ++r)
      rmax = std::max(rmax, tab_.death[r] + tab_.birth[r] + opt.eps * tab_.cluster[r]);
    check_rate_step(rmax, opt.dt, "particle engine");
  }

  WTrajectory run(const InitialMeasure& mu, double T, Rng& rng, std::vector<Immigration> imm = {}) {
    check_horizon(T, opt_.dt);
    const Grid& g = *sd_->grid;
    const std::size_t K = spec_->K;
    std::vector<double> out_times = opt_.times.empty() ? std::vector<double>{T} : opt_.times;
    for (double t : out_times)
      if (t < 0.0 || t > T + 1e-12) throw ArgumentError("output times must lie in [0, T]");
    std::sort(out_times.begin(), out_times.end());
    const std::size_t nsteps = step_count(T, opt_.dt);
    const double h = T / static_cast<double>(nsteps);
    const double sqh = std::sqrt(h);
    std::sort(imm.begin(), imm.end(), [](const auto& a, const auto& b) { return a.time < b.time; });

    xs_.clear();
    ts_.clear();
    place_initial(mu, g, K, opt_.eps, xs_, ts_);
    if (xs_.size() < 100)
      throw ArgumentError("initial particle count " + std::to_string(xs_.size()) + " below 100; lower eps");
    lin_.assign(xs_.size(), 0);

    WTrajectory w;
    w.initial_count = xs_.size();
    w.W0 = observe_W(0.0).first;
    w.observables.resize(opt_.observables.size());
    const bool track_M = !imm.empty();
    std::size_t next_out = 0, next_imm = 0;
    std::normal_distribution<double> normal;

    auto record = [&](double t) {
      while (next_out < out_times.size() && out_times[next_out] <= t + 0.5 * h) {
        auto [W, M] = observe_W(t);
        w.times.push_back(out_times[next_out]);
        w.W.push_back(W);
        if (track_M) w.M.push_back(M);
        w.mass.push_back(opt_.eps * static_cast<double>(xs_.size()));
        w.count.push_back(static_cast<double>(xs_.size()));
        for (std::size_t o = 0; o < opt_.observables.size(); ++o) w.observables[o].push_back(observe(opt_.observables[o]));
        ++next_out;
      }
    };
    auto insert_due = [&](double t) {
      while (next_imm < imm.size() && imm[next_imm].time <= t + 0.5 * h) {
        const auto& e = imm[next_imm++];
        insert_cluster(e.x, e.type, e.mass, 1);
      }
    };
    insert_due(0.0);
    record(0.0);
    for (std::size_t n = 0; n < nsteps && !capped_; ++n) {
      step(h, sqh, rng, normal);
      const double t = static_cast<double>(n + 1) * h;
      insert_due(t);
      if (capped_) break;
      record(t);
    }
    if (capped_) {
      w.capped = true;
      while (next_out < out_times.size()) {
        w.times.push_back(out_times[next_out++]);
        w.W.push_back(kInf);
        if (track_M) w.M.push_back(kInf);
        w.mass.push_back(kInf);
        w.count.push_back(kInf);
        for (auto& o : w.observables) o.push_back(kInf);
      }
    }
    capped_ = false;
    return w;
  }

  const std::vector<double>& positions() const { return xs_; }
  const std::vector<std::uint8_t>& types() const { return ts_; }

 private:
  std::pair<double, double> observe_W(double t) const {
    std::vector<double> a(xs_.size()), b;
    bool any_imm = false;
    for (std::size_t p = 0; p < xs_.size(); ++p) {
      a[p] = sd_->phi.interpolate(xs_[p], ts_[p]);
      any_imm = any_imm || lin_[p];
    }
    const double scale = opt_.eps * std::exp(-sd_->lambda1 * t);
    double M = 0.0;
    if (any_imm) {
      b.resize(xs_.size());
      for (std::size_t p = 0; p < xs_.size(); ++p) b[p] = lin_[p] ? a[p] : 0.0;
      M = scale * pairwise_sum(b);
    }
    return {scale * pairwise_sum(a), M};
  }

  double observe(const GridField& f) const {
    std::vector<double> a(xs_.size());
    for (std::size_t p = 0; p < xs_.size(); ++p) a[p] = f.interpolate(xs_[p], ts_[p]);
    return opt_.eps * pairwise_sum(a);
  }

  void push(double x, std::size_t k, std::uint8_t lineage) {
    nx_.push_back(x);
    nt_.push_back(static_cast<std::uint8_t>(k));
    nl_.push_back(lineage);
  }

  void insert_cluster(double x, std::size_t i, double mass, std::uint8_t lineage) {
    // Appends directly to the live arrays (between steps).
    const std::size_t K = spec_->K;
    const std::size_t r = tab_.cell(x) * K + i;
    for (std::size_t j = 0; j < K; ++j) {
      const double cnt = std::round(mass * tab_.p[r * K + j] / opt_.eps);
      if (cnt <= 0.0) continue;
      if (static_cast<double>(xs_.size()) + cnt > static_cast<double>(opt_.cap)) {
        capped_ = true;
        return;
      }
      for (std::size_t c = 0; c < static_cast<std::size_t>(cnt); ++c) {
        xs_.push_back(x);
        ts_.push_back(static_cast<std::uint8_t>(j));
        lin_.push_back(lineage);
      }
    }
  }

  void step(double h, double sqh, Rng& rng, std::normal_distribution<double>& normal) {
    const std::size_t K = spec_->K;
    nx_.clear();
    nt_.clear();
    nl_.clear();
    nx_.reserve(xs_.size() + xs_.size() / 8 + 16);
    nt_.reserve(nx_.capacity());
    nl_.reserve(nx_.capacity());
    for (std::size_t p = 0; p < xs_.size() && !capped_; ++p) {
      double x = xs_[p];
      const std::size_t k0 = ts_[p];
      if (!move(tab_, x, k0, h, sqh, rng, normal)) continue;
      const std::size_t c = tab_.cell(x);
      stack_.clear();
      stack_.emplace_back(k0, 0.0);
      while (!stack_.empty()) {
        auto [k, s] = stack_.back();
        stack_.pop_back();
        const std::size_t r = c * K + k;
        const double d = tab_.death[r], bi = tab_.birth[r], cl = opt_.eps * tab_.cluster[r];
        const double R = d + bi + cl;
        bool alive = true;
        for (;;) {
          s += exponential(rng, R);
          if (s >= h) break;
          const double u = uniform_open(rng) * R;
          if (u < d) {
            alive = false;
            break;
          }
          if (u < d + bi) {
            stack_.emplace_back(pick_cdf(&tab_.p_cdf[r * K], K, uniform_open(rng)), s);
            continue;
          }
          const double mass = spec_->kernel(k).sample(rng);
          if (opt_.apportion) {
            for (std::size_t j = 0; j < K; ++j) {
              const double cnt = std::round(mass * tab_.p[r * K + j] / opt_.eps);
              if (!enqueue(j, s, cnt)) return;
            }
          } else {
            const std::size_t j = pick_cdf(&tab_.p_cdf[r * K], K, uniform_open(rng));
            if (!enqueue(j, s, std::round(mass / opt_.eps))) return;
          }
        }
        if (alive) push(x, k, lin_[p]);
      }
    }
    std::swap(xs_, nx_);
    std::swap(ts_, nt_);
    std::swap(lin_, nl_);
  }

  bool enqueue(std::size_t j, double s, double cnt) {
    if (cnt <= 0.0) return true;
    if (static_cast<double>(nx_.size() + stack_.size() + xs_.size()) + cnt > static_cast<double>(opt_.cap)) {
      capped_ = true;
      return false;
    }
    for (std::size_t c = 0; c < static_cast<std::size_t>(cnt); ++c) stack_.emplace_back(j, s);
    return true;
  }

  const ModelSpec* spec_;
  const SpectralData* sd_;
  ParticleOptions opt_;
  RateTable tab_;
  std::vector<double> xs_, nx_;
  std::vector<std::uint8_t> ts_, nt_, lin_, nl_;
  std::vector<std::pair<std::size_t, double>> stack_;
  bool capped_ = false;
};

}  // namespace detail

/// One replicate of the particle approximation.
inline WTrajectory sim_particles(const ModelSpec& spec, const SpectralData& sd, const InitialMeasure& mu, double T,
                                 const ParticleOptions& opt, Rng& rng) {
  detail::ParticleEngine eng(spec, sd, opt);
  return eng.run(mu, T, rng);
}

struct ParticleBatch {
  std::vector<WTrajectory> runs;
  std::vector<double> times;
  std::size_t capped = 0;

  /// Column of W (or an observable, obs >= 0) at output index k across replicates.
  std::vector<double> column(std::size_t k, int obs = -1) const {
    std::vector<double> v;
    v.reserve(runs.size());
    for (const auto& r : runs) v.push_back(obs < 0 ? r.W[k] : r.observables[static_cast<std::size_t>(obs)][k]);
    return v;
  }
};

inline ParticleBatch particle_batch(const ModelSpec& spec, const SpectralData& sd, const InitialMeasure& mu, double T,
                                    const ParticleOptions& opt, std::size_t replicates, std::uint64_t seed,
                                    std::uint64_t tag = stream_tag::particles, unsigned workers = 0) {
  ParticleBatch b;
  b.runs.resize(replicates);
  parallel_for(
      replicates,
      [&](std::size_t r) {
        Rng rng = make_stream(seed, r, tag);
        b.runs[r] = sim_particles(spec, sd, mu, T, opt, rng);
      },
      workers);
  if (!b.runs.empty()) b.times = b.runs.front().times;
  for (const auto& r : b.runs) b.capped += r.capped ? 1 : 0;
  return b;
}

/// CSV rows "replicate,time,W,M,particle_count".
inline void write_w_csv(std::ostream& os, const std::vector<WTrajectory>& runs) {
  os << "replicate,time,W,M,particle_count\n";
  os.precision(12);
  for (std::size_t r = 0; r < runs.size(); ++r)
    for (std::size_t k = 0; k < runs[r].times.size(); ++k)
      os << r << ',' << runs[r].times[k] << ',' << runs[r].W[k] << ',' << (runs[r].M.empty() ? 0.0 : runs[r].M[k])
         << ',' << runs[r].count[k] << '\n';
}

// ---------------------------------------------------------------------------
// spine decomposition
// ---------------------------------------------------------------------------

struct DecompositionOptions {
  ParticleOptions particles;
  double spine_dt = 1e-3;
};

/// Spine start drawn from phi mu / <phi, mu>.
inline std::vector<double> spine_start_cdf(const SpectralData& sd, const InitialMeasure& mu) {
  std::vector<double> cdf(sd.phi.size(), 0.0);
  if (mu.density) {
    double acc = 0.0;
    for (std::size_t r = 0; r < cdf.size(); ++r) {
      acc += std::max(sd.phi.values[static_cast<Eigen::Index>(r)] * mu.density->values[static_cast<Eigen::Index>(r)], 0.0);
      cdf[r] = acc;
    }
    for (double& c : cdf) c /= acc;
  }
  return cdf;
}

/// One replicate of W_T + M_T under the spine construction: an independent copy of the
/// particle system from mu plus immigration of mass m_s at the spine's jumps.
inline WTrajectory sim_spine_decomposition(const ModelSpec& spec, const PhiTransform& tr, const InitialMeasure& mu,
                                           double T, const DecompositionOptions& opt, Rng& rng) {
  const SpectralData& sd = tr.spectral();
  const std::size_t nsteps = detail::step_count(T, opt.spine_dt);
  const double h = T / static_cast<double>(nsteps);
  const SpineSampler sampler(tr, h);
  std::normal_distribution<double> normal;
  const SpineStart start = mu.density ? SpineStart::invariant() : SpineStart::point(mu.x0, mu.i0);
  const auto cdf = spine_start_cdf(sd, mu);
  auto [x, i] = mu.density ? sampler.draw_start(start, rng, cdf) : sampler.draw_start(start, rng);
  double hazard = exponential(rng, 1.0);
  std::vector<Immigration> imm;
  for (std::size_t n = 0; n < nsteps; ++n) {
    const double t0 = static_cast<double>(n) * h;
    sampler.step(x, i, hazard, rng, normal, [&](double s, double xs, std::size_t pre, std::size_t post) {
      const std::size_t c = spec.convention == JumpConvention::PreJump ? pre : post;
      const double lm = ftilde(spec, xs, c).sample_log(rng);
      if (lm == -kInf) return;
      imm.push_back({t0 + s, xs, c, std::exp(lm)});
    });
  }
  detail::ParticleEngine eng(spec, sd, opt.particles);
  auto w = eng.run(mu, T, rng, imm);
  if (w.M.empty()) w.M.assign(w.W.size(), 0.0);
  return w;
}

// ---------------------------------------------------------------------------
// non-local Feynman-Kac by paths
// ---------------------------------------------------------------------------

struct McEstimate {
  double estimate = 0.0;
  double se = 0.0;
  std::size_t paths = 0;
};

/// Average over switched paths of exp(int V(t-s, xi_s) ds) prod J(t-s, pre, post) f(xi_t) 1{alive}.
inline McEstimate mc_nlfk(const ModelSpec& spec, const FKWeightSpec& weights, const GridField& f, double x0,
                          std::size_t i0, double t, double dt, std::size_t reps, std::uint64_t seed,
                          unsigned workers = 0) {
  detail::check_point(spec, x0);
  detail::check_type(spec, i0);
  detail::check_horizon(t, dt);
  const SwitchedSampler sampler(spec, dt);
  const std::size_t nsteps = detail::step_count(t, dt);
  const double h = t / static_cast<double>(nsteps);
  constexpr std::size_t chunk = 1000;
  const std::size_t nchunks = (reps + chunk - 1) / chunk;
  std::vector<double> vals(reps, 0.0);
  parallel_for(
      nchunks,
      [&](std::size_t ch) {
        Rng rng = make_stream(seed, ch, stream_tag::nlfk);
        std::normal_distribution<double> normal;
        const std::size_t end = std::min(reps, (ch + 1) * chunk);
        for (std::size_t r = ch * chunk; r < end; ++r) {
          double x = x0;
          std::size_t i = i0;
          double logw = 0.0;
          bool alive = true;
          for (std::size_t n = 0; n < nsteps && alive; ++n) {
            const double t0 = static_cast<double>(n) * h;
            double held = 0.0;
            alive = sampler.step(
                x, i, h, rng, normal,
                [&](double s, double xs, std::size_t pre, std::size_t post) {
                  logw += std::log(weights.jump_factor(t - (t0 + s), xs, pre, post));
                },
                [&](double xs, std::size_t k, double ds) {
                  logw += weights.potential(t - (t0 + held + 0.5 * ds), xs, k) * ds;
                  held += ds;
                });
          }
          vals[r] = alive ? std::exp(logw) * f.interpolate(x, i) : 0.0;
        }
      },
      workers);
  const MeanSE m = mean_se(vals);
  return {m.mean, m.se, reps};
}

// ---------------------------------------------------------------------------
// degeneracy verdict
// ---------------------------------------------------------------------------

enum class DegeneracyVerdict { L1Limit, Degenerate, Inconclusive };

inline const char* to_string(DegeneracyVerdict v) {
  switch (v) {
    case DegeneracyVerdict::L1Limit: return "consistent-with-L1-limit";
    case DegeneracyVerdict::Degenerate: return "consistent-with-degeneracy";
    default: return "inconclusive";
  }
}

inline constexpr std::size_t kMinDegeneracySamples = 100;
inline constexpr double kDegeneracyDrop = 5.0;
inline constexpr double kStableMedianDrop = 2.0;

struct DegeneracyReport {
  std::vector<double> times;
  std::vector<MeanSE> means;
  std::vector<double> medians;
  std::vector<double> z_scores;  ///< |mean - <phi,mu>| / SE
  double target = 0.0;
  double median_drop = 1.0;      ///< first / last median
  DegeneracyVerdict verdict = DegeneracyVerdict::Inconclusive;
  std::string reason;
};

/// samples[c] holds the W samples at checkpoint times[c]; +inf marks a capped replicate.
inline DegeneracyReport degeneracy_test(const std::vector<double>& times, const std::vector<std::vector<double>>& samples,
                                        double target) {
  DegeneracyReport rep;
  rep.times = times;
  rep.target = target;
  for (const auto& s : samples) {
    rep.means.push_back(mean_se(s));
    rep.medians.push_back(median(s));
    rep.z_scores.push_back(z_score(rep.means.back(), target));
  }
  if (samples.size() < 2 || times.size() != samples.size()) {
    rep.reason = "insufficient samples: need at least 2 checkpoints";
    return rep;
  }
  for (const auto& s : samples)
    if (s.size() < kMinDegeneracySamples) {
      rep.reason = "insufficient samples: " + std::to_string(s.size()) + " replicates < " +
                   std::to_string(kMinDegeneracySamples);
      return rep;
    }
  const double first = rep.medians.front(), last = rep.medians.back();
  rep.median_drop = last > 0.0 ? first / last : kInf;
  if (rep.median_drop >= kDegeneracyDrop) {
    rep.verdict = DegeneracyVerdict::Degenerate;
    rep.reason = "median falls by a factor >= 5 across checkpoints";
    return rep;
  }
  bool means_ok = true;
  for (double z : rep.z_scores) means_ok = means_ok && z <= 3.0;
  if (means_ok && rep.median_drop <= kStableMedianDrop) {
    rep.verdict = DegeneracyVerdict::L1Limit;
    rep.reason = "means within 3 SE of <phi,mu> and median stable";
    return rep;
  }
  rep.reason = means_ok ? "median drifts but by less than 5x" : "mean departs from <phi,mu> by more than 3 SE";
  return rep;
}

}  // namespace superspine
