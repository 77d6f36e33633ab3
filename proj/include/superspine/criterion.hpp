#pragma once

// The L log L integral and the end-to-end dichotomy experiment.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "superspine/errors.hpp"
#include "superspine/grid.hpp"
#include "superspine/model.hpp"
#include "superspine/simulate.hpp"
#include "superspine/spectral.hpp"

namespace superspine {

/// Log-mass cutoffs for the divergence table: marks r with ln r <= L.
inline const std::vector<double> kLogCutoffs{1e2, 1e4, 1e6};

struct CutoffRow {
  double log_cutoff = 0.0;
  std::vector<double> per_type;
  double total = 0.0;
};

struct CriterionReport {
  bool llogl_finite = true;           ///< analytic verdict from the kernel families
  std::vector<double> per_type;       ///< int phi b l dx (finite branch), +inf otherwise
  double total = 0.0;
  std::vector<CutoffRow> cutoffs;     ///< truncated integrals; the divergence certificate
  bool cutoffs_increasing = false;
  std::string fingerprint;

  double min_cutoff_ratio() const {
    double r = kInf;
    for (std::size_t k = 1; k < cutoffs.size(); ++k) r = std::min(r, cutoffs[k].total / cutoffs[k - 1].total);
    return r;
  }
};

namespace detail {

/// phi on [lo, hi] as a cubic spline through the grid values and the zero boundary values.
inline std::vector<CardinalSpline> phi_splines(const SpectralData& sd) {
  const Grid& g = *sd.grid;
  std::vector<CardinalSpline> out;
  for (std::size_t k = 0; k < sd.phi.K; ++k) {
    std::vector<double> v(g.M + 2, 0.0);
    for (std::size_t m = 0; m < g.M; ++m) v[m + 1] = sd.phi(m, k);
    out.push_back(cardinal_spline(v, g.lo, g.h));
  }
  return out;
}

}  // namespace detail

/// int_D phi(x,i) b(x,i) l(x,i) dx per type, with l taken at kappa = pi(x,i;phi).
inline CriterionReport llogl_integral(const ModelSpec& spec, const SpectralData& sd) {
  if (sd.phi.size() == 0 || !sd.grid) throw ArgumentError("llogl_integral needs a computed eigenpair");
  const auto& iv = spec.interval();
  const auto splines = detail::phi_splines(sd);
  auto phi = [&](double x, std::size_t k) { return std::max(splines[k](x), 0.0); };
  auto kappa = [&](double x, std::size_t i) {
    double s = 0.0;
    for (std::size_t j = 0; j < spec.K; ++j) s += spec.p(x, i, j) * phi(x, j);
    return s;
  };
  CriterionReport rep;
  for (std::size_t i = 0; i < spec.K; ++i) rep.llogl_finite = rep.llogl_finite && spec.kernel(i).llogl_finite();

  auto type_integral = [&](std::size_t i, auto&& l_of) {
    return detail::integrate(
        [&](double x) {
          if (!(x > iv.lo && x < iv.hi)) return 0.0;
          const double k = kappa(x, i);
          return phi(x, i) * spec.b(x, i) * spec.weight(x, i) * l_of(k);
        },
        iv.lo, iv.hi);
  };

  rep.per_type.resize(spec.K);
  for (std::size_t i = 0; i < spec.K; ++i) {
    const auto& ker = spec.kernel(i);
    rep.per_type[i] = ker.llogl_finite() ? type_integral(i, [&](double k) { return ker.l_integral(k); }) : kInf;
    rep.total += rep.per_type[i];
  }
  for (double L : kLogCutoffs) {
    CutoffRow row;
    row.log_cutoff = L;
    for (std::size_t i = 0; i < spec.K; ++i) {
      const auto& ker = spec.kernel(i);
      row.per_type.push_back(type_integral(i, [&](double k) { return ker.l_truncated_log(k, L); }));
      row.total += row.per_type.back();
    }
    rep.cutoffs.push_back(std::move(row));
  }
  rep.cutoffs_increasing = true;
  for (std::size_t k = 1; k < rep.cutoffs.size(); ++k)
    rep.cutoffs_increasing = rep.cutoffs_increasing && rep.cutoffs[k].total > rep.cutoffs[k - 1].total;
  return rep;
}

// ---------------------------------------------------------------------------
// dichotomy experiment
// ---------------------------------------------------------------------------

struct ExperimentBudget {
  std::size_t M_nodes = 200;
  std::size_t replicates = 200;
  std::vector<double> w_times{1.0, 2.0, 3.0};
  double eps = 1e-3;
  double dt = 0.02;
  std::size_t particle_cap = 4'000'000;
  std::size_t series_replicates = 2000;
  std::vector<double> series_checkpoints{10.0, 20.0, 40.0};
  double series_dt = 2e-3;
  std::size_t flatness_replicates = 200;
  double flatness_T = 1.0;
  std::vector<double> iu_times{0.2, 0.5, 1.0, 2.0};
  std::uint64_t seed = 1;
  unsigned workers = 0;

  void check() const {
    if (M_nodes < kMinGridNodes) throw ArgumentError("M_nodes below the grid minimum");
    if (replicates == 0 || series_replicates == 0 || flatness_replicates == 0)
      throw ArgumentError("replicate counts must be positive");
    if (w_times.empty() || series_checkpoints.empty()) throw ArgumentError("checkpoint lists must be non-empty");
    if (!(eps > 0.0) || !(dt > 0.0) || !(series_dt > 0.0) || !(flatness_T > 0.0))
      throw ArgumentError("budgets must be positive");
  }
};

struct SpectralSummary {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double gap = 0.0;
  double eigen_residual = 0.0;
  Assumption1Verdict assumption1;
  double phi_mu = 0.0;  ///< <phi, mu> for mu = phi dx
};

struct FlatnessRow {
  double x = 0.0;
  std::size_t type = 0;
  double phi = 0.0;
  MeanSE ratio;  ///< mean W_T / phi(x, i)
};

struct FlatnessTable {
  double T = 0.0;
  std::vector<FlatnessRow> rows;
  double max_pair_z = 0.0;
  bool flat = false;
};

struct StageError {
  std::string stage;
  std::string message;
  bool numeric = false;
};

struct ExperimentReport {
  std::string scenario;
  std::string fingerprint;
  ExperimentBudget budget;
  std::optional<SpectralSummary> spectral;
  std::optional<IUReport> iu;
  std::optional<CriterionReport> criterion;
  std::optional<SeriesStats> series;
  std::optional<DegeneracyReport> degeneracy;
  std::optional<FlatnessTable> flatness;
  std::vector<StageError> errors;
  bool consistent = false;
  std::string reason;

  // Raw samples for the companion CSVs.
  std::vector<WTrajectory> w_runs;
  std::optional<SeriesBatch> series_batch;
};

/// Three point starts spread over D, alternating types.
inline std::vector<std::pair<double, std::size_t>> flatness_starts(const ModelSpec& spec) {
  const auto& iv = spec.interval();
  const double L = iv.hi - iv.lo;
  return {{iv.lo + 0.25 * L, 0}, {iv.lo + 0.5 * L, spec.K > 1 ? 1 : 0}, {iv.lo + 0.75 * L, 0}};
}

inline FlatnessTable h_flatness(const ModelSpec& spec, const SpectralData& sd, const ExperimentBudget& b) {
  FlatnessTable tab;
  tab.T = b.flatness_T;
  ParticleOptions po;
  po.eps = b.eps;
  po.dt = std::min(b.dt, b.flatness_T);
  po.cap = b.particle_cap;
  po.times = {b.flatness_T};
  std::uint64_t k = 0;
  for (auto [x, i] : flatness_starts(spec)) {
    FlatnessRow row;
    row.x = x;
    row.type = i;
    row.phi = sd.phi.interpolate(x, i);
    const auto batch = particle_batch(spec, sd, InitialMeasure::point(x, i), b.flatness_T, po, b.flatness_replicates,
                                      b.seed + 1000003ULL * (++k), stream_tag::flatness, b.workers);
    auto col = batch.column(0);
    for (double& v : col) v /= row.phi;
    row.ratio = mean_se(col);
    tab.rows.push_back(row);
  }
  for (std::size_t a = 0; a < tab.rows.size(); ++a)
    for (std::size_t c = a + 1; c < tab.rows.size(); ++c)
      tab.max_pair_z = std::max(tab.max_pair_z, z_score(tab.rows[a].ratio, tab.rows[c].ratio));
  tab.flat = tab.max_pair_z <= 3.0;
  return tab;
}

inline constexpr double kBoundedMaxFraction = 0.99;

/// eigenpair -> IU check -> criterion -> spine series -> W batch -> degeneracy verdict -> flatness -> consistency.
/// A failing stage is recorded and the stages after it are skipped.
inline ExperimentReport dichotomy_experiment(const ModelSpec& spec, const ExperimentBudget& budget,
                                             const std::string& fingerprint = {}) {
  ExperimentReport rep;
  rep.scenario = spec.name;
  rep.fingerprint = fingerprint;
  rep.budget = budget;
  std::string stage = "budget";
  auto fail = [&](const std::string& msg, bool numeric) {
    rep.errors.push_back({stage, msg, numeric});
    rep.consistent = false;
    rep.reason = "stage '" + stage + "' failed: " + msg;
  };
  try {
    budget.check();
    stage = "validate";
    require_valid(spec);

    stage = "spectral";
    const auto grid = build_grid(spec.domain, budget.M_nodes);
    const SpectralData sd = compute_spectral(spec, grid);
    SpectralSummary ss;
    ss.lambda1 = sd.lambda1;
    ss.lambda2 = sd.lambda2;
    ss.gap = sd.gap();
    ss.eigen_residual = sd.eigen_residual;
    ss.assumption1 = check_assumption1(sd);
    ss.phi_mu = inner(sd.phi, sd.phi);
    rep.spectral = ss;
    if (!ss.assumption1.holds) throw ModelError("spectral condition fails: lambda1 <= 0 or phi unbounded");

    stage = "iu";
    rep.iu = check_iu(sd, budget.iu_times);

    stage = "criterion";
    rep.criterion = llogl_integral(spec, sd);
    rep.criterion->fingerprint = fingerprint;

    stage = "series";
    const PhiTransform tr(spec, sd);
    SeriesConfig sc;
    sc.checkpoints = budget.series_checkpoints;
    sc.replicates = budget.series_replicates;
    sc.dt = budget.series_dt;
    sc.seed = budget.seed;
    sc.workers = budget.workers;
    rep.series_batch = spine_series_batch(tr, sc);
    rep.series = rep.series_batch->stats;

    stage = "particles";
    ParticleOptions po;
    po.eps = budget.eps;
    po.dt = budget.dt;
    po.cap = budget.particle_cap;
    po.times = budget.w_times;
    const double T = *std::max_element(budget.w_times.begin(), budget.w_times.end());
    auto batch = particle_batch(spec, sd, InitialMeasure::from_density(sd.phi), T, po, budget.replicates, budget.seed,
                                stream_tag::particles, budget.workers);
    std::vector<std::vector<double>> cols;
    for (std::size_t k = 0; k < batch.times.size(); ++k) cols.push_back(batch.column(k));
    rep.w_runs = std::move(batch.runs);

    stage = "degeneracy";
    rep.degeneracy = degeneracy_test(batch.times, cols, ss.phi_mu);

    stage = "flatness";
    rep.flatness = h_flatness(spec, sd, budget);

    stage = "consistency";
    const bool finite = rep.criterion->llogl_finite;
    const auto& deg = *rep.degeneracy;
    if (deg.verdict == DegeneracyVerdict::Inconclusive && deg.reason.rfind("insufficient samples", 0) == 0) {
      rep.consistent = false;
      rep.reason = "insufficient samples";
    } else if (finite) {
      const bool w_ok = deg.verdict == DegeneracyVerdict::L1Limit;
      const bool s_ok = rep.series->max_stable_fraction >= kBoundedMaxFraction;
      const bool f_ok = rep.flatness->flat;
      rep.consistent = w_ok && s_ok && f_ok;
      rep.reason = rep.consistent ? "criterion finite, W consistent with an L1 limit, series bounded, h flat"
                                  : std::string("criterion finite but") + (w_ok ? "" : " W verdict is ") +
                                        (w_ok ? "" : to_string(deg.verdict)) + (s_ok ? "" : " series maxima still moving") +
                                        (f_ok ? "" : " h-flatness fails");
    } else {
      const bool w_ok = deg.verdict == DegeneracyVerdict::Degenerate;
      const bool s_ok = rep.series->exceedance_monotone();
      rep.consistent = w_ok && s_ok;
      rep.reason = rep.consistent ? "criterion infinite, W consistent with degeneracy, series maxima exploding"
                                  : std::string("criterion infinite but") + (w_ok ? "" : " W verdict is ") +
                                        (w_ok ? "" : to_string(deg.verdict)) +
                                        (s_ok ? "" : " exceedance fractions not monotone");
    }
  } catch (const NumericError& e) {
    fail(e.what(), true);
  } catch (const StabilityError& e) {
    fail(e.what(), true);
  } catch (const ResourceError& e) {
    fail(e.what(), true);
  } catch (const Error& e) {
    fail(e.what(), false);
  }
  return rep;
}

}  // namespace superspine
