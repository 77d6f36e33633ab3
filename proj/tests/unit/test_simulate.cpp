#include <cmath>
#include <memory>
#include <numbers>

#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace superspine;

namespace {

const double kPi = std::numbers::pi;

SpectralData spectral(const ModelSpec& spec, std::size_t M = 200) { return compute_spectral(spec, build_grid(spec.domain, M)); }

GridField sine(const GridPtr& g) {
  return GridField::from_function(g, 2, [](double x, std::size_t) { return std::sin(x); });
}

// Long canon2 spine path shared by the spine and mark tests.
struct LongSpine {
  ModelSpec spec = fixtures::load("canon2");
  SpectralData sd = spectral(spec);
  PhiTransform tr{spec, sd};
  SwitchedPath path;
  LongSpine() {
    Rng rng = make_stream(11, 0, stream_tag::spine);
    path = sim_spine(tr, 3500.0, 2e-3, rng, SpineStart::invariant());
  }
};

const LongSpine& long_spine() {
  static const LongSpine s;
  return s;
}

}  // namespace

TEST(SimSwitched, ExitTimesMatchHeatKernelSurvival) {
  // Identity p switches off Q, leaving Brownian motion killed at the boundary.
  const auto spec = fixtures::patched("canon2", {{"coefficients", {{"p", {{1.0, 0.0}, {0.0, 1.0}}}}}});
  const auto g = build_grid(spec.domain, 199);
  const auto A = assemble_A(g, spec);
  const std::vector<double> checks{0.1, 0.4, 1.0};
  std::vector<std::vector<double>> alive(checks.size());
  for (std::size_t r = 0; r < 10000; ++r) {
    Rng rng = make_stream(3, r, stream_tag::switched);
    const auto p = sim_switched(spec, kPi / 2, 0, checks.back(), 1e-3, rng, false);
    EXPECT_TRUE(p.jumps.empty());
    for (std::size_t c = 0; c < checks.size(); ++c) alive[c].push_back(p.kill_time > checks[c] + 1e-9 ? 1.0 : 0.0);
  }
  for (std::size_t c = 0; c < checks.size(); ++c) {
    const Eigen::MatrixXd P = heat_kernel(A, checks[c]);
    const double surv = P.row(2 * 99).sum() * g->h;
    EXPECT_LE(z_score(mean_se(alive[c]), surv), 3.0) << "t=" << checks[c] << " oracle " << surv;
  }
}

TEST(SimSwitched, TypeLawAmongSurvivors) {
  // Switching is independent of position, so P(type 1 | alive at t) = (1 + e^{-6t}) / 2.
  const auto spec = fixtures::load("canon2");
  for (double t : {0.2, 2.0}) {
    std::vector<double> first;
    for (std::size_t r = 0; r < 10000; ++r) {
      Rng rng = make_stream(5, r, stream_tag::switched);
      const auto p = sim_switched(spec, kPi / 2, 0, t, 2e-3, rng, false);
      if (!p.killed) first.push_back(p.final_type == 0 ? 1.0 : 0.0);
    }
    ASSERT_GT(first.size(), 1000u);
    EXPECT_LE(z_score(mean_se(first), 0.5 * (1.0 + std::exp(-6.0 * t))), 3.0) << "t=" << t;
  }
}

TEST(SimSwitched, JumpsAlternateUnderAntidiagonalKernel) {
  const auto spec = fixtures::load("canon2");
  Rng rng = make_stream(9, 0, stream_tag::switched);
  const auto p = sim_switched(spec, kPi / 2, 1, 1.0, 1e-3, rng);
  std::size_t type = 1;
  for (const auto& j : p.jumps) {
    EXPECT_EQ(j.pre, type);
    EXPECT_NE(j.post, j.pre);
    type = j.post;
  }
}

TEST(SimSwitched, EmpiricalGenerator) {
  // f(x, i) = 1{i = 1}: (A f)(x, 1) = q_11 = -3, and the exact one-step drift is (e^{-6dt} - 1) / (2 dt).
  const auto spec = fixtures::load("canon2");
  const double dt = 0.01;
  const SwitchedSampler sampler(spec, dt);
  Rng rng = make_stream(13, 0, stream_tag::switched);
  std::normal_distribution<double> normal;
  std::vector<double> diffs;
  for (int r = 0; r < 100000; ++r) {
    double x = 1.3;
    std::size_t i = 0;
    sampler.step(x, i, dt, rng, normal, [](double, double, std::size_t, std::size_t) {},
                 [](double, std::size_t, double) {});
    diffs.push_back(((i == 0 ? 1.0 : 0.0) - 1.0) / dt);
  }
  const auto m = mean_se(diffs);
  EXPECT_LE(z_score(m, (std::exp(-6.0 * dt) - 1.0) / (2 * dt)), 3.0);
  EXPECT_NEAR(m.mean, -3.0, 3 * m.se + 10 * dt);
}

TEST(SimSwitched, StepSizeTooLarge) {
  const auto spec = fixtures::load("canon2");
  Rng rng = make_stream(1, 0, 0);
  EXPECT_THROW(sim_switched(spec, 1.0, 0, 1.0, 0.05, rng), StabilityError);
  EXPECT_THROW(sim_switched(spec, 4.0, 0, 1.0, 1e-3, rng), DomainError);
}

TEST(SimSpine, InterJumpTimesAreRateThreeExponential) {
  const auto& s = long_spine();
  ASSERT_GE(s.path.jumps.size(), 10000u);
  std::vector<double> gaps;
  for (std::size_t k = 1; k < s.path.jumps.size(); ++k) gaps.push_back(s.path.jumps[k].time - s.path.jumps[k - 1].time);
  const double D = ks_statistic(gaps, [](double x) { return 1.0 - std::exp(-3.0 * x); });
  EXPECT_GT(ks_pvalue(D, gaps.size()), 0.01);
}

TEST(SimSpine, OccupationMatchesInvariantDensity) {
  const auto& s = long_spine();
  const std::size_t bins = 10;
  // Samples two time units apart; the spine mixes at rate 3.
  const auto oc = spine_occupation(s.path, 0.0, kPi, bins, 2, 5.0, 1000);
  const auto probs = invariant_bin_probabilities(s.tr, bins);
  const auto chi = chi_square_gof(oc.counts, probs);
  EXPECT_GT(chi.pvalue, 0.01) << "chi2=" << chi.statistic << " dof=" << chi.dof;
}

TEST(SimSpine, NeverLeavesDomain) {
  const auto& s = long_spine();
  EXPECT_FALSE(s.path.killed);
  for (std::size_t r = 0; r < 200; ++r) {
    Rng rng = make_stream(17, r, stream_tag::spine);
    const auto p = sim_spine(s.tr, 50.0, 1e-2, rng, SpineStart::point(0.01, r % 2));
    ASSERT_FALSE(p.killed);
    for (double x : p.positions) ASSERT_TRUE(x > 0.0 && x < kPi);
  }
}

TEST(SimMarks, AtomFrequenciesAndMean) {
  const auto& s = long_spine();
  Rng rng = make_stream(19, 0, stream_tag::marks);
  const auto r = sim_marks(s.tr, s.path, rng);
  ASSERT_EQ(r.log_marks.size(), s.path.jumps.size());
  std::vector<double> zero, mark;
  for (double lm : r.log_marks) {
    zero.push_back(lm == -kInf ? 1.0 : 0.0);
    mark.push_back(std::exp(lm));
  }
  EXPECT_LE(z_score(mean_se(zero), 2.0 / 3.0), 3.0);
  EXPECT_LE(z_score(mean_se(mark), 1.0 / 3.0), 3.0);
  for (double m : mark) EXPECT_TRUE(m == 0.0 || m == 1.0);
}

TEST(SimMarks, NoImmigrationEdgeModel) {
  const auto spec = fixtures::patched("canon2", {{"kernel", {{"family", "point_mass"}, {"u0", 1.0}, {"mass", 0.0}}}});
  const auto sd = spectral(spec, 100);
  const PhiTransform tr(spec, sd);
  Rng rng = make_stream(23, 0, stream_tag::marks);
  const auto r = sim_marks(tr, sim_spine(tr, 20.0, 1e-2, rng, SpineStart::invariant()), rng);
  EXPECT_FALSE(r.log_marks.empty());
  for (double lm : r.log_marks) EXPECT_EQ(lm, -kInf);
  SeriesConfig cfg;
  cfg.replicates = 50;
  cfg.dt = 1e-2;
  cfg.checkpoints = {5.0, 10.0};
  const auto b = spine_series_batch(tr, cfg);
  for (const auto& rep : b.per_rep)
    for (const auto& p : rep) EXPECT_EQ(p.S, 0.0);
  EXPECT_EQ(stationary_series_mean(tr), 0.0);
}

TEST(SpineSeries, StationaryMeanClosedForm) {
  const auto spec = fixtures::load("canon2");
  const auto sd = spectral(spec);
  const PhiTransform tr(spec, sd);
  const double exact = 8.0 / (3.0 * std::pow(kPi, 1.5));
  EXPECT_NEAR(exact, 0.4789, 1e-4);
  EXPECT_NEAR(stationary_series_mean(tr), exact, 1e-3);
  SeriesConfig cfg;
  cfg.replicates = 1000;
  cfg.dt = 1e-2;
  cfg.checkpoints = {12.0};
  const auto b = spine_series_batch(tr, cfg);
  EXPECT_LE(z_score(b.stats.rows[0].mean_S, exact), 3.0);
}

TEST(SpineSeries, LightTailMediansSettle) {
  const auto spec = fixtures::load("canon2");
  const auto sd = spectral(spec);
  const PhiTransform tr(spec, sd);
  SeriesConfig cfg;
  cfg.replicates = 300;
  cfg.dt = 1e-2;
  const auto b = spine_series_batch(tr, cfg);
  const auto& rows = b.stats.rows;
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t c = 1; c < rows.size(); ++c)
    EXPECT_LE(std::abs(rows[c].median_S / rows[0].median_S - 1.0), 0.01);
  // Per replicate the partial sums only grow.
  for (const auto& rep : b.per_rep)
    for (std::size_t c = 1; c < rep.size(); ++c) EXPECT_GE(rep[c].S, rep[c - 1].S);
}

TEST(SpineSeries, HeavyTailExceedanceGrows) {
  const auto spec = fixtures::load("canonH");
  const auto sd = spectral(spec);
  const PhiTransform tr(spec, sd);
  SeriesConfig cfg;
  cfg.replicates = 500;
  cfg.dt = 1e-2;
  const auto b = spine_series_batch(tr, cfg);
  EXPECT_TRUE(b.stats.exceedance_monotone(true));
  for (std::size_t l = 0; l < cfg.thresholds.size(); ++l)
    EXPECT_GT(b.stats.rows.back().exceedance[l], b.stats.rows.front().exceedance[l]) << "L=" << cfg.thresholds[l];
}

TEST(SpineSeries, CheckpointValidation) {
  const auto spec = fixtures::load("canon2");
  const auto sd = spectral(spec, 50);
  const PhiTransform tr(spec, sd);
  SeriesConfig cfg;
  cfg.checkpoints = {};
  EXPECT_THROW(spine_series_batch(tr, cfg), ArgumentError);
  cfg.checkpoints = {2.0, 1.0};
  EXPECT_THROW(spine_series_batch(tr, cfg), ArgumentError);
}

class Particles : public ::testing::Test {
 protected:
  ModelSpec spec = fixtures::load("canon2");
  SpectralData sd = spectral(spec, 100);
  InitialMeasure mu = InitialMeasure::from_density(sd.phi);
};

TEST_F(Particles, MeanMatchesSemigroup) {
  ParticleOptions opt;
  opt.times = {1.0};
  opt.observables = {sd.phi};
  const auto b = particle_batch(spec, sd, mu, 1.0, opt, 200, 29);
  const double oracle = mu.integrate_field(solve_mean(sd, sd.phi, 1.0));
  EXPECT_NEAR(oracle, std::exp(1.0), 1e-3);
  EXPECT_LE(z_score(mean_se(b.column(0, 0)), oracle), 3.0);
}

TEST_F(Particles, MartingaleMean) {
  ParticleOptions opt;
  opt.eps = 2e-3;
  opt.times = {0.0, 0.5, 1.0, 2.0};
  const auto b = particle_batch(spec, sd, mu, 2.0, opt, 200, 31);
  EXPECT_EQ(b.capped, 0u);
  EXPECT_NEAR(median(b.column(0)), 1.0, 1e-2);
  for (std::size_t k = 1; k < opt.times.size(); ++k)
    EXPECT_LE(z_score(mean_se(b.column(k)), inner(sd.phi, sd.phi)), 3.0) << "t=" << opt.times[k];
}

TEST_F(Particles, LaplaceFunctional) {
  const double T = 0.5;
  ParticleOptions opt;
  opt.times = {T};
  opt.observables = {sd.phi};
  const auto b = particle_batch(spec, sd, mu, T, opt, 300, 37);
  std::vector<double> ex;
  for (double v : b.column(0, 0)) ex.push_back(std::exp(-v));
  const double oracle = laplace_functional(spec, sd.grid, sd.phi, sd.phi, T);
  EXPECT_LE(z_score(mean_se(ex), oracle), 3.0) << "oracle " << oracle;
}

TEST_F(Particles, CapMarksPartialOutput) {
  ParticleOptions opt;
  opt.cap = 3000;
  opt.times = {0.0, 0.5, 3.0};
  Rng rng = make_stream(41, 0, stream_tag::particles);
  const auto w = sim_particles(spec, sd, mu, 3.0, opt, rng);
  EXPECT_TRUE(w.capped);
  ASSERT_EQ(w.W.size(), 3u);
  EXPECT_TRUE(std::isfinite(w.W[0]));
  EXPECT_EQ(w.W[2], kInf);
}

TEST_F(Particles, TooFewInitialParticles) {
  ParticleOptions opt;
  opt.eps = 0.1;
  Rng rng = make_stream(43, 0, stream_tag::particles);
  EXPECT_THROW(sim_particles(spec, sd, mu, 1.0, opt, rng), ArgumentError);
}

TEST_F(Particles, ReproducibleStreams) {
  ParticleOptions opt;
  opt.eps = 1e-2;
  const auto a = particle_batch(spec, sd, mu, 0.5, opt, 4, 47);
  const auto c = particle_batch(spec, sd, mu, 0.5, opt, 4, 47);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(a.runs[r].W, c.runs[r].W);
}

TEST(SpineDecomposition, SizeBiasedReweighting) {
  const auto spec = fixtures::load("canon2");
  const auto sd = spectral(spec, 100);
  const PhiTransform tr(spec, sd);
  const auto mu = InitialMeasure::from_density(sd.phi);
  const double T = 0.5;
  DecompositionOptions opt;
  opt.particles.eps = 1e-2;
  opt.particles.times = {T};
  std::vector<double> spine_w, plain_w;
  for (std::size_t r = 0; r < 600; ++r) {
    Rng rng = make_stream(53, r, stream_tag::spine);
    const auto w = sim_spine_decomposition(spec, tr, mu, T, opt, rng);
    ASSERT_LE(w.M[0], w.W[0]);
    spine_w.push_back(w.W[0]);
  }
  const auto plain = particle_batch(spec, sd, mu, T, opt.particles, 600, 59);
  plain_w = plain.column(0);
  const double target = mu.integrate_field(sd.phi);
  for (double theta : {0.5, 1.0, 2.0}) {
    std::vector<double> a, b;
    for (double w : spine_w) a.push_back(std::exp(-theta * w));
    for (double w : plain_w) b.push_back(w / target * std::exp(-theta * w));
    EXPECT_LE(z_score(mean_se(a), mean_se(b)), 3.0) << "theta=" << theta;
  }
}

TEST(SpineDecomposition, NoImmigrationEdgeModel) {
  const auto spec = fixtures::patched("canon2", {{"kernel", {{"family", "point_mass"}, {"u0", 1.0}, {"mass", 0.0}}}});
  const auto sd = spectral(spec, 100);
  const PhiTransform tr(spec, sd);
  DecompositionOptions opt;
  opt.particles.eps = 1e-2;
  opt.particles.times = {0.25, 0.5};
  Rng rng = make_stream(61, 0, stream_tag::spine);
  const auto w = sim_spine_decomposition(spec, tr, InitialMeasure::from_density(sd.phi), 0.5, opt, rng);
  for (double m : w.M) EXPECT_EQ(m, 0.0);
}

TEST(McNlfk, PlainSemigroup) {
  const auto spec = fixtures::load("canon2");
  const auto g = build_grid(spec.domain, 199);
  const auto f = sine(g);
  const double t = 0.5;
  const Eigen::VectorXd Pf = heat_kernel(assemble_A(g, spec), t) * f.values * g->h;
  const auto est = mc_nlfk(spec, plain_weights(), f, kPi / 2, 0, t, 1e-3, 10000, 67);
  EXPECT_NEAR(Pf[2 * 99], std::exp(-t), 1e-3);
  EXPECT_LE(z_score(MeanSE{est.estimate, est.se}, Pf[2 * 99]), 3.0);
}

TEST(McNlfk, ConstantFactorMatchesSolver) {
  const auto spec = fixtures::load("canon2");
  const auto g = build_grid(spec.domain, 199);
  const auto f = sine(g);
  const double t = 0.5;
  const auto w = constant_factor_weights(spec, 0.5);
  const double det = nlfk_solve(spec, g, w, f, t).final().interpolate(kPi / 2, 0);
  const auto est = mc_nlfk(spec, w, f, kPi / 2, 0, t, 1e-3, 20000, 71);
  EXPECT_LE(z_score(MeanSE{est.estimate, est.se}, det), 3.0) << det;
}

TEST(McNlfk, Theorem1Weights) {
  const auto spec = fixtures::load("var2");
  const auto g = build_grid(spec.domain, 150);
  const auto gf = GridField::constant(g, 2, 0.2);
  const double t = 0.5;
  auto u = std::make_shared<const EvolutionTrajectory>(solve_cumulant(spec, g, gf, t));
  const auto w = theorem1_weights(spec, u, spec.convention);
  const auto f = sine(g);
  const double det = nlfk_solve(spec, g, w, f, t).final().interpolate(1.2, 1);
  const auto est = mc_nlfk(spec, w, f, 1.2, 1, t, 1e-3, 20000, 73);
  EXPECT_LE(z_score(MeanSE{est.estimate, est.se}, det), 3.0) << det;
}

TEST(Degeneracy, ConstantSamplesAtTarget) {
  const std::vector<std::vector<double>> s(3, std::vector<double>(200, 0.7));
  const auto rep = degeneracy_test({1, 2, 4}, s, 0.7);
  EXPECT_EQ(rep.verdict, DegeneracyVerdict::L1Limit);
  EXPECT_DOUBLE_EQ(rep.median_drop, 1.0);
}

TEST(Degeneracy, CollapsingMedians) {
  std::vector<std::vector<double>> s;
  for (double scale : {1.0, 0.3, 0.05}) {
    std::vector<double> v;
    for (int k = 0; k < 200; ++k) v.push_back(scale * (1 + k % 7));
    s.push_back(v);
  }
  const auto rep = degeneracy_test({2, 4, 8}, s, 4.0);
  EXPECT_EQ(rep.verdict, DegeneracyVerdict::Degenerate);
  EXPECT_NEAR(rep.median_drop, 20.0, 1e-9);
}

TEST(Degeneracy, InsufficientSamples) {
  const std::vector<std::vector<double>> few(2, std::vector<double>(99, 1.0));
  const auto a = degeneracy_test({1, 2}, few, 1.0);
  EXPECT_EQ(a.verdict, DegeneracyVerdict::Inconclusive);
  EXPECT_NE(a.reason.find("insufficient samples"), std::string::npos);
  const auto b = degeneracy_test({1}, {std::vector<double>(500, 1.0)}, 1.0);
  EXPECT_EQ(b.verdict, DegeneracyVerdict::Inconclusive);
  EXPECT_NE(b.reason.find("insufficient samples"), std::string::npos);
}

TEST(Degeneracy, MeanOffTarget) {
  std::vector<std::vector<double>> s;
  for (int c = 0; c < 2; ++c) {
    std::vector<double> v;
    for (int k = 0; k < 400; ++k) v.push_back(2.0 + 0.01 * (k % 5));
    s.push_back(v);
  }
  const auto rep = degeneracy_test({1, 2}, s, 1.0);
  EXPECT_EQ(rep.verdict, DegeneracyVerdict::Inconclusive);
}

TEST(DegeneracyProperty, ScaleInvariantVerdict) {
  std::vector<std::vector<double>> s;
  for (double scale : {1.0, 0.5, 0.1}) {
    std::vector<double> v;
    for (int k = 0; k < 150; ++k) v.push_back(scale * (0.5 + 0.01 * k));
    s.push_back(v);
  }
  const auto base = degeneracy_test({1, 2, 3}, s, 1.0).verdict;
  for (double c : {0.01, 3.0, 1e4}) {
    auto t = s;
    for (auto& v : t)
      for (double& x : v) x *= c;
    EXPECT_EQ(degeneracy_test({1, 2, 3}, t, c).verdict, base);
  }
}
