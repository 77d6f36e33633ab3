// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "superspine/superspine.hpp"

using namespace superspine;
namespace fs = std::filesystem;

namespace {

const double kPi = std::numbers::pi;

std::string scenario_path(const std::string& name) { return std::string(SUPERSPINE_SCENARIO_DIR) + "/" + name + ".json"; }
ModelSpec load(const std::string& name) { return load_scenario(scenario_path(name)); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "!") + what;
  }
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

int failures = 0;

void run(int id, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_s > 0) o.require(secs < limit_s, fmt("runtime %.1fs < %.0fs", secs, limit_s));
  else o.detail += fmt("; runtime %.1fs", secs);
  if (!o.pass) ++failures;
  std::printf("%s criterion %d: %s\n", o.pass ? "PASS" : "FAIL", id, o.detail.c_str());
  std::fflush(stdout);
}

double sine_phi(double x) { return std::sin(x) / std::sqrt(kPi); }

ExperimentBudget scenario_budget(const std::string& name, std::uint64_t seed) {
  ExperimentBudget b;
  report::apply_experiment_block(nlohmann::json::parse(read_text_file(scenario_path(name))), b);
  b.seed = seed;
  return b;
}

ExperimentReport experiment(const std::string& name, std::uint64_t seed) {
  const auto spec = load(name);
  return dichotomy_experiment(spec, scenario_budget(name, seed), fingerprint(spec));
}

}  // namespace

int main() {
  const auto canon2 = load("canon2");
  const auto var2 = load("var2");
  const auto canonH = load("canonH");

  run(1, 5.0, [&] {
    Outcome o;
    const auto sd = compute_spectral(canon2, build_grid(canon2.domain, 200));
    double err = 0.0;
    for (std::size_t m = 0; m < sd.grid->M; ++m)
      for (std::size_t k = 0; k < 2; ++k) err = std::max(err, std::abs(sd.phi(m, k) - sine_phi(sd.grid->nodes[m])));
    o.require(std::abs(sd.lambda1 - 1.0) <= 5e-3, fmt("lambda1 %.6f", sd.lambda1));
    o.require(std::abs(sd.lambda2 + 2.0) <= 2e-2, fmt("lambda2 %.6f", sd.lambda2));
    o.require(err <= 5e-3, fmt("|phi - sin/sqrt(pi)| %.2e", err));
    return o;
  });

  const auto sd2 = compute_spectral(canon2, build_grid(canon2.domain, 200));
  const auto mu_phi = InitialMeasure::from_density(sd2.phi);

  run(2, 300.0, [&] {
    Outcome o;
    const auto bump = GridField::from_function(sd2.grid, 2, [](double x, std::size_t k) {
      const double s = 0.1;
      return (k == 0 ? 1.0 : 0.5) / ((1 + std::exp(-(x - kPi / 4) / s)) * (1 + std::exp((x - 3 * kPi / 4) / s)));
    });
    ParticleOptions opt;
    opt.eps = 1e-3;
    opt.times = {1.0};
    opt.observables = {sd2.phi, bump};
    const auto b = particle_batch(canon2, sd2, mu_phi, 1.0, opt, 200, 101);
    const char* names[] = {"phi", "smoothed indicator"};
    for (int q = 0; q < 2; ++q) {
      const double oracle = mu_phi.integrate_field(solve_mean(sd2, opt.observables[static_cast<std::size_t>(q)], 1.0));
      const double z = z_score(mean_se(b.column(0, q)), oracle);
      o.require(z <= 3.0, std::string(names[q]) + fmt(" z %.2f (oracle %.4f)", z, oracle));
    }
    return o;
  });

  run(3, 0, [&] {
    Outcome o;
    ParticleOptions opt;
    opt.eps = 1e-3;
    opt.times = {0.5, 1.0, 2.0};
    const auto b = particle_batch(canon2, sd2, mu_phi, 2.0, opt, 200, 103);
    const double target = mu_phi.integrate_field(sd2.phi);
    o.require(b.capped == 0, "no capped replicates");
    for (std::size_t k = 0; k < opt.times.size(); ++k) {
      const double z = z_score(mean_se(b.column(k)), target);
      o.require(z <= 3.0, fmt("W_%.1f z %.2f", opt.times[k], z));
    }
    ExperimentBudget fb;
    fb.seed = 105;
    const auto flat = h_flatness(canon2, sd2, fb);
    o.require(flat.rows.size() >= 3 && flat.flat, fmt("h flat over %.0f starts, max pair z %.2f",
                                                      static_cast<double>(flat.rows.size()), flat.max_pair_z));
    return o;
  });

  run(4, 60.0, [&] {
    Outcome o;
    // A type-2 start separates the two jump-time conventions.
    auto residuals = [&](std::size_t M, double dt) {
      const auto sd = compute_spectral(var2, build_grid(var2.domain, M));
      const auto mu = GridField::from_function(sd.grid, 2, [&](double x, std::size_t k) { return k == 1 ? sd.phi.interpolate(x, 1) : 0.0; });
      EvolveOptions opt;
      opt.dt = dt;
      return theorem1_check(var2, sd, GridField::constant(sd.grid, 2, 0.2), 1.0, opt, 1.0, &mu);
    };
    const auto base = residuals(200, 1e-3);
    const auto fine = residuals(400, 5e-4);
    const auto& good = base.pre.residual <= base.post.residual ? base.pre : base.post;
    const auto& good_fine = fine.for_convention(good.convention);
    const auto bad = good.convention == JumpConvention::PreJump ? JumpConvention::PostJump : JumpConvention::PreJump;
    o.require(good.convention == var2.convention, good.convention == JumpConvention::PreJump ? "pre_jump consistent" : "post_jump consistent");
    o.require(good.residual <= 1e-3, fmt("residual %.2e", good.residual));
    o.require(good.residual >= 3.0 * good_fine.residual, fmt("refinement ratio %.2f", good.residual / good_fine.residual));
    const double b0 = base.for_convention(bad).residual, b1 = fine.for_convention(bad).residual;
    o.require(b1 >= b0 / 1.5, fmt("other convention %.3e -> %.3e", b0, b1));
    return o;
  });

  run(5, 300.0, [&] {
    Outcome o;
    const double t = 0.5;
    {
      const auto g = build_grid(canon2.domain, 199);
      const auto f = GridField::from_function(g, 2, [](double x, std::size_t) { return std::sin(x); });
      const auto w = constant_factor_weights(canon2, 0.5);
      const double det = nlfk_solve(canon2, g, w, f, t).final().interpolate(kPi / 2, 0);
      const auto est = mc_nlfk(canon2, w, f, kPi / 2, 0, t, 1e-3, 100000, 107);
      const double z = z_score(MeanSE{est.estimate, est.se}, det);
      o.require(z <= 3.0, fmt("constant factor z %.2f", z));
    }
    {
      const auto g = build_grid(var2.domain, 150);
      auto u = std::make_shared<const EvolutionTrajectory>(solve_cumulant(var2, g, GridField::constant(g, 2, 0.2), t));
      const auto w = theorem1_weights(var2, u, var2.convention);
      const auto f = GridField::from_function(g, 2, [](double x, std::size_t) { return std::sin(x); });
      const double det = nlfk_solve(var2, g, w, f, t).final().interpolate(1.2, 1);
      const auto est = mc_nlfk(var2, w, f, 1.2, 1, t, 1e-3, 100000, 109);
      const double z = z_score(MeanSE{est.estimate, est.se}, det);
      o.require(z <= 3.0, fmt("tilted weights z %.2f", z));
    }
    return o;
  });

  run(6, 0, [&] {
    Outcome o;
    const double T = 1.0;
    const std::size_t n = 500;
    const PhiTransform tr(canon2, sd2);
    DecompositionOptions opt;
    opt.particles.eps = 1e-3;
    opt.particles.times = {T};
    std::vector<double> spine_w(n);
    parallel_for(n, [&](std::size_t r) {
      Rng rng = make_stream(111, r, stream_tag::decomposition);
      spine_w[r] = sim_spine_decomposition(canon2, tr, mu_phi, T, opt, rng).W[0];
    });
    const auto plain = particle_batch(canon2, sd2, mu_phi, T, opt.particles, n, 113).column(0);
    const double target = mu_phi.integrate_field(sd2.phi);
    for (double theta : {0.5, 1.0, 2.0}) {
      std::vector<double> a, b;
      for (double w : spine_w) a.push_back(std::exp(-theta * w));
      for (double w : plain) b.push_back(w / target * std::exp(-theta * w));
      const double z = z_score(mean_se(a), mean_se(b));
      o.require(z <= 3.0, fmt("theta %.1f z %.2f", theta, z));
    }
    return o;
  });

  run(7, 600.0, [&] {
    Outcome o;
    const PhiTransform tr(canon2, sd2);
    SeriesConfig cfg;
    cfg.checkpoints = {20.0, 40.0, 50.0};
    cfg.replicates = 10000;
    cfg.seed = 115;
    const auto light = spine_series_batch(tr, cfg).stats;
    const double closed = 8.0 / (3.0 * std::pow(kPi, 1.5)) / sd2.lambda1;
    const double z = z_score(light.rows[2].mean_S, closed);
    o.require(z <= 3.0, fmt("mean S_50 %.4f, z %.2f", light.rows[2].mean_S.mean, z));
    const double drift = std::abs(light.rows[1].median_S / light.rows[0].median_S - 1.0);
    o.require(drift <= 1e-2, fmt("median change 20->40 %.2f%%", 100 * drift));

    const auto sdH = compute_spectral(canonH, build_grid(canonH.domain, 200));
    const PhiTransform trH(canonH, sdH);
    SeriesConfig hc;
    hc.checkpoints = {10.0, 20.0, 40.0};
    hc.replicates = 10000;
    hc.seed = 117;
    const auto heavy = spine_series_batch(trH, hc).stats;
    o.require(heavy.exceedance_monotone(true), "exceedance strictly increasing");
    const double e10 = heavy.rows[0].exceedance[2], e40 = heavy.rows[2].exceedance[2];
    o.require(e40 >= 2.0 * e10, fmt("L=100 exceedance %.4f -> %.4f", e10, e40));
    return o;
  });

  ExperimentReport c2_seed1;
  run(8, 1800.0, [&] {
    Outcome o;
    c2_seed1 = experiment("canon2", 1);
    o.require(c2_seed1.criterion && c2_seed1.criterion->llogl_finite, "canon2 criterion finite");
    o.require(c2_seed1.degeneracy && c2_seed1.degeneracy->verdict == DegeneracyVerdict::L1Limit, "canon2 W L1 limit");
    o.require(c2_seed1.consistent, "canon2 consistent");
    const auto h = experiment("canonH", 1);
    o.require(h.criterion && !h.criterion->llogl_finite, "canonH criterion infinite");
    o.require(h.budget.eps == 1e-3 && h.budget.w_times.front() == 2.0 && h.budget.w_times.back() == 8.0, "eps 1e-3, T 2..8");
    o.require(h.degeneracy && h.degeneracy->verdict == DegeneracyVerdict::Degenerate,
              fmt("canonH median drop %.2f", h.degeneracy ? h.degeneracy->median_drop : 0.0));
    o.require(h.degeneracy && h.degeneracy->median_drop >= 5.0, "drop >= 5");
    o.require(h.consistent, "canonH consistent");
    return o;
  });

  run(9, 0, [&] {
    Outcome o;
    const std::vector<double> times{0.2, 0.5, 1.0, 1.5, 2.0};
    for (const auto* s : {&canon2, &var2}) {
      const auto sd = compute_spectral(*s, build_grid(s->domain, 200));
      const auto iu = check_iu(sd, times);
      o.require(iu.c_t_finite && iu.bound_holds, s->name + fmt(" c_t finite, C %.3f", iu.fitted_C));
      if (s == &canon2) {
        const double lo = 2.0 / std::pow(kPi, 1.5), hi = 1.0 / std::sqrt(kPi);
        o.require(iu.C9 >= lo / 2 && iu.C9 <= lo * 2, fmt("C9 %.4f vs %.4f", iu.C9, lo));
        o.require(iu.C10 >= hi / 2 && iu.C10 <= hi * 2, fmt("C10 %.4f vs %.4f", iu.C10, hi));
      }
    }
    return o;
  });

  run(10, 0, [&] {
    Outcome o;
    const fs::path root = fs::temp_directory_path() / ("superspine_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    const auto again = experiment("canon2", 1);
    const auto other = experiment("canon2", 2);
    report::write_experiment(root / "a", c2_seed1);
    report::write_experiment(root / "b", again);
    report::write_experiment(root / "c", other);
    for (const char* csv : {"trajectories.csv", "series.csv"}) {
      const auto a = slurp(root / "a" / csv);
      o.require(!a.empty() && a == slurp(root / "b" / csv), std::string(csv) + " identical");
    }
    o.require(other.consistent == c2_seed1.consistent && other.degeneracy && c2_seed1.degeneracy &&
                  other.degeneracy->verdict == c2_seed1.degeneracy->verdict,
              "seed 2 verdicts agree");
    fs::remove_all(root);
    return o;
  });

  return failures == 0 ? 0 : 1;
}
