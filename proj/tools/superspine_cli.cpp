// superspine: command-line driver.
//
// Exit status: 0 success, 1 experiment ran but a consistency flag is false,
// 2 malformed or invalid scenario, 3 numerical failure (partial report written),
// 64 usage error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "superspine/superspine.hpp"

namespace fs = std::filesystem;
using namespace superspine;
using Json = report::json;

namespace {

enum Exit { kOk = 0, kInconsistent = 1, kBadScenario = 2, kNumeric = 3, kUsage = 64 };

struct RunConfig {
  std::vector<std::string> scenarios;
  std::string out = "out";
  std::uint64_t seed = 1;
  unsigned workers = 0;
  std::size_t M_nodes = 0;  // 0 keeps the default or scenario value
  // evolve
  double g = 0.2, t = 1.0, dt_evolve = 1e-3, kappa = 0.5;
  std::size_t paths = 0;
  // simulate / spine / verify-all
  std::size_t replicates = 0, series_replicates = 0, flatness_replicates = 0;
  double eps = 0.0, dt = 0.0, series_dt = 0.0, flatness_T = 0.0, T = 0.0;
  std::vector<double> times, checkpoints;
};

struct LoadedScenario {
  std::string path;
  std::string text;
  ModelSpec spec;
  std::string fingerprint;
};

std::string resolve(const std::string& p) {
  if (fs::exists(p)) return p;
  if (const char* env = std::getenv("SUPERSPINE_SCENARIO_DIR")) {
    const fs::path alt = fs::path(env) / p;
    if (fs::exists(alt)) return alt.string();
  }
#ifdef SUPERSPINE_SCENARIO_DIR
  const fs::path alt = fs::path(SUPERSPINE_SCENARIO_DIR) / p;
  if (fs::exists(alt)) return alt.string();
#endif
  return p;
}

LoadedScenario load(const std::string& p) {
  LoadedScenario s;
  s.path = resolve(p);
  s.text = read_text_file(s.path);
  s.spec = parse_scenario(s.text);
  s.fingerprint = fingerprint(s.spec);
  return s;
}

ExperimentBudget budget_for(const LoadedScenario& s, const RunConfig& c) {
  ExperimentBudget b;
  report::apply_experiment_block(nlohmann::json::parse(s.text), b);
  b.seed = c.seed;
  b.workers = c.workers;
  if (c.M_nodes) b.M_nodes = c.M_nodes;
  if (c.replicates) b.replicates = c.replicates;
  if (c.series_replicates) b.series_replicates = c.series_replicates;
  if (c.flatness_replicates) b.flatness_replicates = c.flatness_replicates;
  if (c.eps > 0) b.eps = c.eps;
  if (c.dt > 0) b.dt = c.dt;
  if (c.series_dt > 0) b.series_dt = c.series_dt;
  if (c.flatness_T > 0) b.flatness_T = c.flatness_T;
  if (!c.times.empty()) b.w_times = c.times;
  if (!c.checkpoints.empty()) b.series_checkpoints = c.checkpoints;
  b.check();
  return b;
}

fs::path out_dir(const RunConfig& c, const LoadedScenario& s, bool many) {
  return many ? fs::path(c.out) / s.spec.name : fs::path(c.out);
}

Json validation_json(const ValidationReport& rep) {
  Json v = Json::array();
  for (const auto& e : rep.violations)
    v.push_back({{"rule", e.rule}, {"i", e.i + 1}, {"j", e.j + 1}, {"x", e.x}, {"detail", e.detail}});
  return {{"ok", rep.ok()}, {"violations", v}};
}

int cmd_validate(const RunConfig& c) {
  int status = kOk;
  for (const auto& path : c.scenarios) {
    const auto s = load(path);
    const auto rep = validate(s.spec);
    Json body = validation_json(rep);
    body["kernel_llogl_finite"] = Json::array();
    for (std::size_t i = 0; i < s.spec.K; ++i) body["kernel_llogl_finite"].push_back(s.spec.kernel(i).llogl_finite());
    report::write_json(out_dir(c, s, c.scenarios.size() > 1) / "validate.json",
                       report::envelope("validate", s.fingerprint, c.seed, body));
    if (!rep.ok()) {
      for (const auto& e : rep.violations)
        std::cerr << s.path << ": " << e.rule << " violated at (i=" << e.i + 1 << ", j=" << e.j + 1 << ", x=" << e.x
                  << "): " << e.detail << "\n";
      status = kBadScenario;
    } else {
      std::cout << s.path << ": ok\n";
    }
  }
  return status;
}

SpectralData spectral_for(const LoadedScenario& s, const RunConfig& c) {
  require_valid(s.spec);
  return compute_spectral(s.spec, build_grid(s.spec.domain, c.M_nodes ? c.M_nodes : 200));
}

int cmd_spectral(const RunConfig& c) {
  for (const auto& path : c.scenarios) {
    const auto s = load(path);
    const auto sd = spectral_for(s, c);
    const auto a1 = check_assumption1(sd);
    const auto iu = check_iu(sd, {0.2, 0.5, 1.0, 2.0});
    SpectralSummary ss{sd.lambda1, sd.lambda2, sd.gap(), sd.eigen_residual, a1, inner(sd.phi, sd.phi)};
    Json body{{"M_nodes", sd.grid->M}, {"spectral", report::to_json(ss)}, {"iu", report::to_json(iu)}};
    report::write_json(out_dir(c, s, c.scenarios.size() > 1) / "report.json",
                       report::envelope("spectral", s.fingerprint, c.seed, body));
    std::cout << s.spec.name << ": lambda1=" << sd.lambda1 << " lambda2=" << sd.lambda2
              << " assumption1=" << (a1.holds ? "holds" : "fails") << "\n";
  }
  return kOk;
}

int cmd_evolve(const RunConfig& c) {
  for (const auto& path : c.scenarios) {
    const auto s = load(path);
    const auto sd = spectral_for(s, c);
    EvolveOptions opt;
    opt.dt = c.dt_evolve;
    const GridField g = GridField::constant(sd.grid, s.spec.K, c.g);
    const auto rec = theorem1_check(s.spec, sd, g, c.t, opt);
    const double sl = spine_laplace(s.spec, sd, g, c.t, opt);
    auto conv = [](const ConventionResidual& r) {
      return Json{{"convention", to_string(r.convention)}, {"spine_factor", r.spine_factor}, {"rhs", r.rhs},
                  {"residual", r.residual}};
    };
    Json body{{"g", c.g}, {"t", c.t}, {"dt", rec.dt}, {"M_nodes", rec.M_nodes}, {"tilted", rec.lhs},
              {"laplace", rec.laplace}, {"pre_jump", conv(rec.pre)}, {"post_jump", conv(rec.post)},
              {"spine_laplace", sl}};
    // Path cross-check of the constant-factor weights at the midpoint.
    const std::size_t paths = c.paths ? c.paths : 20000;
    const auto& iv = s.spec.interval();
    const double x0 = 0.5 * (iv.lo + iv.hi);
    const auto w = constant_factor_weights(s.spec, c.kappa);
    const auto det = nlfk_solve(s.spec, sd.grid, w, sd.phi, std::min(c.t, 0.5), opt);
    const auto mc = mc_nlfk(s.spec, w, sd.phi, x0, 0, std::min(c.t, 0.5), c.dt_evolve, paths, c.seed, c.workers);
    body["nlfk_crosscheck"] = {{"kappa", c.kappa}, {"x0", x0}, {"t", std::min(c.t, 0.5)},
                               {"deterministic", det.final().interpolate(x0, 0)},
                               {"monte_carlo", {{"estimate", mc.estimate}, {"se", mc.se}, {"paths", mc.paths}}}};
    report::write_json(out_dir(c, s, c.scenarios.size() > 1) / "report.json",
                       report::envelope("evolve", s.fingerprint, c.seed, body));
    std::cout << s.spec.name << ": residual pre=" << rec.pre.residual << " post=" << rec.post.residual << "\n";
  }
  return kOk;
}

int cmd_simulate(const RunConfig& c) {
  for (const auto& path : c.scenarios) {
    const auto s = load(path);
    const auto b = budget_for(s, c);
    const auto sd = spectral_for(s, c);
    ParticleOptions po;
    po.eps = b.eps;
    po.dt = b.dt;
    po.cap = b.particle_cap;
    po.times = b.w_times;
    const double T = *std::max_element(b.w_times.begin(), b.w_times.end());
    const auto batch = particle_batch(s.spec, sd, InitialMeasure::from_density(sd.phi), T, po, b.replicates, b.seed,
                                      stream_tag::particles, b.workers);
    std::vector<std::vector<double>> cols;
    for (std::size_t k = 0; k < batch.times.size(); ++k) cols.push_back(batch.column(k));
    const auto deg = degeneracy_test(batch.times, cols, inner(sd.phi, sd.phi));
    const fs::path dir = out_dir(c, s, c.scenarios.size() > 1);
    Json body{{"budget", report::to_json(b)}, {"capped", batch.capped}, {"degeneracy", report::to_json(deg)}};
    report::write_json(dir / "report.json", report::envelope("simulate", s.fingerprint, c.seed, body));
    std::ostringstream csv;
    write_w_csv(csv, batch.runs);
    report::write_text(dir / "trajectories.csv", csv.str());
    std::cout << s.spec.name << ": " << to_string(deg.verdict) << "\n";
  }
  return kOk;
}

int cmd_spine(const RunConfig& c) {
  for (const auto& path : c.scenarios) {
    const auto s = load(path);
    const auto b = budget_for(s, c);
    const auto sd = spectral_for(s, c);
    const PhiTransform tr(s.spec, sd);
    SeriesConfig sc;
    sc.checkpoints = b.series_checkpoints;
    sc.replicates = b.series_replicates;
    sc.dt = b.series_dt;
    sc.seed = b.seed;
    sc.workers = b.workers;
    const auto batch = spine_series_batch(tr, sc);
    const fs::path dir = out_dir(c, s, c.scenarios.size() > 1);
    Json body{{"budget", report::to_json(b)}, {"series", report::to_json(batch.stats)}};
    report::write_json(dir / "report.json", report::envelope("spine", s.fingerprint, c.seed, body));
    std::ostringstream csv;
    write_series_csv(csv, batch);
    report::write_text(dir / "series.csv", csv.str());
    std::cout << s.spec.name << ": max-stable fraction " << batch.stats.max_stable_fraction << "\n";
  }
  return kOk;
}

int cmd_criterion(const RunConfig& c) {
  for (const auto& path : c.scenarios) {
    const auto s = load(path);
    const auto sd = spectral_for(s, c);
    auto rep = llogl_integral(s.spec, sd);
    rep.fingerprint = s.fingerprint;
    report::write_json(out_dir(c, s, c.scenarios.size() > 1) / "report.json",
                       report::envelope("criterion", s.fingerprint, c.seed, {{"criterion", report::to_json(rep)}}));
    std::cout << s.spec.name << ": llogl " << (rep.llogl_finite ? "finite" : "infinite") << "\n";
  }
  return kOk;
}

int cmd_verify_all(const RunConfig& c) {
  int status = kOk;
  for (const auto& path : c.scenarios) {
    const auto s = load(path);
    require_valid(s.spec);
    const auto b = budget_for(s, c);
    const auto rep = dichotomy_experiment(s.spec, b, s.fingerprint);
    report::write_experiment(out_dir(c, s, c.scenarios.size() > 1), rep);
    std::cout << s.spec.name << ": consistent=" << (rep.consistent ? "true" : "false") << " (" << rep.reason << ")\n";
    if (!rep.errors.empty()) {
      const bool numeric = rep.errors.front().numeric;
      status = std::max(status, numeric ? int(kNumeric) : int(kBadScenario));
    } else if (!rep.consistent) {
      status = std::max(status, int(kInconsistent));
    }
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spine and L log L diagnostics for multitype superdiffusions"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  RunConfig cfg;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-s,--scenario", cfg.scenarios, "scenario JSON (repeatable)")->required();
    sub->add_option("--seed", cfg.seed, "master seed");
    sub->add_option("-o,--out", cfg.out, "output directory");
    sub->add_option("--workers", cfg.workers, "worker threads (default: SUPERSPINE_WORKERS or all cores)");
    sub->add_option("--M", cfg.M_nodes, "interior grid nodes")->check(CLI::PositiveNumber);
  };
  auto budgets = [&](CLI::App* sub) {
    sub->add_option("--replicates", cfg.replicates, "particle replicates")->check(CLI::PositiveNumber);
    sub->add_option("--eps", cfg.eps, "particle mass")->check(CLI::PositiveNumber);
    sub->add_option("--dt", cfg.dt, "particle time step")->check(CLI::PositiveNumber);
    sub->add_option("--times", cfg.times, "W checkpoints")->delimiter(',');
    sub->add_option("--series-replicates", cfg.series_replicates)->check(CLI::PositiveNumber);
    sub->add_option("--series-checkpoints", cfg.checkpoints)->delimiter(',');
    sub->add_option("--series-dt", cfg.series_dt)->check(CLI::PositiveNumber);
    sub->add_option("--flatness-replicates", cfg.flatness_replicates)->check(CLI::PositiveNumber);
    sub->add_option("--flatness-T", cfg.flatness_T)->check(CLI::PositiveNumber);
  };

  auto* v = app.add_subcommand("validate", "structural model checks");
  common(v);
  auto* sp = app.add_subcommand("spectral", "principal eigenpair and IU diagnostics");
  common(sp);
  auto* ev = app.add_subcommand("evolve", "identity check and Feynman-Kac cross-checks");
  common(ev);
  ev->add_option("--g", cfg.g, "constant test function")->check(CLI::NonNegativeNumber);
  ev->add_option("--t", cfg.t, "horizon")->check(CLI::PositiveNumber);
  ev->add_option("--dt", cfg.dt_evolve, "time step")->check(CLI::PositiveNumber);
  ev->add_option("--kappa", cfg.kappa, "constant jump factor")->check(CLI::PositiveNumber);
  ev->add_option("--paths", cfg.paths, "Monte Carlo paths")->check(CLI::PositiveNumber);
  auto* si = app.add_subcommand("simulate", "particle batch and degeneracy verdict");
  common(si);
  budgets(si);
  auto* spn = app.add_subcommand("spine", "spine series statistics");
  common(spn);
  budgets(spn);
  auto* cr = app.add_subcommand("criterion", "L log L integral");
  common(cr);
  auto* va = app.add_subcommand("verify-all", "full dichotomy experiment");
  common(va);
  budgets(va);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*v) return cmd_validate(cfg);
    if (*sp) return cmd_spectral(cfg);
    if (*ev) return cmd_evolve(cfg);
    if (*si) return cmd_simulate(cfg);
    if (*spn) return cmd_spine(cfg);
    if (*cr) return cmd_criterion(cfg);
    if (*va) return cmd_verify_all(cfg);
  } catch (const ScenarioError& e) {
    std::cerr << "scenario error at " << e.what() << "\n";
    return kBadScenario;
  } catch (const ModelError& e) {
    std::cerr << "invalid scenario: " << e.what() << "\n";
    return kBadScenario;
  } catch (const ArgumentError& e) {
    std::cerr << "bad argument: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
  return kUsage;
}
