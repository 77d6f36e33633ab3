#pragma once

// JSON and CSV persistence for experiment reports.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "superspine/criterion.hpp"
#include "superspine/errors.hpp"

#ifndef SUPERSPINE_VERSION
#define SUPERSPINE_VERSION "0.0.0"
#endif

namespace superspine {

inline constexpr const char* kToolVersion = SUPERSPINE_VERSION;

namespace report {

using json = nlohmann::ordered_json;

/// Non-finite values become the strings "inf", "-inf" and "nan".
inline json num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

inline json nums(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

inline json to_json(const MeanSE& m) { return {{"mean", num(m.mean)}, {"se", num(m.se)}, {"n", m.n}}; }

inline json to_json(const ExperimentBudget& b) {
  return {{"M_nodes", b.M_nodes},
          {"replicates", b.replicates},
          {"w_times", nums(b.w_times)},
          {"eps", b.eps},
          {"dt", b.dt},
          {"particle_cap", b.particle_cap},
          {"series_replicates", b.series_replicates},
          {"series_checkpoints", nums(b.series_checkpoints)},
          {"series_dt", b.series_dt},
          {"flatness_replicates", b.flatness_replicates},
          {"flatness_T", b.flatness_T},
          {"iu_times", nums(b.iu_times)},
          {"seed", b.seed}};
}

inline json to_json(const SpectralSummary& s) {
  return {{"lambda1", num(s.lambda1)},
          {"lambda2", num(s.lambda2)},
          {"gap", num(s.gap)},
          {"eigen_residual", num(s.eigen_residual)},
          {"phi_mu", num(s.phi_mu)},
          {"assumption1",
           {{"holds", s.assumption1.holds},
            {"sup_phi", num(s.assumption1.sup_phi)},
            {"C9", num(s.assumption1.min_phi_over_dist)},
            {"C10", num(s.assumption1.max_phi_over_dist)}}}};
}

inline json to_json(const IUReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"t", row.t}, {"c_t", num(row.c_t)}, {"delta", num(row.delta)}, {"bound", num(row.bound)}});
  return {{"rows", rows},
          {"fitted_C", num(r.fitted_C)},
          {"fitted_rate", num(r.fitted_rate)},
          {"gap", num(r.gap)},
          {"C9", num(r.C9)},
          {"C10", num(r.C10)},
          {"c_t_finite", r.c_t_finite},
          {"bound_holds", r.bound_holds},
          {"delta_nonincreasing", r.delta_nonincreasing}};
}

inline json to_json(const CriterionReport& c) {
  json rows = json::array();
  for (const auto& r : c.cutoffs)
    rows.push_back({{"log_cutoff", r.log_cutoff}, {"per_type", nums(r.per_type)}, {"total", num(r.total)}});
  return {{"llogl_finite", c.llogl_finite},
          {"per_type", nums(c.per_type)},
          {"total", num(c.total)},
          {"cutoff_table", rows},
          {"cutoffs_increasing", c.cutoffs_increasing},
          {"fingerprint", c.fingerprint}};
}

inline json to_json(const SeriesStats& s) {
  json rows = json::array();
  for (const auto& r : s.rows)
    rows.push_back({{"T", r.T},
                    {"mean_S", to_json(r.mean_S)},
                    {"median_S", num(r.median_S)},
                    {"median_log_S", num(r.median_log_S)},
                    {"exceedance", nums(r.exceedance)},
                    {"mean_big_marks", num(r.mean_big_marks)}});
  return {{"replicates", s.replicates},
          {"thresholds", nums(s.thresholds)},
          {"rows", rows},
          {"max_stable_fraction", num(s.max_stable_fraction)},
          {"exceedance_monotone", s.exceedance_monotone()}};
}

inline json to_json(const DegeneracyReport& d) {
  json rows = json::array();
  for (std::size_t k = 0; k < d.times.size(); ++k)
    rows.push_back({{"t", d.times[k]},
                    {"mean", to_json(d.means[k])},
                    {"median", num(d.medians[k])},
                    {"z", num(d.z_scores[k])}});
  return {{"target", num(d.target)},
          {"rows", rows},
          {"median_drop", num(d.median_drop)},
          {"verdict", to_string(d.verdict)},
          {"reason", d.reason}};
}

inline json to_json(const FlatnessTable& f) {
  json rows = json::array();
  for (const auto& r : f.rows)
    rows.push_back({{"x", r.x}, {"type", r.type + 1}, {"phi", num(r.phi)}, {"ratio", to_json(r.ratio)}});
  return {{"T", f.T}, {"rows", rows}, {"max_pair_z", num(f.max_pair_z)}, {"flat", f.flat}};
}

inline json to_json(const ExperimentReport& r) {
  json j;
  j["tool"] = "superspine";
  j["version"] = kToolVersion;
  j["scenario"] = r.scenario;
  j["fingerprint"] = r.fingerprint;
  j["seed"] = r.budget.seed;
  j["budget"] = to_json(r.budget);
  j["spectral"] = r.spectral ? to_json(*r.spectral) : json(nullptr);
  j["iu"] = r.iu ? to_json(*r.iu) : json(nullptr);
  j["criterion"] = r.criterion ? to_json(*r.criterion) : json(nullptr);
  j["series"] = r.series ? to_json(*r.series) : json(nullptr);
  j["degeneracy"] = r.degeneracy ? to_json(*r.degeneracy) : json(nullptr);
  j["flatness"] = r.flatness ? to_json(*r.flatness) : json(nullptr);
  json errs = json::array();
  for (const auto& e : r.errors) errs.push_back({{"stage", e.stage}, {"message", e.message}, {"numeric", e.numeric}});
  j["errors"] = errs;
  j["consistent"] = r.consistent;
  j["reason"] = r.reason;
  return j;
}

/// Reads the optional "experiment" block of a scenario document into a budget.
inline void apply_experiment_block(const nlohmann::json& doc, ExperimentBudget& b) {
  if (!doc.is_object() || !doc.contains("experiment")) return;
  const auto& e = doc.at("experiment");
  if (!e.is_object()) throw ScenarioError("$.experiment", "experiment block must be an object");
  auto get = [&](const char* key, auto& target) {
    if (!e.contains(key)) return;
    try {
      e.at(key).get_to(target);
    } catch (const nlohmann::json::exception&) {
      throw ScenarioError(std::string("$.experiment.") + key, "wrong type");
    }
  };
  get("M_nodes", b.M_nodes);
  get("replicates", b.replicates);
  get("w_times", b.w_times);
  get("eps", b.eps);
  get("dt", b.dt);
  get("particle_cap", b.particle_cap);
  get("series_replicates", b.series_replicates);
  get("series_checkpoints", b.series_checkpoints);
  get("series_dt", b.series_dt);
  get("flatness_replicates", b.flatness_replicates);
  get("flatness_T", b.flatness_T);
  get("iu_times", b.iu_times);
}

/// Adds the reproducibility block shared by every subcommand.
inline json envelope(const std::string& command, const std::string& fingerprint, std::uint64_t seed, json body) {
  json j;
  j["tool"] = "superspine";
  j["version"] = kToolVersion;
  j["command"] = command;
  j["fingerprint"] = fingerprint;
  j["seed"] = seed;
  for (auto& [k, v] : body.items()) j[k] = v;
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ResourceError("cannot write " + path.string());
  os << text;
  if (!os) throw ResourceError("write failed for " + path.string());
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// report.json, trajectories.csv and series.csv for one experiment.
inline void write_experiment(const std::filesystem::path& dir, const ExperimentReport& r) {
  std::filesystem::create_directories(dir);
  write_json(dir / "report.json", to_json(r));
  std::ostringstream tr;
  write_w_csv(tr, r.w_runs);
  write_text(dir / "trajectories.csv", tr.str());
  std::ostringstream se;
  if (r.series_batch) write_series_csv(se, *r.series_batch);
  else se << "replicate,T_checkpoint,S_T,max_term\n";
  write_text(dir / "series.csv", se.str());
}

}  // namespace report
}  // namespace superspine
