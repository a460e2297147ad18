#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "prevsynth/diagnostics.hpp"
#include "prevsynth/inference.hpp"
#include "prevsynth/io.hpp"
#include "prevsynth/synthgen.hpp"

namespace prevsynth::cli {

// Exit codes shared by all subcommands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNonConvergence = 3;
inline constexpr int kExitImpossibleData = 4;

struct LoadedInputs {
  CensusTable census;
  ObservationSet observations;
  ValidationReport report;
  std::vector<std::string> parse_errors;
};

inline LoadedInputs load_inputs(const RunManifest& manifest) {
  LoadedInputs in;
  in.census = load_census(manifest.census_csv);
  auto sources = load_sources(manifest.sources_json);
  auto loaded = load_observations(manifest.observations_csv, std::move(sources));
  in.observations = std::move(loaded.set);
  in.parse_errors = std::move(loaded.parse_errors);
  in.report = validate_observations(in.observations, manifest.structure);
  return in;
}

/// Per-source listing of what the data provide: level, information type and
/// the quantities informed.
inline std::string source_listing(const ObservationSet& obs) {
  std::ostringstream out;
  out << "Information provided by data sources\n";
  for (const auto& id : obs.source_ids()) {
    const auto& meta = obs.sources.at(id);
    std::set<std::string> quantities;
    bool any_biased = false, any_unbiased = false, any_mixture = false;
    for (const auto& o : obs.binomial) {
      if (o.source_id != id) continue;
      quantities.insert(std::string(to_string(o.target.kind)) + "[" +
                        o.target.age_span_label() + "]");
      (o.bias_flag == BiasFlag::biased ? any_biased : any_unbiased) = true;
      any_mixture = any_mixture || o.target.is_mixture();
    }
    for (const auto& o : obs.multinomial) {
      if (o.source_id != id) continue;
      quantities.insert(to_string(o.target));
      any_unbiased = true;
    }
    std::string info = any_biased && any_unbiased ? "both"
                       : any_biased               ? "biased"
                                                  : "unbiased";
    if (any_mixture) info += ", mixture across age groups";
    out << "  " << id << " (" << to_string(meta.level) << ", " << info << "): ";
    bool first = true;
    for (const auto& q : quantities) {
      if (!first) out << ", ";
      out << q;
      first = false;
    }
    out << "\n";
  }
  return out.str();
}

inline int cmd_validate(const RunManifest& manifest, std::ostream& out) {
  LoadedInputs in;
  try {
    in = load_inputs(manifest);
  } catch (const ValidationError& e) {
    out << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  out << source_listing(in.observations);
  bool failed = false;
  for (const auto& e : in.parse_errors) {
    out << "schema error: " << e << "\n";
    failed = true;
  }
  for (const auto& e : in.report.schema_errors) {
    out << "schema error: " << e << "\n";
    failed = true;
  }
  for (const auto& e : in.report.guard_violations) {
    out << "identifiability error: " << e << "\n";
    failed = true;
  }
  if (!failed) out << "validation passed: " << in.observations.binomial.size()
                   << " binomial and " << in.observations.multinomial.size()
                   << " multinomial observations\n";
  return failed ? kExitValidation : kExitOk;
}

inline int cmd_fit(const RunManifest& manifest, bool allow_prior_only, bool trace,
                   std::ostream& out) {
  LoadedInputs in;
  try {
    in = load_inputs(manifest);
  } catch (const ValidationError& e) {
    out << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  if (!in.parse_errors.empty() || !in.report.schema_errors.empty()) {
    for (const auto& e : in.parse_errors) out << "schema error: " << e << "\n";
    for (const auto& e : in.report.schema_errors) out << "schema error: " << e << "\n";
    return kExitValidation;
  }
  if (!in.report.guard_violations.empty() && !allow_prior_only) {
    for (const auto& e : in.report.guard_violations)
      out << "identifiability error: " << e << "\n";
    out << "refusing to fit (rerun with --allow-prior-only to waive the guard)\n";
    return kExitValidation;
  }

  EvidenceModel model(in.observations, in.census, YearGrid(), manifest.structure, PriorSpec{},
                      manifest.options);
  RunResult result = run(model, manifest.sampler);
  if (result.summary.outcome == RunOutcome::impossible_data) {
    out << "impossible data under the model:\n";
    for (const auto& id : result.summary.impossible_observations) out << "  " << id << "\n";
    return kExitImpossibleData;
  }
  auto refs = manifest.reference_sources.empty()
                  ? default_reference_sources(in.observations)
                  : manifest.reference_sources;
  const DevianceReport deviance = posterior_mean_deviance(result.summary, refs);

  fs::create_directories(manifest.output_dir);
  write_json_file(manifest.output_dir / "summary.json",
                  summary_to_json(result.summary, deviance));
  write_text_file(manifest.output_dir / "tables.txt",
                  fit_tables_text(result.summary, in.census));
  if (trace) write_traces_csv(manifest.output_dir, result);
  out << fit_tables_text(result.summary, in.census);
  out << "\nposterior summaries written to " << (manifest.output_dir / "summary.json").string()
      << "\n";
  if (!result.summary.all_converged) {
    out << "warning: convergence not achieved for some quantities (PSRF >= "
        << kConvergenceThreshold << ")\n";
    return kExitNonConvergence;
  }
  return kExitOk;
}

inline int cmd_sweep(const RunManifest& manifest, std::ostream& out) {
  LoadedInputs in;
  try {
    in = load_inputs(manifest);
  } catch (const ValidationError& e) {
    out << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  if (!in.report.schema_errors.empty() || !in.parse_errors.empty()) {
    for (const auto& e : in.parse_errors) out << "schema error: " << e << "\n";
    for (const auto& e : in.report.schema_errors) out << "schema error: " << e << "\n";
    return kExitValidation;
  }
  auto refs = manifest.reference_sources.empty()
                  ? default_reference_sources(in.observations)
                  : manifest.reference_sources;
  const auto entries = bias_sweep(in.observations, in.census, YearGrid(), manifest.sampler,
                                  PriorSpec{}, manifest.options, refs);
  fs::create_directories(manifest.output_dir);
  write_json_file(manifest.output_dir / "sweep.json", sweep_to_json(entries));
  write_text_file(manifest.output_dir / "sweep.txt", sweep_tables_text(entries));
  out << sweep_tables_text(entries);
  return kExitOk;
}

inline int cmd_cv(const RunManifest& manifest, std::ostream& out) {
  LoadedInputs in;
  try {
    in = load_inputs(manifest);
  } catch (const ValidationError& e) {
    out << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  if (!in.report.schema_errors.empty() || !in.parse_errors.empty()) {
    for (const auto& e : in.parse_errors) out << "schema error: " << e << "\n";
    for (const auto& e : in.report.schema_errors) out << "schema error: " << e << "\n";
    return kExitValidation;
  }
  const auto report = lodo_cv(in.observations, in.census, YearGrid(), manifest.structure,
                              manifest.sampler, PriorSpec{}, manifest.options);
  fs::create_directories(manifest.output_dir);
  write_json_file(manifest.output_dir / "cv.json", cv_to_json(report));
  write_text_file(manifest.output_dir / "cv.txt",
                  cv_tables_text(report, in.observations.source_ids()));
  out << cv_tables_text(report, in.observations.source_ids());
  return kExitOk;
}

/// Generates a ready-to-fit bundle from a scenario: observations and census
/// CSVs, source metadata, the true quantity values for recovery scoring, and
/// a manifest pointing at them.
inline int cmd_simulate(const fs::path& scenario_path, const fs::path& out_dir,
                        std::uint64_t seed, std::ostream& out) {
  TrueScenario scenario;
  try {
    scenario = load_scenario(scenario_path);
  } catch (const ValidationError& e) {
    out << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const json::exception& e) {
    out << "error: scenario parse failure: " << e.what() << "\n";
    return kExitValidation;
  }
  const ObservationSet obs = generate_observations(scenario, seed);
  fs::create_directories(out_dir);
  write_census_csv(out_dir / "census.csv", scenario.census);
  write_observations_csv(out_dir / "observations.csv", obs);
  write_json_file(out_dir / "sources.json", sources_to_json(scenario.sources));
  json truth;
  for (const auto& [name, value] : tracked_truth(scenario)) truth[name] = value;
  write_json_file(out_dir / "truth.json", truth);
  SamplerConfig sampler;
  write_manifest_json(out_dir / "manifest.json", "census.csv", "observations.csv",
                      "sources.json", scenario.structure, seed, sampler);
  out << "simulated " << obs.binomial.size() << " binomial and " << obs.multinomial.size()
      << " multinomial observations into " << out_dir.string() << "\n";
  return kExitOk;
}

}  // namespace prevsynth::cli
