#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "prevsynth/deviance.hpp"
#include "prevsynth/inference.hpp"
#include "prevsynth/observation.hpp"

namespace prevsynth {

// ---------------------------------------------------------------------------
// Model comparison: bias-formulation sweep and leave-one-data-source-out
// cross-validation. Every refit reuses the caller's sampler configuration and
// seed so differences are attributable to data/structure, not Monte-Carlo
// noise beyond the quantified standard errors.
// ---------------------------------------------------------------------------

/// Sources carrying at least one biased-flagged observation: the reference
/// set whose deviance is reported separately from the always-unbiased group.
inline std::vector<std::string> default_reference_sources(const ObservationSet& obs) {
  std::set<std::string> ref;
  for (const auto& o : obs.binomial)
    if (o.bias_flag == BiasFlag::biased) ref.insert(o.source_id);
  return {ref.begin(), ref.end()};
}

inline DevianceReport posterior_mean_deviance(const PosteriorSummary& summary,
                                              std::vector<std::string> reference_sources) {
  DevianceReport report;
  report.per_source = summary.source_mean_deviance;
  report.reference_sources = std::move(reference_sources);
  report.finalize();
  return report;
}

/// Table-6-style columns: the aggregate proportions and prevalences.
inline const std::vector<std::string>& key_quantity_names() {
  static const std::vector<std::string> names = {"rho_cur", "rho_ex", "pi_cur",
                                                 "pi_ex",   "pi_non", "pi"};
  return names;
}

struct SweepEntry {
  BiasStructure variant = BiasStructure::b1;
  std::vector<std::string> guard_violations;
  DevianceReport deviance;
  std::map<std::string, QuantitySummary> key_quantities;
  bool all_converged = true;
  double model_deviance_mc_se = 0.0;
};

/// Fits all seven bias formulations under identical data, configuration and
/// seeds. Non-convergence of a variant is recorded, not fatal.
inline std::vector<SweepEntry> bias_sweep(const ObservationSet& obs, const CensusTable& census,
                                          const YearGrid& grid, const SamplerConfig& cfg,
                                          const PriorSpec& priors = {},
                                          const LikelihoodOptions& options = {},
                                          std::vector<std::string> reference_sources = {}) {
  if (reference_sources.empty()) reference_sources = default_reference_sources(obs);
  std::vector<SweepEntry> entries;
  for (BiasStructure variant : {BiasStructure::b1, BiasStructure::b2, BiasStructure::b3,
                                BiasStructure::b4, BiasStructure::b5, BiasStructure::b6,
                                BiasStructure::b7}) {
    SweepEntry entry;
    entry.variant = variant;
    entry.guard_violations = identifiability_violations(obs, variant);
    EvidenceModel model(obs, census, grid, variant, priors, options);
    RunResult result = run(model, cfg);
    entry.deviance = posterior_mean_deviance(result.summary, reference_sources);
    for (const auto& name : key_quantity_names())
      entry.key_quantities[name] = result.summary.at(name);
    entry.all_converged = result.summary.all_converged;
    double se2 = 0.0;
    for (const auto& [id, se] : result.summary.source_deviance_mc_se) se2 += se * se;
    entry.model_deviance_mc_se = std::sqrt(se2);
    entries.push_back(std::move(entry));
  }
  return entries;
}

struct CvRow {
  std::string removed;  // "None" for the full model
  std::vector<std::string> guard_violations;
  std::map<std::string, double> deviance_by_source;
  std::map<std::string, QuantitySummary> key_quantities;
  std::vector<QuantitySummary> quantities;  // every tracked quantity
  std::vector<std::string> nonconverged;    // tracked quantities with PSRF >= threshold
  bool all_converged = true;

  const QuantitySummary* find(const std::string& name) const {
    for (const auto& q : quantities)
      if (q.name == name) return &q;
    return nullptr;
  }
};

struct CvReport {
  std::vector<CvRow> rows;
  /// (source j, removed k) pairs where source j's posterior mean deviance
  /// decreased when k was removed: the two sources are potentially in
  /// conflict.
  std::vector<std::pair<std::string, std::string>> conflicts;
};

/// The conflict rule: source j conflicts with removed source k when j's
/// deviance under the refit without k is below its full-model deviance.
inline std::vector<std::pair<std::string, std::string>> detect_conflicts(
    const std::vector<CvRow>& rows) {
  std::vector<std::pair<std::string, std::string>> conflicts;
  if (rows.empty()) return conflicts;
  const auto& full = rows.front().deviance_by_source;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    for (const auto& [j, dev] : rows[r].deviance_by_source) {
      auto it = full.find(j);
      if (it != full.end() && dev < it->second)
        conflicts.emplace_back(j, rows[r].removed);
    }
  }
  return conflicts;
}

/// Removes one data source at a time and refits. Expected non-convergence
/// (e.g. the sole unbiased informant of a family removed) is flagged per row,
/// mirroring how such refits are reported rather than aborted.
inline CvReport lodo_cv(const ObservationSet& obs, const CensusTable& census,
                        const YearGrid& grid, BiasStructure structure,
                        const SamplerConfig& cfg, const PriorSpec& priors = {},
                        const LikelihoodOptions& options = {}) {
  const auto ids = obs.source_ids();
  if (ids.size() < 2) throw ValidationError("lodo_cv: need at least 2 sources");
  CvReport report;
  auto fit_row = [&](const std::string& removed, const ObservationSet& subset) {
    CvRow row;
    row.removed = removed;
    row.guard_violations = identifiability_violations(subset, structure);
    EvidenceModel model(subset, census, grid, structure, priors, options);
    RunResult result = run(model, cfg);
    row.deviance_by_source = result.summary.source_mean_deviance;
    for (const auto& name : key_quantity_names())
      row.key_quantities[name] = result.summary.at(name);
    row.quantities = result.summary.quantities;
    for (const auto& q : result.summary.quantities)
      if (!q.converged) row.nonconverged.push_back(q.name);
    row.all_converged = result.summary.all_converged;
    report.rows.push_back(std::move(row));
  };
  fit_row("None", obs);
  for (const auto& id : ids) fit_row(id, obs.without_source(id));
  report.conflicts = detect_conflicts(report.rows);
  return report;
}

}  // namespace prevsynth
