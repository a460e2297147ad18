#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "prevsynth/quantities.hpp"
#include "prevsynth/strata.hpp"

namespace prevsynth {

// ---------------------------------------------------------------------------
// How data sources inform quantities: unbiased, biased on the logit scale, or
// mixed across strata, with binomial/multinomial likelihood contributions.
// ---------------------------------------------------------------------------

enum class GeographicLevel { city, metro, national };

inline const char* to_string(GeographicLevel l) {
  switch (l) {
    case GeographicLevel::city: return "city";
    case GeographicLevel::metro: return "metro";
    case GeographicLevel::national: return "national";
  }
  return "?";
}

/// Per-source metadata. Non-city sources carry multipliers converting their
/// estimates to the city level: a group factor keyed by risk-group label and
/// an age factor keyed by the exact age span label the source reports on.
struct DataSourceMeta {
  std::string id;
  std::string description;
  GeographicLevel level = GeographicLevel::city;
  std::map<std::string, double> group_multipliers;  // by group label
  std::map<std::string, double> age_multipliers;    // by age span label
};

enum class TargetKind {
  rho_ever,
  rho_cur,
  rho_ex,
  pi_non,
  pi_cur,
  pi_ex,
  pi_ever_cell,
  pi_cur_tss,
};

inline const char* to_string(TargetKind k) {
  switch (k) {
    case TargetKind::rho_ever: return "rho_ever";
    case TargetKind::rho_cur: return "rho_cur";
    case TargetKind::rho_ex: return "rho_ex";
    case TargetKind::pi_non: return "pi_non";
    case TargetKind::pi_cur: return "pi_cur";
    case TargetKind::pi_ex: return "pi_ex";
    case TargetKind::pi_ever_cell: return "pi_ever_cell";
    case TargetKind::pi_cur_tss: return "pi_cur_tss";
  }
  return "?";
}

/// Risk-group label a target informs, used to select bias keys and to check
/// identifiability.
inline GroupLabel group_of(TargetKind k) {
  switch (k) {
    case TargetKind::rho_ever:
    case TargetKind::pi_ever_cell: return GroupLabel::ever;
    case TargetKind::rho_cur:
    case TargetKind::pi_cur:
    case TargetKind::pi_cur_tss: return GroupLabel::current;
    case TargetKind::rho_ex:
    case TargetKind::pi_ex: return GroupLabel::ex;
    case TargetKind::pi_non: return GroupLabel::non;
  }
  return GroupLabel::ever;
}

/// What a binomial observation informs. A span wider than one age band makes
/// the target a census-weighted mixture of the per-band quantities (all
/// components share the target's risk group).
struct TargetSpec {
  TargetKind kind = TargetKind::rho_ever;
  int age_lo = 0;    // age-group index of the first band covered
  int age_hi = 0;    // age-group index of the last band covered
  int d_cat = -1;    // duration category, pi_ever_cell only
  int tss_cat = -1;  // tss category, pi_ever_cell and pi_cur_tss

  bool is_mixture() const { return age_hi > age_lo; }

  std::string age_span_label() const {
    return std::to_string(age_groups()[static_cast<std::size_t>(age_lo)].lower_bound) + "-" +
           std::to_string(age_groups()[static_cast<std::size_t>(age_hi)].upper_bound);
  }
};

enum class BiasFlag { unbiased, biased };

struct BinomialObservation {
  std::string source_id;
  long y = 0;
  long n = 0;
  TargetSpec target;
  BiasFlag bias_flag = BiasFlag::unbiased;
  int csv_line = -1;  // provenance for validation messages

  std::string label() const {
    return source_id + ":" + to_string(target.kind) + "[" + target.age_span_label() + "]";
  }
};

/// Distribution a multinomial observation informs. All are treated as
/// unbiased; the group-conditional variants encode the length-bias
/// correction themselves.
enum class MultinomialTarget {
  f_d_ever,
  f_tss_ever,
  f_aafu_ever,
  f_d_ex,
  f_tss_cur,
  f_tss_ex,
  f_aafu_cur,
  f_aafu_ex,
};

inline const char* to_string(MultinomialTarget t) {
  switch (t) {
    case MultinomialTarget::f_d_ever: return "f_d_ever";
    case MultinomialTarget::f_tss_ever: return "f_tss_ever";
    case MultinomialTarget::f_aafu_ever: return "f_aafu_ever";
    case MultinomialTarget::f_d_ex: return "f_d_ex";
    case MultinomialTarget::f_tss_cur: return "f_tss_cur";
    case MultinomialTarget::f_tss_ex: return "f_tss_ex";
    case MultinomialTarget::f_aafu_cur: return "f_aafu_cur";
    case MultinomialTarget::f_aafu_ex: return "f_aafu_ex";
  }
  return "?";
}

inline std::size_t category_count(MultinomialTarget t) {
  switch (t) {
    case MultinomialTarget::f_aafu_ever:
    case MultinomialTarget::f_aafu_cur:
    case MultinomialTarget::f_aafu_ex: return kNumAafuCats;
    default: return kNumDurationCats;
  }
}

struct MultinomialObservation {
  std::string source_id;
  std::vector<long> counts;
  MultinomialTarget target = MultinomialTarget::f_d_ever;
  int csv_line = -1;

  long total() const {
    long n = 0;
    for (long c : counts) n += c;
    return n;
  }
  std::string label() const { return source_id + ":" + to_string(target); }
};

// ---------------------------------------------------------------------------
// Bias structures B1-B7
// ---------------------------------------------------------------------------

enum class BiasStructure { b1, b2, b3, b4, b5, b6, b7 };

inline const char* to_string(BiasStructure s) {
  switch (s) {
    case BiasStructure::b1: return "b1";
    case BiasStructure::b2: return "b2";
    case BiasStructure::b3: return "b3";
    case BiasStructure::b4: return "b4";
    case BiasStructure::b5: return "b5";
    case BiasStructure::b6: return "b6";
    case BiasStructure::b7: return "b7";
  }
  return "?";
}

inline const char* describe(BiasStructure s) {
  switch (s) {
    case BiasStructure::b1: return "no bias";
    case BiasStructure::b2: return "current IDU no bias";
    case BiasStructure::b3: return "ex-IDU no bias";
    case BiasStructure::b4: return "non-IDU no bias";
    case BiasStructure::b5: return "data source and IDU risk group specific bias";
    case BiasStructure::b6: return "IDU risk group specific bias";
    case BiasStructure::b7: return "data source specific bias";
  }
  return "?";
}

inline std::optional<BiasStructure> parse_bias_structure(const std::string& s) {
  static const std::map<std::string, BiasStructure> table = {
      {"b1", BiasStructure::b1}, {"b2", BiasStructure::b2}, {"b3", BiasStructure::b3},
      {"b4", BiasStructure::b4}, {"b5", BiasStructure::b5}, {"b6", BiasStructure::b6},
      {"b7", BiasStructure::b7}};
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

/// Bias key for a biased observation under a structure, or nullopt when the
/// structure pins that bias to zero (making the observation effectively
/// unbiased).
inline std::optional<BiasKey> bias_key(BiasStructure structure, const std::string& source,
                                       GroupLabel group) {
  const std::string g = to_string(group);
  switch (structure) {
    case BiasStructure::b1: return std::nullopt;
    case BiasStructure::b2:
      if (group == GroupLabel::current) return std::nullopt;
      return BiasKey{source, g};
    case BiasStructure::b3:
      if (group == GroupLabel::ex) return std::nullopt;
      return BiasKey{source, g};
    case BiasStructure::b4:
      if (group == GroupLabel::non) return std::nullopt;
      return BiasKey{source, g};
    case BiasStructure::b5: return BiasKey{source, g};
    case BiasStructure::b6: return BiasKey{"*", g};
    case BiasStructure::b7: return BiasKey{source, "*"};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Observation set
// ---------------------------------------------------------------------------

struct ObservationSet {
  std::vector<BinomialObservation> binomial;
  std::vector<MultinomialObservation> multinomial;
  std::map<std::string, DataSourceMeta> sources;

  /// Source ids in deterministic (sorted) order.
  std::vector<std::string> source_ids() const {
    std::vector<std::string> ids;
    std::set<std::string> seen;
    for (const auto& o : binomial) seen.insert(o.source_id);
    for (const auto& o : multinomial) seen.insert(o.source_id);
    ids.assign(seen.begin(), seen.end());
    return ids;
  }

  /// Exactly the beta keys referenced by biased observations under the given
  /// structure, in deterministic order.
  std::vector<BiasKey> active_bias_keys(BiasStructure structure) const {
    std::set<BiasKey> keys;
    for (const auto& o : binomial) {
      if (o.bias_flag != BiasFlag::biased) continue;
      if (auto k = bias_key(structure, o.source_id, group_of(o.target.kind))) keys.insert(*k);
    }
    return {keys.begin(), keys.end()};
  }

  ObservationSet without_source(const std::string& id) const {
    ObservationSet out;
    out.sources = sources;
    out.sources.erase(id);
    for (const auto& o : binomial)
      if (o.source_id != id) out.binomial.push_back(o);
    for (const auto& o : multinomial)
      if (o.source_id != id) out.multinomial.push_back(o);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Expected probabilities
// ---------------------------------------------------------------------------

/// Converts a source-level estimate to city level. Group/age multipliers live
/// in the source metadata; the age multiplier is looked up by the span label
/// the observation reports on.
inline double apply_level_multipliers(double estimate, const DataSourceMeta& meta,
                                      GroupLabel group, const std::string& age_span) {
  auto git = meta.group_multipliers.find(to_string(group));
  if (git == meta.group_multipliers.end())
    throw ValidationError("source " + meta.id + ": missing group multiplier for " +
                          std::string(to_string(group)));
  auto ait = meta.age_multipliers.find(age_span);
  if (ait == meta.age_multipliers.end())
    throw ValidationError("source " + meta.id + ": missing age multiplier for span " + age_span);
  const double adjusted = estimate * git->second * ait->second;
  if (adjusted > 1.0)
    throw ValidationError("source " + meta.id + ": inconsistent multipliers, adjusted estimate " +
                          std::to_string(adjusted) + " exceeds 1");
  return adjusted;
}

/// Census-share weight of age band a within the span [lo, hi].
inline double mixture_weight(const CensusTable& census, int a, int lo, int hi) {
  double denom = 0.0;
  for (int b = lo; b <= hi; ++b) denom += census.population[b];
  return census.population[a] / denom;
}

struct LikelihoodOptions {
  /// Mixed observations: apply the source bias after census-mixing (default)
  /// or to each component before mixing. Sensitivity toggle only.
  bool mix_then_bias = true;
};

inline double resolve_plain(const TargetSpec& t, int a, const StratifiedQuantitySet& qs) {
  switch (t.kind) {
    case TargetKind::rho_ever: return qs.rho_ever_by_age[a];
    case TargetKind::rho_cur: return qs.rho_at(RiskGroup::current, a);
    case TargetKind::rho_ex: return qs.rho_at(RiskGroup::ex, a);
    case TargetKind::pi_non: return qs.pi_at(RiskGroup::non, a);
    case TargetKind::pi_cur: return qs.pi_at(RiskGroup::current, a);
    case TargetKind::pi_ex: return qs.pi_at(RiskGroup::ex, a);
    case TargetKind::pi_ever_cell:
      if (t.d_cat < 0 || t.tss_cat < 0)
        throw std::invalid_argument("pi_ever_cell target missing category indices");
      return qs.pi_cell[a][static_cast<std::size_t>(t.d_cat)]
                         [static_cast<std::size_t>(t.tss_cat)];
    case TargetKind::pi_cur_tss:
      // A current IDU with time-since-start in category c has injected for c
      // so far: the diagonal of the ever-IDU prevalence lattice.
      if (t.tss_cat < 0) throw std::invalid_argument("pi_cur_tss target missing tss category");
      return qs.pi_cell[a][static_cast<std::size_t>(t.tss_cat)]
                         [static_cast<std::size_t>(t.tss_cat)];
  }
  throw std::invalid_argument("unresolvable target");
}

inline double add_logit_bias(double p, double beta) { return invlogit(logit(p) + beta); }

/// Expected observation-level probability for a binomial record: the target
/// quantity (census-mixed over its age span if needed), bias-shifted on the
/// logit scale when flagged, and mapped back to the source's geographic
/// level. Returns nullopt when the level adjustment pushes the probability
/// past 1, which the likelihood treats as impossible data.
inline std::optional<double> expected_probability(const BinomialObservation& obs,
                                                  const StratifiedQuantitySet& qs,
                                                  const BiasParams& biases,
                                                  const DataSourceMeta& meta,
                                                  const CensusTable& census,
                                                  BiasStructure structure,
                                                  const LikelihoodOptions& opt = {}) {
  const TargetSpec& t = obs.target;
  std::optional<BiasKey> key;
  if (obs.bias_flag == BiasFlag::biased)
    key = bias_key(structure, obs.source_id, group_of(t.kind));

  double p = 0.0;
  if (!t.is_mixture()) {
    p = resolve_plain(t, t.age_lo, qs);
    if (key) p = add_logit_bias(p, biases.at(*key));
  } else if (opt.mix_then_bias) {
    for (int a = t.age_lo; a <= t.age_hi; ++a)
      p += mixture_weight(census, a, t.age_lo, t.age_hi) * resolve_plain(t, a, qs);
    if (key) p = add_logit_bias(p, biases.at(*key));
  } else {
    for (int a = t.age_lo; a <= t.age_hi; ++a) {
      double comp = resolve_plain(t, a, qs);
      if (key) comp = add_logit_bias(comp, biases.at(*key));
      p += mixture_weight(census, a, t.age_lo, t.age_hi) * comp;
    }
  }

  if (meta.level != GeographicLevel::city) {
    // Inverse of apply_level_multipliers: the model quantity is city-level,
    // the observation was taken at source level.
    auto git = meta.group_multipliers.find(to_string(group_of(t.kind)));
    auto ait = meta.age_multipliers.find(t.age_span_label());
    if (git == meta.group_multipliers.end() || ait == meta.age_multipliers.end())
      throw ValidationError("source " + meta.id + ": missing multipliers for " + obs.label());
    p /= git->second * ait->second;
    if (p > 1.0) return std::nullopt;
  }
  return p;
}

/// Predicted category simplex for a multinomial target, for one draw of the
/// history distributions. Group-conditional variants use the population-level
/// (unwindowed) cessation probability; AAFU variants are conditioned on the
/// full 20-59 study band since the source data pool all ages.
inline std::vector<double> predicted_multinomial(MultinomialTarget target,
                                                 const DrugHistory& h, const YearGrid& grid) {
  switch (target) {
    case MultinomialTarget::f_d_ever: return h.f_d_ever;
    case MultinomialTarget::f_tss_ever: return h.f_tss_ever;
    case MultinomialTarget::f_aafu_ever: return h.f_aafu_ever;
    default: break;
  }
  const double kappa = kappa_ex_unwindowed(h, grid);
  if (target == MultinomialTarget::f_d_ex || target == MultinomialTarget::f_tss_ex ||
      target == MultinomialTarget::f_tss_cur) {
    const bool need_ex = target != MultinomialTarget::f_tss_cur;
    const bool need_cur = target == MultinomialTarget::f_tss_cur;
    const auto cond = conditional_history(h, kappa, grid, need_ex, need_cur);
    const auto& yearly = target == MultinomialTarget::f_d_ex ? cond.f_d_ex
                        : target == MultinomialTarget::f_tss_cur ? cond.f_tss_cur
                                                                 : cond.f_tss_ex;
    return aggregate_to_categories(yearly, duration_scheme());
  }
  const int lo = age_groups().front().lower_bound;
  const int hi = age_groups().back().upper_bound;
  const double kappa_band = kappa_ex_band(h, lo, hi, grid);
  const bool need_ex = target == MultinomialTarget::f_aafu_ex;
  const auto cond = conditional_aafu(h, kappa_band, lo, hi, grid, need_ex, !need_ex);
  return aggregate_to_categories(need_ex ? cond.f_aafu_ex : cond.f_aafu_cur, aafu_scheme());
}

// ---------------------------------------------------------------------------
// Log-likelihood terms
// ---------------------------------------------------------------------------

inline double log_choose(long n, long k) {
  return std::lgamma(static_cast<double>(n) + 1.0) -
         std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

/// Binomial log-likelihood including the combinatorial constant, so that the
/// deviance in diagnostics.hpp and this likelihood stay mutually consistent.
/// Returns -infinity when the data are impossible under p.
inline double loglik_binomial(long y, long n, double p) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("loglik_binomial: p outside [0,1]");
  double ll = log_choose(n, y);
  if (y > 0) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    ll += static_cast<double>(y) * std::log(p);
  }
  if (n - y > 0) {
    if (p == 1.0) return -std::numeric_limits<double>::infinity();
    ll += static_cast<double>(n - y) * std::log1p(-p);
  }
  return ll;
}

inline double loglik_multinomial(std::span<const long> counts, std::span<const double> probs) {
  if (counts.size() != probs.size())
    throw std::invalid_argument("loglik_multinomial: length mismatch");
  long n = 0;
  double ll = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    n += counts[k];
    if (counts[k] == 0) continue;
    if (probs[k] <= 0.0) return -std::numeric_limits<double>::infinity();
    ll += static_cast<double>(counts[k]) * std::log(probs[k]) -
          std::lgamma(static_cast<double>(counts[k]) + 1.0);
  }
  ll += std::lgamma(static_cast<double>(n) + 1.0);
  return ll;
}

// ---------------------------------------------------------------------------
// Validation and the identifiability guard
// ---------------------------------------------------------------------------

struct ValidationReport {
  std::vector<std::string> schema_errors;
  std::vector<std::string> guard_violations;

  bool ok() const { return schema_errors.empty() && guard_violations.empty(); }
};

/// The quantity families that must each receive unbiased information from at
/// least one source: the IDU-proportion family of every age band, and the
/// prevalence family of every risk group. Unbiased ever-IDU cell prevalence
/// informs both the current and ex prevalence families through the linkage
/// equations.
inline std::vector<std::string> guard_family_names() {
  std::vector<std::string> names;
  for (const auto& a : age_groups()) names.push_back("rho(" + a.label() + ")");
  names.push_back("pi_cur");
  names.push_back("pi_ex");
  names.push_back("pi_non");
  return names;
}

inline std::vector<std::string> identifiability_violations(const ObservationSet& obs,
                                                           BiasStructure structure) {
  std::array<bool, kNumAgeGroups> rho_ok{};
  bool cur_ok = false, ex_ok = false, non_ok = false;
  for (const auto& o : obs.binomial) {
    const bool effectively_unbiased =
        o.bias_flag == BiasFlag::unbiased ||
        !bias_key(structure, o.source_id, group_of(o.target.kind)).has_value();
    if (!effectively_unbiased) continue;
    switch (o.target.kind) {
      case TargetKind::rho_ever:
      case TargetKind::rho_cur:
      case TargetKind::rho_ex:
        for (int a = o.target.age_lo; a <= o.target.age_hi; ++a) rho_ok[a] = true;
        break;
      case TargetKind::pi_non: non_ok = true; break;
      case TargetKind::pi_cur:
      case TargetKind::pi_cur_tss: cur_ok = true; break;
      case TargetKind::pi_ex: ex_ok = true; break;
      case TargetKind::pi_ever_cell:
        cur_ok = true;
        ex_ok = true;
        break;
    }
  }
  std::vector<std::string> violations;
  for (int a = 0; a < kNumAgeGroups; ++a)
    if (!rho_ok[a])
      violations.push_back("no unbiased informant for family rho(" +
                           age_groups()[a].label() + ")");
  if (!cur_ok) violations.push_back("no unbiased informant for family pi_cur");
  if (!ex_ok) violations.push_back("no unbiased informant for family pi_ex");
  if (!non_ok) violations.push_back("no unbiased informant for family pi_non");
  return violations;
}

inline ValidationReport validate_observations(const ObservationSet& obs,
                                              BiasStructure structure) {
  ValidationReport report;
  auto err = [&](int line, const std::string& msg) {
    report.schema_errors.push_back(
        (line >= 0 ? "line " + std::to_string(line) + ": " : "") + msg);
  };
  for (const auto& o : obs.binomial) {
    if (!obs.sources.count(o.source_id)) err(o.csv_line, "unknown source id " + o.source_id);
    if (o.n <= 0) err(o.csv_line, o.label() + ": n must be positive");
    if (o.y < 0 || o.y > o.n) err(o.csv_line, o.label() + ": y outside [0, n]");
    if (o.target.age_lo < 0 || o.target.age_hi >= kNumAgeGroups ||
        o.target.age_lo > o.target.age_hi)
      err(o.csv_line, o.label() + ": bad age span");
    if (o.target.kind == TargetKind::pi_ever_cell &&
        (o.target.d_cat < 0 || o.target.d_cat >= static_cast<int>(kNumDurationCats) ||
         o.target.tss_cat < 0 || o.target.tss_cat >= static_cast<int>(kNumDurationCats)))
      err(o.csv_line, o.label() + ": bad duration/tss category");
    if (o.target.kind == TargetKind::pi_cur_tss &&
        (o.target.tss_cat < 0 || o.target.tss_cat >= static_cast<int>(kNumDurationCats)))
      err(o.csv_line, o.label() + ": bad tss category");
    if (o.target.is_mixture() && o.target.kind != TargetKind::rho_ever &&
        o.target.kind != TargetKind::rho_cur && o.target.kind != TargetKind::rho_ex)
      err(o.csv_line, o.label() + ": age-mixed observations supported for proportions only");
  }
  for (const auto& o : obs.multinomial) {
    if (!obs.sources.count(o.source_id)) err(o.csv_line, "unknown source id " + o.source_id);
    if (o.counts.size() != category_count(o.target))
      err(o.csv_line, o.label() + ": expected " + std::to_string(category_count(o.target)) +
                          " category counts");
    for (long c : o.counts)
      if (c < 0) err(o.csv_line, o.label() + ": negative count");
    if (o.total() <= 0) err(o.csv_line, o.label() + ": empty observation");
  }
  for (const auto& [id, meta] : obs.sources) {
    const bool has_mult = !meta.group_multipliers.empty() || !meta.age_multipliers.empty();
    if ((meta.level == GeographicLevel::city) == has_mult)
      err(-1, "source " + id + ": multipliers must be present iff level is not city");
    for (const auto& [k, v] : meta.group_multipliers)
      if (!(v > 0.0 && v <= 1.0)) err(-1, "source " + id + ": group multiplier outside (0,1]");
    for (const auto& [k, v] : meta.age_multipliers)
      if (!(v > 0.0 && v <= 1.0)) err(-1, "source " + id + ": age multiplier outside (0,1]");
  }
  report.guard_violations = identifiability_violations(obs, structure);
  return report;
}

}  // namespace prevsynth
