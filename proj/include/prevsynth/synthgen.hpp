#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prevsynth/inference.hpp"
#include "prevsynth/observation.hpp"
#include "prevsynth/quantities.hpp"
#include "prevsynth/rng.hpp"

namespace prevsynth {

// ---------------------------------------------------------------------------
// Synthetic-population career microsimulator. Careers are drawn from the
// exact probability model the cessation equation formalizes, so empirical
// tabulations here double as a brute-force oracle for the analytic
// adjustment equations: any disagreement isolates an implementation bug.
// ---------------------------------------------------------------------------

/// One simulated injecting career observed at the snapshot time. Duration is
/// undefined for current IDUs (still injecting), hence optional.
struct CareerRecord {
  int age = 0;   // years at snapshot
  int aafu = 0;  // age at first use, years
  int tss = 0;   // time since starting, = age - aafu
  std::optional<int> duration;  // total injecting duration, ex-IDUs only
  bool ex = false;
  bool hcv = false;
};

/// Draws n careers conditional on snapshot age inside [lo, hi]: the
/// time-since-start marginal carries the band's AAFU window, age at first use
/// follows its distribution restricted to ages landing in the band, and the
/// eventual duration is drawn independently. A career has ended (ex) exactly
/// when its duration is strictly below time since starting.
inline std::vector<CareerRecord> simulate_careers(std::size_t n, const DrugHistory& h,
                                                  int lo, int hi, const YearGrid& grid,
                                                  Rng& rng) {
  std::vector<double> tss_weights(static_cast<std::size_t>(grid.t_max) + 1, 0.0);
  double total = 0.0;
  for (int t = 0; t <= grid.t_max; ++t) {
    tss_weights[static_cast<std::size_t>(t)] =
        h.tss_yearly.mass(t) * age_window(h.aafu_yearly, lo, hi, t);
    total += tss_weights[static_cast<std::size_t>(t)];
  }
  if (!(total > 0.0))
    throw DegenerateStratumError("simulate_careers: no feasible careers in band " +
                                 std::to_string(lo) + "-" + std::to_string(hi));
  const int u_max = h.aafu_yearly.max_year();
  std::vector<double> aafu_weights(static_cast<std::size_t>(u_max) + 1, 0.0);

  std::vector<CareerRecord> records;
  records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CareerRecord r;
    r.tss = static_cast<int>(rng.categorical(tss_weights));
    const int u_lo = std::max(0, lo - r.tss);
    const int u_hi = std::min(u_max, hi - r.tss);
    for (int u = 0; u <= u_max; ++u)
      aafu_weights[static_cast<std::size_t>(u)] =
          (u >= u_lo && u <= u_hi) ? h.aafu_yearly.mass(u) : 0.0;
    r.aafu = static_cast<int>(rng.categorical(aafu_weights));
    r.age = r.aafu + r.tss;
    const int d = static_cast<int>(rng.categorical(h.d_yearly.pmf));
    r.ex = d < r.tss;
    if (r.ex) r.duration = d;
    records.push_back(r);
  }
  return records;
}

/// Assigns HCV status from the cell prevalences of one age band. Current IDUs
/// sit on the d = tss diagonal of the lattice; ex-IDUs use their realized
/// duration.
inline void attach_hcv(std::vector<CareerRecord>& records, const RegressionParams& reg,
                       int age_index, Rng& rng) {
  for (auto& r : records) {
    const std::size_t tss_cat = tss_scheme().category_of(r.tss);
    const std::size_t d_cat =
        r.ex ? duration_scheme().category_of(*r.duration) : tss_cat;
    r.hcv = rng.bernoulli(pi_ever_cell(d_cat, tss_cat, age_index, reg));
  }
}

/// Plain frequency tabulations by status. Conditionals over an empty class
/// are absent rather than zero.
struct EmpiricalConditionals {
  std::size_t n_total = 0;
  std::size_t n_ex = 0;
  double kappa = 0.0;  // ex fraction
  std::vector<double> f_tss_ever;
  std::vector<double> f_aafu_ever;
  std::optional<std::vector<double>> f_d_ex;
  std::optional<std::vector<double>> f_tss_cur;
  std::optional<std::vector<double>> f_tss_ex;
  std::optional<std::vector<double>> f_aafu_cur;
  std::optional<std::vector<double>> f_aafu_ex;
  std::optional<double> pi_cur;  // HCV prevalence among current IDUs, if attached
  std::optional<double> pi_ex;
};

inline EmpiricalConditionals empirical_conditionals(std::span<const CareerRecord> records,
                                                    const YearGrid& grid, int aafu_max = 55) {
  EmpiricalConditionals out;
  out.n_total = records.size();
  const auto nt = static_cast<std::size_t>(grid.t_max) + 1;
  const auto nu = static_cast<std::size_t>(aafu_max) + 1;
  std::vector<double> tss_all(nt, 0.0), tss_cur(nt, 0.0), tss_ex(nt, 0.0), d_ex(nt, 0.0);
  std::vector<double> aafu_all(nu, 0.0), aafu_cur(nu, 0.0), aafu_ex(nu, 0.0);
  std::size_t hcv_cur = 0, hcv_ex = 0, n_cur = 0;
  bool any_hcv = false;
  for (const auto& r : records) {
    tss_all[static_cast<std::size_t>(r.tss)] += 1.0;
    aafu_all[static_cast<std::size_t>(r.aafu)] += 1.0;
    if (r.ex) {
      out.n_ex += 1;
      tss_ex[static_cast<std::size_t>(r.tss)] += 1.0;
      aafu_ex[static_cast<std::size_t>(r.aafu)] += 1.0;
      d_ex[static_cast<std::size_t>(*r.duration)] += 1.0;
      hcv_ex += r.hcv ? 1 : 0;
    } else {
      n_cur += 1;
      tss_cur[static_cast<std::size_t>(r.tss)] += 1.0;
      aafu_cur[static_cast<std::size_t>(r.aafu)] += 1.0;
      hcv_cur += r.hcv ? 1 : 0;
    }
    any_hcv = any_hcv || r.hcv;
  }
  auto normalize = [](std::vector<double> v, std::size_t count) {
    for (double& x : v) x /= static_cast<double>(count);
    return v;
  };
  out.kappa = records.empty() ? 0.0
                              : static_cast<double>(out.n_ex) / static_cast<double>(out.n_total);
  out.f_tss_ever = normalize(tss_all, out.n_total);
  out.f_aafu_ever = normalize(aafu_all, out.n_total);
  if (out.n_ex > 0) {
    out.f_d_ex = normalize(d_ex, out.n_ex);
    out.f_tss_ex = normalize(tss_ex, out.n_ex);
    out.f_aafu_ex = normalize(aafu_ex, out.n_ex);
  }
  if (n_cur > 0) {
    out.f_tss_cur = normalize(tss_cur, n_cur);
    out.f_aafu_cur = normalize(aafu_cur, n_cur);
  }
  if (any_hcv) {
    if (n_cur > 0) out.pi_cur = static_cast<double>(hcv_cur) / static_cast<double>(n_cur);
    if (out.n_ex > 0) out.pi_ex = static_cast<double>(hcv_ex) / static_cast<double>(out.n_ex);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth scenarios and survey generation
// ---------------------------------------------------------------------------

struct BinomialDesign {
  std::string source_id;
  TargetSpec target;
  BiasFlag bias_flag = BiasFlag::unbiased;
  long n = 0;
};

struct MultinomialDesign {
  std::string source_id;
  MultinomialTarget target = MultinomialTarget::f_d_ever;
  long n = 0;
};

/// A fully specified generating process: true parameter values, the bias
/// structure with its true bias terms, and the observation design saying
/// which sources inform which targets at what sample sizes.
struct TrueScenario {
  RegressionParams regression;
  std::vector<double> f_d_ever;
  std::vector<double> f_tss_ever;
  std::vector<double> f_aafu_ever;
  CensusTable census;
  YearGrid grid;
  BiasStructure structure = BiasStructure::b5;
  BiasParams biases;
  std::map<std::string, DataSourceMeta> sources;
  std::vector<BinomialDesign> binomial_design;
  std::vector<MultinomialDesign> multinomial_design;
  LikelihoodOptions options;

  DrugHistory history() const { return DrugHistory(f_d_ever, f_tss_ever, f_aafu_ever, grid); }
};

/// Draws one observation set from the scenario's generating process. True
/// probabilities flow through the same expected_probability path the model
/// fits with, so generation and inference agree by construction.
inline ObservationSet generate_observations(const TrueScenario& scenario, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 7);
  const DrugHistory h = scenario.history();
  const StratifiedQuantitySet qs =
      evaluate_quantities(scenario.regression, h, scenario.census, scenario.grid);
  ObservationSet out;
  out.sources = scenario.sources;
  int line = 2;  // header is line 1 when the set is round-tripped through CSV
  for (const auto& d : scenario.binomial_design) {
    BinomialObservation o;
    o.source_id = d.source_id;
    o.target = d.target;
    o.bias_flag = d.bias_flag;
    o.n = d.n;
    o.csv_line = line++;
    const auto p = expected_probability(o, qs, scenario.biases,
                                        scenario.sources.at(d.source_id), scenario.census,
                                        scenario.structure, scenario.options);
    if (!p)
      throw ValidationError("scenario design yields impossible probability for " + o.label());
    o.y = rng.binomial(o.n, *p);
    out.binomial.push_back(std::move(o));
  }
  for (const auto& d : scenario.multinomial_design) {
    MultinomialObservation o;
    o.source_id = d.source_id;
    o.target = d.target;
    o.csv_line = line++;
    const auto probs = predicted_multinomial(d.target, h, scenario.grid);
    o.counts = rng.multinomial(d.n, probs);
    out.multinomial.push_back(std::move(o));
  }
  return out;
}

/// True values of every tracked model quantity (for recovery scoring),
/// keyed by the names the sampler reports.
inline std::map<std::string, double> tracked_truth(const TrueScenario& scenario) {
  const DrugHistory h = scenario.history();
  const StratifiedQuantitySet qs =
      evaluate_quantities(scenario.regression, h, scenario.census, scenario.grid);
  std::map<std::string, double> truth;
  static const char* kGroups[3] = {"cur", "ex", "non"};
  for (std::size_t g = 0; g < 3; ++g)
    for (int a = 0; a < kNumAgeGroups; ++a) {
      const std::string band = age_groups()[static_cast<std::size_t>(a)].label();
      truth["rho_" + std::string(kGroups[g]) + "[" + band + "]"] = qs.rho[g][a];
      truth["pi_" + std::string(kGroups[g]) + "[" + band + "]"] = qs.pi[g][a];
      truth["hcv_" + std::string(kGroups[g]) + "[" + band + "]"] = qs.rho[g][a] * qs.pi[g][a];
    }
  for (int a = 0; a < kNumAgeGroups; ++a) {
    const std::string band = age_groups()[static_cast<std::size_t>(a)].label();
    truth["rho_ever[" + band + "]"] = qs.rho_ever_by_age[a];
    truth["kappa_ex[" + band + "]"] = qs.kappa_by_age[a];
    truth["pi_age[" + band + "]"] = qs.pi_by_age[a];
  }
  for (std::size_t g = 0; g < 3; ++g) {
    truth["rho_" + std::string(kGroups[g])] = qs.rho_g[g];
    truth["pi_" + std::string(kGroups[g])] = qs.pi_g[g];
    truth["hcv_" + std::string(kGroups[g])] = qs.rho_g[g] * qs.pi_g[g];
  }
  truth["pi"] = qs.pi_overall;
  for (const auto& [key, value] : scenario.biases.beta) truth[key.label()] = value;
  return truth;
}

}  // namespace prevsynth
