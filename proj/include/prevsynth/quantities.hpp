#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prevsynth/errors.hpp"
#include "prevsynth/strata.hpp"

namespace prevsynth {

// ---------------------------------------------------------------------------
// Deterministic DAG from model parameters to every stratified proportion and
// prevalence quantity. All functions are pure over immutable inputs.
// ---------------------------------------------------------------------------

inline double invlogit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// Logistic-regression coefficients for the three directly modelled
/// quantities: ever-IDU proportion (alpha), non-IDU prevalence (gamma) and
/// ever-IDU prevalence on the (duration, tss, age) lattice (delta). Indicator
/// ordering follows the schemes in strata.hpp; baselines are age 50-59 and
/// the 30-45 duration/tss band.
struct RegressionParams {
  double alpha0 = 0.0;
  std::array<double, 3> alpha1{};
  double gamma0 = 0.0;
  std::array<double, 3> gamma1{};
  double delta0 = 0.0;
  std::array<double, 3> delta1{};
  std::array<double, 6> delta2{};
  std::array<double, 6> delta3{};
};

inline double rho_ever(int age, const RegressionParams& p) {
  double lp = p.alpha0;
  if (age != kBaselineAgeIndex) lp += p.alpha1[static_cast<std::size_t>(age)];
  return invlogit(lp);
}

inline double pi_non(int age, const RegressionParams& p) {
  double lp = p.gamma0;
  if (age != kBaselineAgeIndex) lp += p.gamma1[static_cast<std::size_t>(age)];
  return invlogit(lp);
}

inline double pi_ever_cell(std::size_t d_cat, std::size_t tss_cat, int age,
                           const RegressionParams& p) {
  if (d_cat >= kNumDurationCats || tss_cat >= kNumDurationCats)
    throw std::invalid_argument("pi_ever_cell: category index out of range");
  double lp = p.delta0;
  if (age != kBaselineAgeIndex) lp += p.delta1[static_cast<std::size_t>(age)];
  if (d_cat + 1 < kNumDurationCats) lp += p.delta2[d_cat];
  if (tss_cat + 1 < kNumDurationCats) lp += p.delta3[tss_cat];
  return invlogit(lp);
}

// ---------------------------------------------------------------------------
// Drug-use-history distributions
// ---------------------------------------------------------------------------

/// Category simplexes for injecting duration (D), time since starting (TSS)
/// and age at first use (AAFU) among ever-IDUs, with cached yearly
/// expansions. D, TSS and AAFU are mutually independent and age-invariant;
/// every group-conditional version below is derived from these three.
struct DrugHistory {
  std::vector<double> f_d_ever;     // 7 categories
  std::vector<double> f_tss_ever;   // 7 categories
  std::vector<double> f_aafu_ever;  // 10 categories

  YearlyDist d_yearly;
  YearlyDist tss_yearly;
  YearlyDist aafu_yearly;

  DrugHistory() = default;
  DrugHistory(std::vector<double> d, std::vector<double> tss, std::vector<double> aafu,
              const YearGrid& grid = YearGrid())
      : f_d_ever(std::move(d)), f_tss_ever(std::move(tss)), f_aafu_ever(std::move(aafu)) {
    check_simplex(f_d_ever, kNumDurationCats, "f_D|ever");
    check_simplex(f_tss_ever, kNumDurationCats, "f_TSS|ever");
    check_simplex(f_aafu_ever, kNumAafuCats, "f_AAFU|ever");
    d_yearly = YearlyDist(expand_to_yearly(f_d_ever, duration_scheme(), grid));
    tss_yearly = YearlyDist(expand_to_yearly(f_tss_ever, tss_scheme(), grid));
    aafu_yearly = YearlyDist(expand_to_yearly(f_aafu_ever, aafu_scheme(), grid));
  }
};

/// AAFU window weight for time-since-start t within the closed age band
/// [lo, hi]: the probability that a career started t years ago belongs to an
/// individual currently aged inside the band.
inline double age_window(const YearlyDist& aafu, int lo, int hi, int t) {
  return aafu.cdf_at(hi - t) - aafu.cdf_at(lo - 1 - t);
}

/// Probability that an ever-IDU in the age band [lo, hi] has stopped
/// injecting. The numerator weights each time-since-start by the chance the
/// career has already ended, P(D < t) = F_D(t-1).
inline double kappa_ex_band(const DrugHistory& h, int lo, int hi, const YearGrid& grid) {
  double num = 0.0, den = 0.0;
  for (int t = 0; t <= grid.t_max; ++t) {
    const double w = h.tss_yearly.mass(t) * age_window(h.aafu_yearly, lo, hi, t);
    num += w * h.d_yearly.cdf_before(t);
    den += w;
  }
  if (!(den > 0.0))
    throw DegenerateStratumError("kappa_ex: no feasible careers in age band " +
                                 std::to_string(lo) + "-" + std::to_string(hi));
  return num / den;
}

inline double kappa_ex(const AgeGroup& a, const DrugHistory& h, const YearGrid& grid) {
  return kappa_ex_band(h, a.lower_bound, a.upper_bound, grid);
}

/// Cessation probability with no age window (W == 1): P(D < TSS) over the
/// whole career population. Used for the population-level conditionals that
/// back the multinomial likelihood targets.
inline double kappa_ex_unwindowed(const DrugHistory& h, const YearGrid& grid) {
  double num = 0.0;
  for (int t = 0; t <= grid.t_max; ++t)
    num += h.tss_yearly.mass(t) * h.d_yearly.cdf_before(t);
  return num;
}

struct ProportionSplit {
  double rho_ex = 0.0;
  double rho_cur = 0.0;
  double rho_non = 0.0;
};

inline ProportionSplit split_proportions(double rho_ever_a, double kappa_a) {
  return {rho_ever_a * kappa_a, rho_ever_a * (1.0 - kappa_a), 1.0 - rho_ever_a};
}

// ---------------------------------------------------------------------------
// Group-conditional history distributions
// ---------------------------------------------------------------------------

/// Length-bias corrections relating the ever-IDU history distributions to the
/// ones observable in samples of current or ex-IDUs:
///   f_D|ex(t)    = f_D(t) [1 - F_TSS(t)] / kappa
///   f_TSS|cur(t) = f_TSS(t) [1 - F_D(t-1)] / (1 - kappa)
///   f_TSS|ex(t)  = f_TSS(t) F_D(t-1) / kappa
/// Each sums to 1 exactly when kappa is the unwindowed cessation probability.
struct HistoryConditionals {
  std::vector<double> f_d_ex;
  std::vector<double> f_tss_cur;
  std::vector<double> f_tss_ex;
};

inline HistoryConditionals conditional_history(const DrugHistory& h, double kappa,
                                               const YearGrid& grid,
                                               bool need_ex = true, bool need_cur = true) {
  if (need_ex && !(kappa > 0.0))
    throw DegenerateStratumError("conditional_history: kappa = 0 with ex conditional requested");
  if (need_cur && !(kappa < 1.0))
    throw DegenerateStratumError("conditional_history: kappa = 1 with cur conditional requested");
  const std::size_t n = static_cast<std::size_t>(grid.t_max) + 1;
  HistoryConditionals out;
  out.f_d_ex.assign(n, 0.0);
  out.f_tss_cur.assign(n, 0.0);
  out.f_tss_ex.assign(n, 0.0);
  for (int t = 0; t <= grid.t_max; ++t) {
    const auto i = static_cast<std::size_t>(t);
    const double fd = h.d_yearly.mass(t);
    const double ftss = h.tss_yearly.mass(t);
    const double Fd_before = h.d_yearly.cdf_before(t);
    if (need_ex) {
      out.f_d_ex[i] = fd * (1.0 - h.tss_yearly.cdf_at(t)) / kappa;
      out.f_tss_ex[i] = ftss * Fd_before / kappa;
    }
    if (need_cur) out.f_tss_cur[i] = ftss * (1.0 - Fd_before) / (1.0 - kappa);
  }
  return out;
}

/// AAFU distributions among current and ex-IDUs of an age band [lo, hi],
/// adjusting the ever-IDU AAFU distribution for differential cessation. Age
/// couples AAFU to TSS (AAFU = age - TSS), so the ever-IDU AAFU mass within
/// the band at age-at-first-use u carries the band's TSS window
///   S(u) = sum over t with lo <= u+t <= hi of f_TSS(t) * <status factor>.
/// With kappa the band's cessation probability each output sums to 1;
/// the kappa-weighted mixture of the two recovers the band-restricted
/// ever-IDU AAFU distribution.
struct AafuConditionals {
  std::vector<double> f_aafu_cur;  // indexed by age at first use, years
  std::vector<double> f_aafu_ex;
};

inline AafuConditionals conditional_aafu(const DrugHistory& h, double kappa, int lo, int hi,
                                         const YearGrid& grid,
                                         bool need_ex = true, bool need_cur = true) {
  if (need_ex && !(kappa > 0.0))
    throw DegenerateStratumError("conditional_aafu: kappa = 0 with ex conditional requested");
  if (need_cur && !(kappa < 1.0))
    throw DegenerateStratumError("conditional_aafu: kappa = 1 with cur conditional requested");
  const int u_max = h.aafu_yearly.max_year();
  AafuConditionals out;
  out.f_aafu_cur.assign(static_cast<std::size_t>(u_max) + 1, 0.0);
  out.f_aafu_ex.assign(static_cast<std::size_t>(u_max) + 1, 0.0);
  double z = 0.0;
  for (int t = 0; t <= grid.t_max; ++t)
    z += h.tss_yearly.mass(t) * age_window(h.aafu_yearly, lo, hi, t);
  if (!(z > 0.0))
    throw DegenerateStratumError("conditional_aafu: empty feasible window for band " +
                                 std::to_string(lo) + "-" + std::to_string(hi));
  for (int u = 0; u <= u_max; ++u) {
    const double fu = h.aafu_yearly.mass(u);
    if (fu == 0.0) continue;
    double s_cur = 0.0, s_ex = 0.0;
    const int t_lo = std::max(0, lo - u);
    const int t_hi = std::min(grid.t_max, hi - u);
    for (int t = t_lo; t <= t_hi; ++t) {
      const double ftss = h.tss_yearly.mass(t);
      const double Fd_before = h.d_yearly.cdf_before(t);
      s_cur += ftss * (1.0 - Fd_before);
      s_ex += ftss * Fd_before;
    }
    const auto i = static_cast<std::size_t>(u);
    if (need_cur) out.f_aafu_cur[i] = fu * s_cur / ((1.0 - kappa) * z);
    if (need_ex) out.f_aafu_ex[i] = fu * s_ex / (kappa * z);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prevalence among current and ex-IDUs
// ---------------------------------------------------------------------------

/// Time-since-start weights by status inside an age band, normalized so each
/// vector sums to exactly 1 given the band's kappa. These are the band
/// versions of f_TSS|cur and f_TSS|ex used by the prevalence sums; with a
/// flat window they reduce to the unwindowed conditionals.
struct BandStatusWeights {
  std::vector<double> cur;  // f_TSS|cur within the band
  std::vector<double> ex;   // f_TSS|ex within the band
};

inline BandStatusWeights band_status_weights(const DrugHistory& h, double kappa, int lo,
                                             int hi, const YearGrid& grid,
                                             bool need_ex = true, bool need_cur = true) {
  if (need_ex && !(kappa > 0.0))
    throw DegenerateStratumError("band_status_weights: kappa = 0 with ex weights requested");
  if (need_cur && !(kappa < 1.0))
    throw DegenerateStratumError("band_status_weights: kappa = 1 with cur weights requested");
  const std::size_t n = static_cast<std::size_t>(grid.t_max) + 1;
  BandStatusWeights out;
  out.cur.assign(n, 0.0);
  out.ex.assign(n, 0.0);
  double z = 0.0;
  for (int t = 0; t <= grid.t_max; ++t)
    z += h.tss_yearly.mass(t) * age_window(h.aafu_yearly, lo, hi, t);
  if (!(z > 0.0))
    throw DegenerateStratumError("band_status_weights: no feasible careers in band");
  for (int t = 0; t <= grid.t_max; ++t) {
    const double w = h.tss_yearly.mass(t) * age_window(h.aafu_yearly, lo, hi, t);
    const double Fd_before = h.d_yearly.cdf_before(t);
    const auto i = static_cast<std::size_t>(t);
    if (need_cur) out.cur[i] = w * (1.0 - Fd_before) / ((1.0 - kappa) * z);
    if (need_ex) out.ex[i] = w * Fd_before / (kappa * z);
  }
  return out;
}

/// Prevalence among current IDUs: the cell prevalence evaluated on the
/// diagonal d = tss = t, averaged over the time-since-start distribution of
/// current IDUs. `tss_cur_weights` must sum to 1.
inline double pi_current_from_weights(int age, const RegressionParams& p,
                                      std::span<const double> tss_cur_weights) {
  double acc = 0.0;
  for (std::size_t t = 0; t < tss_cur_weights.size(); ++t) {
    const double w = tss_cur_weights[t];
    if (w == 0.0) continue;
    const std::size_t cat = duration_scheme().category_of(static_cast<int>(t));
    acc += w * pi_ever_cell(cat, cat, age, p);
  }
  return acc;
}

/// Prevalence among ex-IDUs: duration l runs strictly below time-since-start
/// t, weighted by the duration pmf truncated to l < t (normalizer F_D(t-1)).
inline double pi_ex_from_weights(int age, const RegressionParams& p,
                                 std::span<const double> tss_ex_weights,
                                 const YearlyDist& d_yearly) {
  double acc = 0.0;
  for (std::size_t t = 1; t < tss_ex_weights.size(); ++t) {
    const double w = tss_ex_weights[t];
    if (w == 0.0) continue;
    const double Fd = d_yearly.cdf_at(static_cast<int>(t) - 1);
    if (!(Fd > 0.0))
      throw InconsistentHistoryError(
          "pi_ex: positive ex-IDU mass at tss=" + std::to_string(t) +
          " but no duration mass below it");
    const std::size_t tss_cat = tss_scheme().category_of(static_cast<int>(t));
    double inner = 0.0;
    for (std::size_t l = 0; l < t; ++l) {
      const double fd = d_yearly.mass(static_cast<int>(l));
      if (fd == 0.0) continue;
      inner += pi_ever_cell(duration_scheme().category_of(static_cast<int>(l)), tss_cat,
                            age, p) * fd;
    }
    acc += w * inner / Fd;
  }
  if (tss_ex_weights.size() > 0 && tss_ex_weights[0] > 0.0)
    throw InconsistentHistoryError("pi_ex: ex-IDU mass at tss=0");
  return acc;
}

inline double pi_current(const AgeGroup& a, const RegressionParams& p, const DrugHistory& h,
                         double kappa_a, const YearGrid& grid) {
  const auto w = band_status_weights(h, kappa_a, a.lower_bound, a.upper_bound, grid,
                                     /*need_ex=*/false, /*need_cur=*/true);
  return pi_current_from_weights(a.index, p, w.cur);
}

inline double pi_ex(const AgeGroup& a, const RegressionParams& p, const DrugHistory& h,
                    double kappa_a, const YearGrid& grid) {
  const auto w = band_status_weights(h, kappa_a, a.lower_bound, a.upper_bound, grid,
                                     /*need_ex=*/true, /*need_cur=*/false);
  return pi_ex_from_weights(a.index, p, w.ex, h.d_yearly);
}

// ---------------------------------------------------------------------------
// Bias terms and the assembled quantity set
// ---------------------------------------------------------------------------

/// A bias-term key. Collapsed structures use "*" for the dimension they pool
/// over (all sources share one beta per group, or vice versa).
struct BiasKey {
  std::string source;  // source id, or "*"
  std::string group;   // risk-group label, or "*"

  auto operator<=>(const BiasKey&) const = default;
  std::string label() const { return "beta[" + source + "," + group + "]"; }
};

/// Log-odds bias terms. The active key set is derived from the chosen bias
/// structure and the observation set; a key absent from the map is
/// structurally pinned to zero and must not be looked up.
struct BiasParams {
  std::map<BiasKey, double> beta;

  double at(const BiasKey& key) const {
    auto it = beta.find(key);
    if (it == beta.end())
      throw std::invalid_argument("BiasParams: no entry for " + key.label());
    return it->second;
  }
};

/// All per-stratum quantities plus the census-weighted aggregates.
struct StratifiedQuantitySet {
  // per (group, age): indexed [group][age] with group order current, ex, non
  std::array<std::array<double, kNumAgeGroups>, 3> rho{};
  std::array<std::array<double, kNumAgeGroups>, 3> pi{};
  std::array<double, kNumAgeGroups> rho_ever_by_age{};
  std::array<double, kNumAgeGroups> kappa_by_age{};
  // cell prevalences pi_ever[d_cat][tss_cat] per age
  std::array<std::array<std::array<double, kNumDurationCats>, kNumDurationCats>,
             kNumAgeGroups> pi_cell{};

  // aggregates
  std::array<double, kNumAgeGroups> pi_by_age{};
  std::array<double, 3> rho_g{};
  std::array<double, 3> pi_g{};
  double pi_overall = 0.0;

  double rho_at(RiskGroup g, int a) const { return rho[static_cast<std::size_t>(g)][a]; }
  double pi_at(RiskGroup g, int a) const { return pi[static_cast<std::size_t>(g)][a]; }
};

/// Census-weighted aggregates: prevalence by age, group shares and
/// group-specific prevalence across ages, and the overall prevalence. The
/// overall value is algebraically the census-weighted average of the per-age
/// values.
inline void compute_aggregates(StratifiedQuantitySet& qs, const CensusTable& census) {
  const double n_total = census.total();
  double overall_num = 0.0;
  for (int a = 0; a < kNumAgeGroups; ++a) {
    double pa = 0.0;
    for (std::size_t g = 0; g < 3; ++g) pa += qs.rho[g][a] * qs.pi[g][a];
    qs.pi_by_age[a] = pa;
    overall_num += census.population[a] * pa;
  }
  for (std::size_t g = 0; g < 3; ++g) {
    double share_num = 0.0, prev_num = 0.0;
    for (int a = 0; a < kNumAgeGroups; ++a) {
      share_num += census.population[a] * qs.rho[g][a];
      prev_num += census.population[a] * qs.rho[g][a] * qs.pi[g][a];
    }
    qs.rho_g[g] = share_num / n_total;
    qs.pi_g[g] = share_num > 0.0 ? prev_num / share_num : 0.0;
  }
  qs.pi_overall = overall_num / n_total;
}

/// Evaluates the full DAG for one parameter draw.
inline StratifiedQuantitySet evaluate_quantities(const RegressionParams& p,
                                                 const DrugHistory& h,
                                                 const CensusTable& census,
                                                 const YearGrid& grid) {
  StratifiedQuantitySet qs;
  for (int a = 0; a < kNumAgeGroups; ++a) {
    const AgeGroup& band = age_groups()[static_cast<std::size_t>(a)];
    const double re = rho_ever(a, p);
    const double k = kappa_ex(band, h, grid);
    const auto split = split_proportions(re, k);
    qs.rho_ever_by_age[a] = re;
    qs.kappa_by_age[a] = k;
    qs.rho[0][a] = split.rho_cur;
    qs.rho[1][a] = split.rho_ex;
    qs.rho[2][a] = split.rho_non;
    qs.pi[2][a] = pi_non(a, p);
    for (std::size_t d = 0; d < kNumDurationCats; ++d)
      for (std::size_t s = 0; s < kNumDurationCats; ++s)
        qs.pi_cell[a][d][s] = pi_ever_cell(d, s, a, p);
    const auto w = band_status_weights(h, k, band.lower_bound, band.upper_bound, grid,
                                       /*need_ex=*/k > 0.0, /*need_cur=*/k < 1.0);
    qs.pi[0][a] = k < 1.0 ? pi_current_from_weights(a, p, w.cur) : 0.0;
    qs.pi[1][a] = k > 0.0 ? pi_ex_from_weights(a, p, w.ex, h.d_yearly) : 0.0;
  }
  compute_aggregates(qs, census);
  return qs;
}

}  // namespace prevsynth
