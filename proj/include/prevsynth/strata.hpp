#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "prevsynth/errors.hpp"

namespace prevsynth {

// ---------------------------------------------------------------------------
// Stratification lattice: four ten-year age bands crossed with three injecting
// risk groups, plus the categorical time grids used by the drug-history
// covariates. Everything here is immutable after construction and shared
// freely across chains.
// ---------------------------------------------------------------------------

struct AgeGroup {
  int index = 0;        // ordinal in {0,1,2,3}
  int lower_bound = 0;  // inclusive, years
  int upper_bound = 0;  // inclusive, years

  std::string label() const {
    return std::to_string(lower_bound) + "-" + std::to_string(upper_bound);
  }
};

inline constexpr int kNumAgeGroups = 4;
inline constexpr int kBaselineAgeIndex = 3;  // 50-59 is the regression baseline

inline const std::array<AgeGroup, kNumAgeGroups>& age_groups() {
  static const std::array<AgeGroup, kNumAgeGroups> groups = {{
      {0, 20, 29}, {1, 30, 39}, {2, 40, 49}, {3, 50, 59}}};
  return groups;
}

/// Parses a label like "30-39" to its age-group index; returns -1 if the label
/// is not one of the four bands.
inline int parse_age_group(const std::string& label) {
  for (const auto& g : age_groups())
    if (g.label() == label) return g.index;
  return -1;
}

enum class RiskGroup { current, ex, non };

/// Observation/target label space: the three population strata plus the
/// composite "ever" (current + ex), which is never a fourth stratum.
enum class GroupLabel { current, ex, non, ever };

inline const char* to_string(RiskGroup g) {
  switch (g) {
    case RiskGroup::current: return "current";
    case RiskGroup::ex: return "ex";
    case RiskGroup::non: return "non";
  }
  return "?";
}

inline const char* to_string(GroupLabel g) {
  switch (g) {
    case GroupLabel::current: return "current";
    case GroupLabel::ex: return "ex";
    case GroupLabel::non: return "non";
    case GroupLabel::ever: return "ever";
  }
  return "?";
}

struct CategoryInterval {
  int lower = 0;  // inclusive, years
  int upper = 0;  // inclusive, years
  std::string label;
};

enum class TimeVariable { duration, tss, aafu };

/// An ordered, disjoint partition of integer years into categories. Duration
/// and time-since-starting share one 7-category scheme whose last band
/// (30-45) is the regression baseline; age-at-first-use uses a 10-category
/// scheme over ages 8-55.
struct TimeCategoryScheme {
  TimeVariable kind = TimeVariable::duration;
  std::vector<CategoryInterval> categories;

  std::size_t size() const { return categories.size(); }
  int last_upper() const { return categories.back().upper; }
  int first_lower() const { return categories.front().lower; }

  /// Category containing year t. Years beyond the last bound map onto the
  /// last (baseline) category; negative t is an error.
  std::size_t category_of(int t) const {
    if (t < 0) throw std::invalid_argument("category_of: negative year " + std::to_string(t));
    for (std::size_t k = 0; k < categories.size(); ++k)
      if (t <= categories[k].upper && t >= categories[k].lower) return k;
    return categories.size() - 1;
  }

  int parse_label(const std::string& label) const {
    for (std::size_t k = 0; k < categories.size(); ++k)
      if (categories[k].label == label) return static_cast<int>(k);
    return -1;
  }
};

inline const TimeCategoryScheme& duration_scheme() {
  static const TimeCategoryScheme s = {
      TimeVariable::duration,
      {{0, 0, "<1"}, {1, 4, "1-4"}, {5, 9, "5-9"}, {10, 14, "10-14"},
       {15, 19, "15-19"}, {20, 29, "20-29"}, {30, 45, "30-45"}}};
  return s;
}

inline const TimeCategoryScheme& tss_scheme() {
  static const TimeCategoryScheme s = {
      TimeVariable::tss,
      {{0, 0, "<1"}, {1, 4, "1-4"}, {5, 9, "5-9"}, {10, 14, "10-14"},
       {15, 19, "15-19"}, {20, 29, "20-29"}, {30, 45, "30-45"}}};
  return s;
}

inline const TimeCategoryScheme& aafu_scheme() {
  static const TimeCategoryScheme s = {
      TimeVariable::aafu,
      {{8, 9, "8-9"}, {10, 14, "10-14"}, {15, 19, "15-19"}, {20, 24, "20-24"},
       {25, 29, "25-29"}, {30, 34, "30-34"}, {35, 39, "35-39"}, {40, 44, "40-44"},
       {45, 50, "45-50"}, {51, 55, "51-55"}}};
  return s;
}

inline constexpr std::size_t kNumDurationCats = 7;
inline constexpr std::size_t kNumAafuCats = 10;

/// Upper summation limit T for the yearly convolution sums. Careers longer
/// than the top of the baseline duration band carry no mass, so extending the
/// grid past 45 only pads zeros.
struct YearGrid {
  int t_max = 45;

  YearGrid() = default;
  explicit YearGrid(int t) : t_max(t) {
    if (t_max < duration_scheme().last_upper())
      throw std::invalid_argument("YearGrid: t_max below the last duration category bound");
  }
};

struct CensusTable {
  std::array<double, kNumAgeGroups> population{};  // persons per age band

  double total() const {
    return std::accumulate(population.begin(), population.end(), 0.0);
  }

  void validate() const {
    for (int a = 0; a < kNumAgeGroups; ++a)
      if (!(population[a] > 0.0))
        throw ValidationError("census: non-positive population for age group " +
                              age_groups()[a].label());
  }
};

// ---------------------------------------------------------------------------
// Category <-> yearly-grid bridging
// ---------------------------------------------------------------------------

inline void check_simplex(std::span<const double> mass, std::size_t expected,
                          const char* what) {
  if (mass.size() != expected)
    throw std::invalid_argument(std::string(what) + ": expected " +
                                std::to_string(expected) + " categories, got " +
                                std::to_string(mass.size()));
  double total = 0.0;
  for (double m : mass) {
    if (m < 0.0) throw std::invalid_argument(std::string(what) + ": negative mass");
    total += m;
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw std::invalid_argument(std::string(what) + ": mass does not sum to 1 (sum=" +
                                std::to_string(total) + ")");
}

/// Spreads a category simplex uniformly over the integer years of each
/// category. The result is a yearly pmf of length max(t_max, last bound) + 1,
/// zero outside category support, summing to 1.
inline std::vector<double> expand_to_yearly(std::span<const double> mass,
                                            const TimeCategoryScheme& scheme,
                                            const YearGrid& grid) {
  check_simplex(mass, scheme.size(), "expand_to_yearly");
  const int len = std::max(grid.t_max, scheme.last_upper()) + 1;
  std::vector<double> pmf(static_cast<std::size_t>(len), 0.0);
  for (std::size_t k = 0; k < scheme.size(); ++k) {
    const auto& cat = scheme.categories[k];
    const int width = cat.upper - cat.lower + 1;
    const double per_year = mass[k] / width;
    for (int t = cat.lower; t <= cat.upper; ++t) pmf[static_cast<std::size_t>(t)] += per_year;
  }
  return pmf;
}

/// Inverse of expand_to_yearly up to the uniform-within-category convention.
inline std::vector<double> aggregate_to_categories(std::span<const double> yearly,
                                                   const TimeCategoryScheme& scheme) {
  std::vector<double> mass(scheme.size(), 0.0);
  for (std::size_t t = 0; t < yearly.size(); ++t)
    mass[scheme.category_of(static_cast<int>(t))] += yearly[t];
  return mass;
}

inline std::size_t year_to_category(int t, const TimeCategoryScheme& scheme) {
  return scheme.category_of(t);
}

/// Yearly pmf with its cumulative sums; F(t) = P(X <= t) with clamping
/// outside the grid. "F(t-)" = P(X < t) is cdf_before(t) = F(t-1) throughout.
struct YearlyDist {
  std::vector<double> pmf;
  std::vector<double> cdf;

  YearlyDist() = default;
  explicit YearlyDist(std::vector<double> p) : pmf(std::move(p)), cdf(pmf.size()) {
    std::partial_sum(pmf.begin(), pmf.end(), cdf.begin());
  }

  double mass(int t) const {
    if (t < 0 || t >= static_cast<int>(pmf.size())) return 0.0;
    return pmf[static_cast<std::size_t>(t)];
  }
  double cdf_at(int t) const {
    if (t < 0) return 0.0;
    if (t >= static_cast<int>(cdf.size())) return 1.0;
    return cdf[static_cast<std::size_t>(t)];
  }
  double cdf_before(int t) const { return cdf_at(t - 1); }
  int max_year() const { return static_cast<int>(pmf.size()) - 1; }
};

}  // namespace prevsynth
