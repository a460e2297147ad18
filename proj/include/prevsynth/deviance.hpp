#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace prevsynth {

// ---------------------------------------------------------------------------
// Standardized deviance: twice the log-likelihood ratio of the saturated
// model to the fitted model. Zero at a perfect fit, +infinity when a
// prediction rules out observed data. 0*log(0) terms are 0 throughout.
// ---------------------------------------------------------------------------

/// One binomial observation's deviance contribution at predicted probability p.
inline double deviance_binomial_term(long y, long n, double p) {
  const double yd = static_cast<double>(y);
  const double nd = static_cast<double>(n);
  double dev = 0.0;
  if (y > 0) {
    if (p <= 0.0) return std::numeric_limits<double>::infinity();
    dev += yd * std::log(yd / (nd * p));
  }
  if (n - y > 0) {
    if (p >= 1.0) return std::numeric_limits<double>::infinity();
    dev += (nd - yd) * std::log((nd - yd) / (nd - nd * p));
  }
  return 2.0 * dev;
}

/// Deviance across a source's binomial observations.
inline double deviance_binomial(std::span<const long> ys, std::span<const long> ns,
                                std::span<const double> ps) {
  double total = 0.0;
  for (std::size_t j = 0; j < ys.size(); ++j)
    total += deviance_binomial_term(ys[j], ns[j], ps[j]);
  return total;
}

/// Multinomial deviance with predicted counts z_hat = N * prob.
inline double deviance_multinomial(std::span<const long> counts,
                                   std::span<const double> probs) {
  long n = 0;
  for (long c : counts) n += c;
  double dev = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) continue;
    const double expected = static_cast<double>(n) * probs[k];
    if (expected <= 0.0) return std::numeric_limits<double>::infinity();
    dev += static_cast<double>(counts[k]) * std::log(static_cast<double>(counts[k]) / expected);
  }
  return 2.0 * dev;
}

/// Posterior mean deviance per source with the model total and its split over
/// a reference set of sources (the ones treated as biased in the fullest bias
/// structure). The total equals the sum over sources exactly.
struct DevianceReport {
  std::map<std::string, double> per_source;
  std::vector<std::string> reference_sources;  // the "b -> ub" group
  double model = 0.0;
  double ub = 0.0;
  double b_to_ub = 0.0;

  void finalize() {
    model = 0.0;
    ub = 0.0;
    b_to_ub = 0.0;
    for (const auto& [id, dev] : per_source) {
      model += dev;
      const bool in_ref = std::find(reference_sources.begin(), reference_sources.end(), id) !=
                          reference_sources.end();
      (in_ref ? b_to_ub : ub) += dev;
    }
  }
};

}  // namespace prevsynth
