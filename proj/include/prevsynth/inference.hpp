#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "prevsynth/deviance.hpp"
#include "prevsynth/observation.hpp"
#include "prevsynth/quantities.hpp"
#include "prevsynth/rng.hpp"
#include "prevsynth/strata.hpp"

namespace prevsynth {

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

/// Normal(0, variance) on every regression and bias coefficient, symmetric
/// Dirichlet on each history simplex. Variance 100 (sd 10) keeps the logit
/// priors non-informative.
struct PriorSpec {
  double normal_variance = 100.0;
  double dirichlet_alpha = 1.0;
};

inline double normal_logpdf(double x, double variance) {
  return -0.5 * x * x / variance - 0.5 * std::log(2.0 * 3.14159265358979323846 * variance);
}

// ---------------------------------------------------------------------------
// Simplex transform (stick-breaking). A K-simplex is sampled through K-1
// unconstrained coordinates; the shift log(K-k-1) centres y = 0 on the
// uniform simplex. The change-of-variables correction is returned alongside.
// ---------------------------------------------------------------------------

struct SimplexValue {
  std::vector<double> x;
  double log_jacobian = 0.0;
};

inline SimplexValue simplex_from_unconstrained(std::span<const double> y) {
  const std::size_t k = y.size() + 1;
  SimplexValue out;
  out.x.assign(k, 0.0);
  double stick = 1.0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    const double z = invlogit(y[i] - std::log(static_cast<double>(k - i - 1)));
    out.x[i] = stick * z;
    out.log_jacobian += std::log(stick) + std::log(z) + std::log1p(-z);
    stick -= out.x[i];
  }
  out.x[k - 1] = stick;
  return out;
}

inline std::vector<double> simplex_to_unconstrained(std::span<const double> x) {
  const std::size_t k = x.size();
  std::vector<double> y(k - 1);
  double stick = 1.0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    const double z = x[i] / stick;
    y[i] = logit(z) + std::log(static_cast<double>(k - i - 1));
    stick -= x[i];
  }
  return y;
}

/// log-density of Dirichlet(alpha, ..., alpha) at x, including the constant.
inline double dirichlet_logpdf(std::span<const double> x, double alpha) {
  const double k = static_cast<double>(x.size());
  double lp = std::lgamma(alpha * k) - k * std::lgamma(alpha);
  if (alpha != 1.0)
    for (double xi : x) lp += (alpha - 1.0) * std::log(xi);
  return lp;
}

// ---------------------------------------------------------------------------
// Sampler configuration
// ---------------------------------------------------------------------------

struct SamplerConfig {
  int chains = 2;
  int iterations = 46000;
  int burn_in = 4000;
  std::uint64_t seed = 1;
  int adapt_batch = 25;          // proposals per scale adjustment during burn-in
  double init_jitter_sd = 1.0;   // dispersion of chain starting points
  double initial_scale = 0.5;
  double target_accept_scalar = 0.44;
  double target_accept_vector = 0.234;
  /// Share of proposals drawn fresh from the prior (independence component of
  /// the mixture kernel). Keeps weakly informed directions moving; a
  /// prior-only posterior mixes almost iid.
  double independence_weight = 0.1;

  void validate() const {
    if (chains < 2) throw ValidationError("sampler: at least 2 chains required");
    if (burn_in < 0 || burn_in >= iterations)
      throw ValidationError("sampler: burn_in must lie in [0, iterations)");
    if (adapt_batch < 1) throw ValidationError("sampler: adapt_batch must be positive");
  }
};

// ---------------------------------------------------------------------------
// Blockwise adaptive random-walk Metropolis
// ---------------------------------------------------------------------------

struct BlockSpec {
  std::size_t offset = 0;
  std::size_t dim = 1;
  std::string name;
};

/// One chain of blockwise random-walk Metropolis. Scalar blocks take
/// independent-step proposals; multivariate blocks learn an empirical
/// covariance during burn-in and propose along its Cholesky factor. Proposal
/// scales adapt toward the target acceptance rate in batches during burn-in
/// and everything is frozen afterwards to preserve detailed balance.
template <class Target>
class AdaptiveChain {
public:
  AdaptiveChain(const Target& target, const SamplerConfig& cfg, Rng rng,
                std::vector<double> init)
      : target_(target), cfg_(cfg), rng_(std::move(rng)), theta_(std::move(init)),
        blocks_(target.blocks()) {
    log_scales_.resize(blocks_.size());
    cov_.resize(blocks_.size());
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto d = blocks_[b].dim;
      log_scales_[b] = std::log(cfg_.initial_scale / std::sqrt(static_cast<double>(d)));
      if (d > 1) {
        cov_[b].mean = Eigen::VectorXd::Zero(static_cast<long>(d));
        cov_[b].m2 = Eigen::MatrixXd::Zero(static_cast<long>(d), static_cast<long>(d));
      }
    }
    batch_accepts_.assign(blocks_.size(), 0);
    batch_proposals_.assign(blocks_.size(), 0);
    batch_index_.assign(blocks_.size(), 1);
    accepts_.assign(blocks_.size(), 0);
    proposals_.assign(blocks_.size(), 0);
    cur_lp_ = target_.log_density(theta_);
    scratch_.resize(theta_.size());
  }

  double log_posterior() const { return cur_lp_; }
  const std::vector<double>& state() const { return theta_; }
  double scale(std::size_t block) const { return std::exp(log_scales_[block]); }
  void set_scale(std::size_t block, double s) { log_scales_[block] = std::log(s); }

  /// One Metropolis proposal on one block: either a random walk or, with the
  /// configured probability, an independence draw from the block's prior
  /// (accepted on the likelihood ratio). Rejected proposals leave the state
  /// unchanged. Returns whether the proposal was accepted.
  bool step_block(std::size_t b, bool adapting) {
    if constexpr (requires(const Target& t, const BlockSpec& bs, std::vector<double>& th,
                           Rng& r) {
                    t.draw_block_from_prior(bs, th, r);
                    { t.block_log_prior(bs, th) } -> std::convertible_to<double>;
                  }) {
      if (cfg_.independence_weight > 0.0 && rng_.uniform() < cfg_.independence_weight)
        return independence_step(b, adapting);
    }
    return walk_step(b, adapting);
  }

private:
  bool walk_step(std::size_t b, bool adapting) {
    const BlockSpec& block = blocks_[b];
    const double sigma = std::exp(log_scales_[b]);
    if (block.dim > 1 && cov_[b].have_chol) {
      auto& z = cov_[b].z;
      for (long i = 0; i < z.size(); ++i) z[i] = rng_.normal();
      const Eigen::VectorXd step = sigma * (cov_[b].chol * z);
      for (std::size_t i = 0; i < block.dim; ++i) {
        scratch_[i] = theta_[block.offset + i];
        theta_[block.offset + i] += step[static_cast<long>(i)];
      }
    } else {
      for (std::size_t i = 0; i < block.dim; ++i) {
        scratch_[i] = theta_[block.offset + i];
        theta_[block.offset + i] += sigma * rng_.normal();
      }
    }
    const double prop_lp = target_.log_density(theta_);
    const double log_ratio = prop_lp - cur_lp_;
    bool accept = false;
    if (log_ratio >= 0.0) {
      accept = true;
    } else {
      accept = rng_.uniform() < std::exp(log_ratio);
    }
    if (accept) {
      cur_lp_ = prop_lp;
    } else {
      for (std::size_t i = 0; i < block.dim; ++i) theta_[block.offset + i] = scratch_[i];
    }
    if (adapting) {
      batch_proposals_[b] += 1;
      batch_accepts_[b] += accept ? 1 : 0;
      if (batch_proposals_[b] == cfg_.adapt_batch) {
        const double rate = static_cast<double>(batch_accepts_[b]) / cfg_.adapt_batch;
        const double target = block.dim == 1 ? cfg_.target_accept_scalar
                                             : cfg_.target_accept_vector;
        const double step = std::min(0.1, 1.0 / std::sqrt(static_cast<double>(batch_index_[b])));
        log_scales_[b] += rate > target ? step : -step;
        batch_index_[b] += 1;
        batch_proposals_[b] = 0;
        batch_accepts_[b] = 0;
        refresh_proposal_covariance(b);
      }
    } else {
      proposals_[b] += 1;
      accepts_[b] += accept ? 1 : 0;
    }
    return accept;
  }

  /// Fresh draw of one block from its prior, accepted on the likelihood
  /// ratio. Never feeds the scale adaptation.
  bool independence_step(std::size_t b, bool adapting) {
    const BlockSpec& block = blocks_[b];
    for (std::size_t i = 0; i < block.dim; ++i) scratch_[i] = theta_[block.offset + i];
    const double old_block_prior = target_.block_log_prior(block, theta_);
    target_.draw_block_from_prior(block, theta_, rng_);
    const double new_block_prior = target_.block_log_prior(block, theta_);
    const double prop_lp = target_.log_density(theta_);
    const double log_ratio = (prop_lp - new_block_prior) - (cur_lp_ - old_block_prior);
    bool accept = false;
    if (log_ratio >= 0.0) {
      accept = true;
    } else {
      accept = rng_.uniform() < std::exp(log_ratio);
    }
    if (accept) {
      cur_lp_ = prop_lp;
    } else {
      for (std::size_t i = 0; i < block.dim; ++i) theta_[block.offset + i] = scratch_[i];
    }
    if (!adapting) {
      proposals_[b] += 1;
      accepts_[b] += accept ? 1 : 0;
    }
    return accept;
  }

public:
  /// One full sweep over all blocks.
  void sweep(bool adapting) {
    for (std::size_t b = 0; b < blocks_.size(); ++b) step_block(b, adapting);
    if (adapting) accumulate_covariance();
  }

  /// Post-burn-in acceptance rate per block.
  std::vector<double> acceptance_rates() const {
    std::vector<double> rates(blocks_.size(), 0.0);
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      if (proposals_[b] > 0)
        rates[b] = static_cast<double>(accepts_[b]) / static_cast<double>(proposals_[b]);
    return rates;
  }

  const std::vector<BlockSpec>& blocks() const { return blocks_; }

private:
  struct BlockCovariance {
    Eigen::VectorXd mean;
    Eigen::MatrixXd m2;
    Eigen::MatrixXd chol;
    Eigen::VectorXd z;
    long n = 0;
    bool have_chol = false;
  };

  /// Welford update of each multivariate block's running covariance from the
  /// current state (burn-in only).
  void accumulate_covariance() {
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (blocks_[b].dim < 2) continue;
      auto& c = cov_[b];
      const auto d = static_cast<long>(blocks_[b].dim);
      Eigen::VectorXd x(d);
      for (long i = 0; i < d; ++i) x[i] = theta_[blocks_[b].offset + static_cast<std::size_t>(i)];
      c.n += 1;
      const Eigen::VectorXd delta = x - c.mean;
      c.mean += delta / static_cast<double>(c.n);
      c.m2 += delta * (x - c.mean).transpose();
    }
  }

  /// Rebuilds the Cholesky proposal factor once enough burn-in draws have
  /// accumulated. Falls back to the isotropic walk until then.
  void refresh_proposal_covariance(std::size_t b) {
    auto& c = cov_[b];
    const auto d = static_cast<long>(blocks_[b].dim);
    if (d < 2 || c.n < 4 * d + 10) return;
    Eigen::MatrixXd sigma = c.m2 / static_cast<double>(c.n - 1);
    sigma += 1e-9 * Eigen::MatrixXd::Identity(d, d);
    const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success) return;
    const bool first = !c.have_chol;
    c.chol = llt.matrixL();
    c.z.resize(d);
    c.have_chol = true;
    if (first) {
      // switch the scale interpretation from step size to covariance multiple
      log_scales_[b] = std::log(2.38 / std::sqrt(static_cast<double>(d)));
      batch_index_[b] = 1;
    }
  }

  const Target& target_;
  SamplerConfig cfg_;
  Rng rng_;
  std::vector<double> theta_;
  std::vector<BlockSpec> blocks_;
  std::vector<double> log_scales_;
  std::vector<BlockCovariance> cov_;
  std::vector<int> batch_accepts_, batch_proposals_, batch_index_;
  std::vector<long> accepts_, proposals_;
  std::vector<double> scratch_;
  double cur_lp_ = 0.0;
};

/// Runs one chain: burn-in with adaptation, then recording. The recorder is
/// invoked with the state after every post-burn-in iteration.
template <class Target, class Recorder>
AdaptiveChain<Target> run_single_chain(const Target& target, const SamplerConfig& cfg,
                                       unsigned chain_index, std::vector<double> init,
                                       Recorder&& record) {
  AdaptiveChain<Target> chain(target, cfg, Rng::derive(cfg.seed, 1000 + chain_index),
                              std::move(init));
  for (int it = 0; it < cfg.iterations; ++it) {
    chain.sweep(/*adapting=*/it < cfg.burn_in);
    if (it >= cfg.burn_in) record(chain.state());
  }
  return chain;
}

// ---------------------------------------------------------------------------
// Gelman-Rubin potential scale reduction
// ---------------------------------------------------------------------------

struct GelmanRubinResult {
  double psrf = 1.0;
  bool indeterminate = false;
};

/// PSRF from between/within-chain variances. Chains of identical constant
/// draws have zero within-variance everywhere and are flagged indeterminate.
inline GelmanRubinResult gelman_rubin(std::span<const std::vector<double>> chains) {
  const std::size_t m = chains.size();
  if (m < 2) throw std::invalid_argument("gelman_rubin: need at least 2 chains");
  const std::size_t n = chains[0].size();
  if (n < 10) throw std::invalid_argument("gelman_rubin: need at least 10 draws per chain");
  for (const auto& c : chains)
    if (c.size() != n) throw std::invalid_argument("gelman_rubin: unequal chain lengths");

  std::vector<double> means(m, 0.0), vars(m, 0.0);
  for (std::size_t c = 0; c < m; ++c) {
    double mu = 0.0;
    for (double v : chains[c]) mu += v;
    mu /= static_cast<double>(n);
    double s2 = 0.0;
    for (double v : chains[c]) s2 += (v - mu) * (v - mu);
    means[c] = mu;
    vars[c] = s2 / static_cast<double>(n - 1);
  }
  const double w = std::accumulate(vars.begin(), vars.end(), 0.0) / static_cast<double>(m);
  double grand = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(m);
  double b_over_n = 0.0;
  for (double mu : means) b_over_n += (mu - grand) * (mu - grand);
  b_over_n /= static_cast<double>(m - 1);

  GelmanRubinResult out;
  if (w <= 0.0) {
    out.indeterminate = true;
    out.psrf = b_over_n > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    return out;
  }
  const double nd = static_cast<double>(n);
  const double md = static_cast<double>(m);
  const double v_hat = (nd - 1.0) / nd * w + (1.0 + 1.0 / md) * b_over_n;
  out.psrf = std::sqrt(v_hat / w);
  return out;
}

inline constexpr double kConvergenceThreshold = 1.05;

// ---------------------------------------------------------------------------
// The evidence-synthesis posterior
// ---------------------------------------------------------------------------

inline constexpr std::size_t kNumRegressionParams = 24;
inline constexpr std::size_t kNumStickParams = 21;  // 6 + 6 + 9

/// Joint posterior over regression coefficients, bias terms and history
/// simplexes given an observation set. The parameter vector is laid out as
/// [regression (24) | bias terms | simplex sticks (19)]; layout is
/// deterministic given the bias structure and observation set. Instances are
/// immutable and shared across chains.
class EvidenceModel {
public:
  EvidenceModel(ObservationSet obs, CensusTable census, YearGrid grid,
                BiasStructure structure, PriorSpec priors = {},
                LikelihoodOptions options = {})
      : obs_(std::move(obs)), census_(std::move(census)), grid_(grid),
        structure_(structure), priors_(priors), options_(options) {
    census_.validate();
    bias_keys_ = obs_.active_bias_keys(structure_);
    source_ids_ = obs_.source_ids();
    build_names();
    prepare_observations();
  }

  std::size_t dim() const { return kNumRegressionParams + bias_keys_.size() + kNumStickParams; }
  std::size_t bias_offset() const { return kNumRegressionParams; }
  std::size_t stick_offset() const { return kNumRegressionParams + bias_keys_.size(); }

  const std::vector<BiasKey>& bias_keys() const { return bias_keys_; }
  const std::vector<std::string>& source_ids() const { return source_ids_; }
  const ObservationSet& observations() const { return obs_; }
  const CensusTable& census() const { return census_; }
  const YearGrid& grid() const { return grid_; }
  BiasStructure structure() const { return structure_; }

  /// The three regression coefficient groups and the three history simplexes
  /// are proposed jointly (multivariate blocks with learned covariance); each
  /// bias term is its own scalar block. One sweep ends with a joint proposal
  /// over the full vector, which carries the cross-block correlations the
  /// smaller moves cannot.
  std::vector<BlockSpec> blocks() const {
    std::vector<BlockSpec> out;
    out.push_back({0, 4, "alpha"});
    out.push_back({4, 4, "gamma"});
    out.push_back({8, 16, "delta"});
    for (std::size_t i = 0; i < bias_keys_.size(); ++i)
      out.push_back({bias_offset() + i, 1, bias_keys_[i].label()});
    out.push_back({stick_offset(), 6, "f_d_ever"});
    out.push_back({stick_offset() + 6, 6, "f_tss_ever"});
    out.push_back({stick_offset() + 12, 9, "f_aafu_ever"});
    for (int r = 0; r < kJointRepeats; ++r)
      out.push_back({0, dim(), r == 0 ? "joint" : "joint#" + std::to_string(r + 1)});
    return out;
  }
  static constexpr int kJointRepeats = 3;

  std::vector<double> initial_point(Rng& rng, double jitter_sd) const {
    std::vector<double> theta(dim());
    for (double& v : theta) v = jitter_sd * rng.normal();
    return theta;
  }

  struct Unpacked {
    RegressionParams reg;
    DrugHistory history;
    double log_jacobian = 0.0;
  };

  Unpacked unpack(std::span<const double> theta) const {
    Unpacked u;
    u.reg.alpha0 = theta[0];
    for (int i = 0; i < 3; ++i) u.reg.alpha1[i] = theta[1 + i];
    u.reg.gamma0 = theta[4];
    for (int i = 0; i < 3; ++i) u.reg.gamma1[i] = theta[5 + i];
    u.reg.delta0 = theta[8];
    for (int i = 0; i < 3; ++i) u.reg.delta1[i] = theta[9 + i];
    for (int i = 0; i < 6; ++i) u.reg.delta2[i] = theta[12 + i];
    for (int i = 0; i < 6; ++i) u.reg.delta3[i] = theta[18 + i];
    const std::size_t s0 = stick_offset();
    auto fd = simplex_from_unconstrained(theta.subspan(s0, 6));
    auto ftss = simplex_from_unconstrained(theta.subspan(s0 + 6, 6));
    auto faafu = simplex_from_unconstrained(theta.subspan(s0 + 12, 9));
    u.log_jacobian = fd.log_jacobian + ftss.log_jacobian + faafu.log_jacobian;
    u.history = DrugHistory(std::move(fd.x), std::move(ftss.x), std::move(faafu.x), grid_);
    return u;
  }

  BiasParams bias_params(std::span<const double> theta) const {
    BiasParams b;
    for (std::size_t i = 0; i < bias_keys_.size(); ++i)
      b.beta[bias_keys_[i]] = theta[bias_offset() + i];
    return b;
  }

  /// Prior log-density of the coordinates a block covers (blocks either stay
  /// inside the Normal coordinates or cover whole simplexes).
  double block_log_prior(const BlockSpec& block, const std::vector<double>& theta) const {
    double lp = 0.0;
    const std::size_t end = block.offset + block.dim;
    for (std::size_t i = block.offset; i < std::min(end, stick_offset()); ++i)
      lp += normal_logpdf(theta[i], priors_.normal_variance);
    const std::size_t s0 = stick_offset();
    const std::array<std::pair<std::size_t, std::size_t>, 3> ranges = {
        {{s0, 6}, {s0 + 6, 6}, {s0 + 12, 9}}};
    for (const auto& [offset, dim] : ranges) {
      if (block.offset > offset || end < offset + dim) continue;
      const auto sv = simplex_from_unconstrained(
          std::span<const double>(theta).subspan(offset, dim));
      lp += dirichlet_logpdf(sv.x, priors_.dirichlet_alpha) + sv.log_jacobian;
    }
    return lp;
  }

  /// Replaces a block's coordinates with a fresh prior draw.
  void draw_block_from_prior(const BlockSpec& block, std::vector<double>& theta,
                             Rng& rng) const {
    const std::size_t end = block.offset + block.dim;
    const double sd = std::sqrt(priors_.normal_variance);
    for (std::size_t i = block.offset; i < std::min(end, stick_offset()); ++i)
      theta[i] = rng.normal(0.0, sd);
    const std::size_t s0 = stick_offset();
    const std::array<std::pair<std::size_t, std::size_t>, 3> ranges = {
        {{s0, 6}, {s0 + 6, 6}, {s0 + 12, 9}}};
    for (const auto& [offset, dim] : ranges) {
      if (block.offset > offset || end < offset + dim) continue;
      const auto x = rng.dirichlet(dim + 1, priors_.dirichlet_alpha);
      const auto y = simplex_to_unconstrained(x);
      for (std::size_t i = 0; i < dim; ++i) theta[offset + i] = y[i];
    }
  }

  /// Joint log-density on the unconstrained scale, -infinity for impossible
  /// data or infeasible proposals.
  double log_density(std::span<const double> theta) const {
    try {
      const Unpacked u = unpack(theta);
      const StratifiedQuantitySet qs = evaluate_quantities(u.reg, u.history, census_, grid_);
      const double ll = log_likelihood(theta, u, qs, nullptr, nullptr);
      if (!std::isfinite(ll)) return -std::numeric_limits<double>::infinity();
      return ll + log_prior(theta, u);
    } catch (const DegenerateStratumError&) {
      return -std::numeric_limits<double>::infinity();
    } catch (const InconsistentHistoryError&) {
      return -std::numeric_limits<double>::infinity();
    } catch (const std::invalid_argument&) {
      return -std::numeric_limits<double>::infinity();
    }
  }
  double log_density(const std::vector<double>& theta) const {
    return log_density(std::span<const double>(theta));
  }

  /// Observation labels whose likelihood contribution is -infinity at theta.
  std::vector<std::string> impossible_observations(std::span<const double> theta) const {
    std::vector<std::string> ids;
    try {
      const Unpacked u = unpack(theta);
      const StratifiedQuantitySet qs = evaluate_quantities(u.reg, u.history, census_, grid_);
      log_likelihood(theta, u, qs, nullptr, &ids);
    } catch (const std::exception&) {
      ids.push_back("<model evaluation failed>");
    }
    return ids;
  }

  // --- tracked quantities -------------------------------------------------

  const std::vector<std::string>& tracked_names() const { return tracked_names_; }
  std::size_t num_tracked() const { return tracked_names_.size(); }
  std::size_t deviance_track_offset() const { return deviance_offset_; }

  /// Fills one row of tracked values: stratified quantities, aggregates, bias
  /// terms, then per-source deviance.
  void record(std::span<const double> theta, std::span<double> out) const {
    const Unpacked u = unpack(theta);
    const StratifiedQuantitySet qs = evaluate_quantities(u.reg, u.history, census_, grid_);
    std::size_t i = 0;
    for (std::size_t g = 0; g < 3; ++g)
      for (int a = 0; a < kNumAgeGroups; ++a) out[i++] = qs.rho[g][a];
    for (int a = 0; a < kNumAgeGroups; ++a) out[i++] = qs.rho_ever_by_age[a];
    for (int a = 0; a < kNumAgeGroups; ++a) out[i++] = qs.kappa_by_age[a];
    for (std::size_t g = 0; g < 3; ++g)
      for (int a = 0; a < kNumAgeGroups; ++a) out[i++] = qs.pi[g][a];
    for (std::size_t g = 0; g < 3; ++g)
      for (int a = 0; a < kNumAgeGroups; ++a) out[i++] = qs.rho[g][a] * qs.pi[g][a];
    for (int a = 0; a < kNumAgeGroups; ++a) out[i++] = qs.pi_by_age[a];
    for (std::size_t g = 0; g < 3; ++g) out[i++] = qs.rho_g[g];
    for (std::size_t g = 0; g < 3; ++g) out[i++] = qs.pi_g[g];
    for (std::size_t g = 0; g < 3; ++g) out[i++] = qs.rho_g[g] * qs.pi_g[g];
    out[i++] = qs.pi_overall;
    for (std::size_t b = 0; b < bias_keys_.size(); ++b) out[i++] = theta[bias_offset() + b];
    std::vector<double> dev(source_ids_.size(), 0.0);
    log_likelihood(theta, u, qs, &dev, nullptr);
    for (double d : dev) out[i++] = d;
  }

private:
  struct PreparedBinomial {
    const BinomialObservation* obs = nullptr;
    int bias_coord = -1;              // coordinate index of beta, -1 if pinned/unbiased
    double inv_multiplier = 1.0;      // 1 / (group x age multiplier), 1 for city sources
    std::vector<double> weights;      // census mixture weights over the age span
    std::size_t source_index = 0;
  };
  struct PreparedMultinomial {
    const MultinomialObservation* obs = nullptr;
    std::size_t source_index = 0;
  };

  void build_names() {
    coordinate_names_ = {"alpha0"};
    for (int a = 0; a < 3; ++a) coordinate_names_.push_back("alpha1[" + age_groups()[a].label() + "]");
    coordinate_names_.push_back("gamma0");
    for (int a = 0; a < 3; ++a) coordinate_names_.push_back("gamma1[" + age_groups()[a].label() + "]");
    coordinate_names_.push_back("delta0");
    for (int a = 0; a < 3; ++a) coordinate_names_.push_back("delta1[" + age_groups()[a].label() + "]");
    for (std::size_t d = 0; d + 1 < kNumDurationCats; ++d)
      coordinate_names_.push_back("delta2[" + duration_scheme().categories[d].label + "]");
    for (std::size_t d = 0; d + 1 < kNumDurationCats; ++d)
      coordinate_names_.push_back("delta3[" + tss_scheme().categories[d].label + "]");

    auto band = [](int a) { return age_groups()[static_cast<std::size_t>(a)].label(); };
    static const char* kGroups[3] = {"cur", "ex", "non"};
    for (const char* g : kGroups)
      for (int a = 0; a < kNumAgeGroups; ++a)
        tracked_names_.push_back("rho_" + std::string(g) + "[" + band(a) + "]");
    for (int a = 0; a < kNumAgeGroups; ++a) tracked_names_.push_back("rho_ever[" + band(a) + "]");
    for (int a = 0; a < kNumAgeGroups; ++a) tracked_names_.push_back("kappa_ex[" + band(a) + "]");
    for (const char* g : kGroups)
      for (int a = 0; a < kNumAgeGroups; ++a)
        tracked_names_.push_back("pi_" + std::string(g) + "[" + band(a) + "]");
    for (const char* g : kGroups)
      for (int a = 0; a < kNumAgeGroups; ++a)
        tracked_names_.push_back("hcv_" + std::string(g) + "[" + band(a) + "]");
    for (int a = 0; a < kNumAgeGroups; ++a) tracked_names_.push_back("pi_age[" + band(a) + "]");
    for (const char* g : kGroups) tracked_names_.push_back("rho_" + std::string(g));
    for (const char* g : kGroups) tracked_names_.push_back("pi_" + std::string(g));
    for (const char* g : kGroups) tracked_names_.push_back("hcv_" + std::string(g));
    tracked_names_.push_back("pi");
    for (const auto& k : bias_keys_) tracked_names_.push_back(k.label());
    deviance_offset_ = tracked_names_.size();
    for (const auto& id : source_ids_) tracked_names_.push_back("deviance[" + id + "]");
  }

  void prepare_observations() {
    std::map<std::string, std::size_t> source_index;
    for (std::size_t s = 0; s < source_ids_.size(); ++s) source_index[source_ids_[s]] = s;
    for (const auto& o : obs_.binomial) {
      PreparedBinomial p;
      p.obs = &o;
      p.source_index = source_index.at(o.source_id);
      if (o.bias_flag == BiasFlag::biased) {
        if (auto key = bias_key(structure_, o.source_id, group_of(o.target.kind))) {
          const auto it = std::find(bias_keys_.begin(), bias_keys_.end(), *key);
          p.bias_coord = static_cast<int>(bias_offset() +
                                          std::distance(bias_keys_.begin(), it));
        }
      }
      const DataSourceMeta& meta = obs_.sources.at(o.source_id);
      if (meta.level != GeographicLevel::city) {
        const auto git = meta.group_multipliers.find(to_string(group_of(o.target.kind)));
        const auto ait = meta.age_multipliers.find(o.target.age_span_label());
        if (git == meta.group_multipliers.end() || ait == meta.age_multipliers.end())
          throw ValidationError("source " + meta.id + ": missing multipliers for " + o.label());
        p.inv_multiplier = 1.0 / (git->second * ait->second);
      }
      if (o.target.is_mixture())
        for (int a = o.target.age_lo; a <= o.target.age_hi; ++a)
          p.weights.push_back(mixture_weight(census_, a, o.target.age_lo, o.target.age_hi));
      prepared_binomial_.push_back(std::move(p));
    }
    for (const auto& o : obs_.multinomial) {
      needed_multinomial_[static_cast<std::size_t>(o.target)] = true;
      prepared_multinomial_.push_back({&o, source_index.at(o.source_id)});
    }
  }

  double log_prior(std::span<const double> theta, const Unpacked& u) const {
    double lp = u.log_jacobian;
    for (std::size_t i = 0; i < stick_offset(); ++i)
      lp += normal_logpdf(theta[i], priors_.normal_variance);
    lp += dirichlet_logpdf(u.history.f_d_ever, priors_.dirichlet_alpha);
    lp += dirichlet_logpdf(u.history.f_tss_ever, priors_.dirichlet_alpha);
    lp += dirichlet_logpdf(u.history.f_aafu_ever, priors_.dirichlet_alpha);
    return lp;
  }

  /// Likelihood shared by density evaluation, deviance recording and
  /// impossible-data diagnosis. Mirrors expected_probability(); the two paths
  /// are cross-checked in the test suite.
  double log_likelihood(std::span<const double> theta, const Unpacked& u,
                        const StratifiedQuantitySet& qs, std::vector<double>* deviance_out,
                        std::vector<std::string>* impossible_out) const {
    double ll = 0.0;
    for (const auto& p : prepared_binomial_) {
      const TargetSpec& t = p.obs->target;
      double prob;
      if (p.weights.empty()) {
        prob = resolve_plain(t, t.age_lo, qs);
        if (p.bias_coord >= 0) prob = add_logit_bias(prob, theta[static_cast<std::size_t>(p.bias_coord)]);
      } else if (options_.mix_then_bias) {
        prob = 0.0;
        for (int a = t.age_lo; a <= t.age_hi; ++a)
          prob += p.weights[static_cast<std::size_t>(a - t.age_lo)] * resolve_plain(t, a, qs);
        if (p.bias_coord >= 0) prob = add_logit_bias(prob, theta[static_cast<std::size_t>(p.bias_coord)]);
      } else {
        prob = 0.0;
        for (int a = t.age_lo; a <= t.age_hi; ++a) {
          double comp = resolve_plain(t, a, qs);
          if (p.bias_coord >= 0) comp = add_logit_bias(comp, theta[static_cast<std::size_t>(p.bias_coord)]);
          prob += p.weights[static_cast<std::size_t>(a - t.age_lo)] * comp;
        }
      }
      prob *= p.inv_multiplier;
      double term;
      if (prob > 1.0) {
        term = -std::numeric_limits<double>::infinity();
      } else {
        term = loglik_binomial(p.obs->y, p.obs->n, prob);
      }
      if (!std::isfinite(term)) {
        if (impossible_out) {
          impossible_out->push_back(p.obs->label());
          continue;
        }
        return -std::numeric_limits<double>::infinity();
      }
      ll += term;
      if (deviance_out)
        (*deviance_out)[p.source_index] +=
            deviance_binomial_term(p.obs->y, p.obs->n, std::min(prob, 1.0));
    }
    std::array<std::vector<double>, 8> predicted;
    for (const auto& p : prepared_multinomial_) {
      auto& probs = predicted[static_cast<std::size_t>(p.obs->target)];
      if (probs.empty()) probs = predicted_multinomial(p.obs->target, u.history, grid_);
      const double term = loglik_multinomial(p.obs->counts, probs);
      if (!std::isfinite(term)) {
        if (impossible_out) {
          impossible_out->push_back(p.obs->label());
          continue;
        }
        return -std::numeric_limits<double>::infinity();
      }
      ll += term;
      if (deviance_out)
        (*deviance_out)[p.source_index] += deviance_multinomial(p.obs->counts, probs);
    }
    return ll;
  }

  ObservationSet obs_;
  CensusTable census_;
  YearGrid grid_;
  BiasStructure structure_;
  PriorSpec priors_;
  LikelihoodOptions options_;
  std::vector<BiasKey> bias_keys_;
  std::vector<std::string> source_ids_;
  std::vector<std::string> coordinate_names_;
  std::vector<std::string> tracked_names_;
  std::size_t deviance_offset_ = 0;
  std::vector<PreparedBinomial> prepared_binomial_;
  std::vector<PreparedMultinomial> prepared_multinomial_;
  std::array<bool, 8> needed_multinomial_{};
};

// ---------------------------------------------------------------------------
// Posterior summaries
// ---------------------------------------------------------------------------

struct QuantitySummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double p2_5 = 0.0;
  double p97_5 = 0.0;
  double mc_se = 0.0;
  double psrf = 1.0;
  bool psrf_indeterminate = false;
  bool converged = true;
};

enum class RunOutcome { ok, impossible_data };

struct PosteriorSummary {
  RunOutcome outcome = RunOutcome::ok;
  std::vector<std::string> impossible_observations;
  std::vector<QuantitySummary> quantities;            // stratified + aggregates + betas
  std::map<std::string, double> source_mean_deviance;
  std::map<std::string, double> source_deviance_mc_se;
  std::map<std::string, double> block_acceptance;     // post-burn-in, averaged over chains
  int chains = 0;
  int retained_per_chain = 0;
  bool all_converged = true;

  const QuantitySummary* find(const std::string& name) const {
    for (const auto& q : quantities)
      if (q.name == name) return &q;
    return nullptr;
  }
  const QuantitySummary& at(const std::string& name) const {
    const auto* q = find(name);
    if (!q) throw std::invalid_argument("no tracked quantity named " + name);
    return *q;
  }
};

struct RunResult {
  PosteriorSummary summary;
  /// Retained draws of every tracked value: [chain][iteration][tracked index].
  std::vector<std::vector<std::vector<double>>> traces;
  std::vector<std::string> tracked_names;
};

inline double percentile(std::vector<double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - std::floor(h)) * (sorted[hi] - sorted[lo]);
}

/// Monte-Carlo standard error of the mean by batch means, pooled over chains.
inline double batch_mean_se(std::span<const std::vector<double>> chains, int batches_per_chain) {
  std::vector<double> batch_means;
  for (const auto& chain : chains) {
    const std::size_t bsize = chain.size() / static_cast<std::size_t>(batches_per_chain);
    if (bsize == 0) continue;
    for (int b = 0; b < batches_per_chain; ++b) {
      double mu = 0.0;
      for (std::size_t i = 0; i < bsize; ++i) mu += chain[static_cast<std::size_t>(b) * bsize + i];
      batch_means.push_back(mu / static_cast<double>(bsize));
    }
  }
  if (batch_means.size() < 2) return 0.0;
  double grand = std::accumulate(batch_means.begin(), batch_means.end(), 0.0) /
                 static_cast<double>(batch_means.size());
  double var = 0.0;
  for (double m : batch_means) var += (m - grand) * (m - grand);
  var /= static_cast<double>(batch_means.size() - 1);
  return std::sqrt(var / static_cast<double>(batch_means.size()));
}

/// Runs all chains (concurrently), discards burn-in, and summarizes every
/// tracked quantity over the pooled post-burn-in draws. Non-convergence is
/// not an error; it only clears the converged flags.
inline RunResult run(const EvidenceModel& model, const SamplerConfig& cfg) {
  cfg.validate();
  RunResult result;
  result.tracked_names = model.tracked_names();
  const std::size_t n_tracked = model.num_tracked();
  const int retained = cfg.iterations - cfg.burn_in;
  result.traces.assign(static_cast<std::size_t>(cfg.chains), {});

  // Fail fast when the data are impossible under the initial state: the
  // posterior has no support anywhere near the start.
  {
    Rng probe = Rng::derive(cfg.seed, 1000);
    const auto theta0 = model.initial_point(probe, cfg.init_jitter_sd);
    if (!std::isfinite(model.log_density(theta0))) {
      auto ids = model.impossible_observations(theta0);
      if (!ids.empty()) {
        result.summary.outcome = RunOutcome::impossible_data;
        result.summary.impossible_observations = std::move(ids);
        return result;
      }
    }
  }

  std::vector<std::map<std::string, double>> chain_acceptance(
      static_cast<std::size_t>(cfg.chains));
  auto worker = [&](int c) {
    auto& trace = result.traces[static_cast<std::size_t>(c)];
    trace.reserve(static_cast<std::size_t>(retained));
    Rng init_rng = Rng::derive(cfg.seed, 1000 + static_cast<unsigned>(c));
    auto init = model.initial_point(init_rng, cfg.init_jitter_sd);
    auto chain = run_single_chain(model, cfg, static_cast<unsigned>(c), std::move(init),
                                  [&](const std::vector<double>& theta) {
                                    trace.emplace_back(n_tracked);
                                    model.record(theta, trace.back());
                                  });
    const auto rates = chain.acceptance_rates();
    for (std::size_t b = 0; b < rates.size(); ++b)
      chain_acceptance[static_cast<std::size_t>(c)][chain.blocks()[b].name] = rates[b];
  };
  {
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(cfg.chains));
    for (int c = 0; c < cfg.chains; ++c) threads.emplace_back(worker, c);
    for (auto& t : threads) t.join();
  }

  PosteriorSummary& s = result.summary;
  s.chains = cfg.chains;
  s.retained_per_chain = retained;
  for (const auto& per_chain : chain_acceptance)
    for (const auto& [name, rate] : per_chain)
      s.block_acceptance[name] += rate / static_cast<double>(cfg.chains);

  const std::size_t dev_offset = model.deviance_track_offset();
  std::vector<std::vector<double>> per_chain(static_cast<std::size_t>(cfg.chains));
  for (std::size_t q = 0; q < n_tracked; ++q) {
    for (int c = 0; c < cfg.chains; ++c) {
      auto& col = per_chain[static_cast<std::size_t>(c)];
      col.resize(static_cast<std::size_t>(retained));
      for (int it = 0; it < retained; ++it)
        col[static_cast<std::size_t>(it)] =
            result.traces[static_cast<std::size_t>(c)][static_cast<std::size_t>(it)][q];
    }
    std::vector<double> pooled;
    pooled.reserve(static_cast<std::size_t>(retained) * static_cast<std::size_t>(cfg.chains));
    for (const auto& col : per_chain) pooled.insert(pooled.end(), col.begin(), col.end());
    double mean = std::accumulate(pooled.begin(), pooled.end(), 0.0) /
                  static_cast<double>(pooled.size());
    double var = 0.0;
    for (double v : pooled) var += (v - mean) * (v - mean);
    var = pooled.size() > 1 ? var / static_cast<double>(pooled.size() - 1) : 0.0;
    const double mc_se = batch_mean_se(per_chain, 20);

    if (q >= dev_offset) {
      const std::string id = result.tracked_names[q].substr(9, result.tracked_names[q].size() - 10);
      s.source_mean_deviance[id] = mean;
      s.source_deviance_mc_se[id] = mc_se;
      continue;
    }
    QuantitySummary qs;
    qs.name = result.tracked_names[q];
    qs.mean = mean;
    qs.sd = std::sqrt(var);
    std::sort(pooled.begin(), pooled.end());
    qs.p2_5 = percentile(pooled, 0.025);
    qs.p97_5 = percentile(pooled, 0.975);
    qs.mc_se = mc_se;
    const auto gr = gelman_rubin(per_chain);
    qs.psrf = gr.psrf;
    qs.psrf_indeterminate = gr.indeterminate;
    if (gr.indeterminate) {
      qs.converged = std::isfinite(gr.psrf);
    } else {
      qs.converged = gr.psrf < kConvergenceThreshold;
    }
    s.all_converged = s.all_converged && qs.converged;
    s.quantities.push_back(std::move(qs));
  }
  return result;
}

}  // namespace prevsynth
