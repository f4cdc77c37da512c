#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "empower/agents.hpp"
#include "empower/envs.hpp"

namespace empower {

/// Canonical prefix encoding: (s_0, a_0, s_1, ..., a_{t-1}, s_t) as raw indices.
using PrefixKey = std::vector<int>;
PrefixKey prefix_key(const Trajectory& prefix);

/// Policy given by logits per prefix. Prefixes without an entry act uniformly over
/// their legal actions; -inf logits give probability exactly 0.
class TabularPolicy {
 public:
  void set_logits(const PrefixKey& key, std::vector<double> logits);
  const std::vector<double>* find(const PrefixKey& key) const;
  /// π(·|τ) over all actions of `world`, zero outside the legal set.
  std::vector<double> probs(const WorldSpec& world, const Trajectory& prefix) const;
  /// Inserts zero logits for every reachable live prefix that has no entry.
  void materialize(const WorldSpec& world, StateId start);

  std::map<PrefixKey, std::vector<double>>& table() { return logits_; }
  const std::map<PrefixKey, std::vector<double>>& table() const { return logits_; }

 private:
  std::map<PrefixKey, std::vector<double>> logits_;
};

/// Every reachable live prefix gets N(0, scale²) logits on its legal actions.
TabularPolicy random_tabular_policy(const WorldSpec& world, StateId start, Rng& rng, double scale);

/// Text form: one line per prefix, `s0 a0 s1 ... st : logit_0 ... logit_{|A|-1}`,
/// states as indices, actions as names, `-inf` allowed, `#` comments.
std::string policy_to_text(const WorldSpec& world, const TabularPolicy& policy);
TabularPolicy parse_policy(const WorldSpec& world, std::string_view text);
TabularPolicy load_policy_file(const WorldSpec& world, const std::string& path);

struct OptionProb {
  Trajectory omega;
  double prob = 0.0;
};

struct PrefixNode {
  Trajectory prefix;
  double reach = 0.0;                              // P(τ_t)
  std::vector<double> policy;                      // π(a|τ_t)
  std::vector<double> finals;                      // P(s_f | τ_t)
  std::vector<std::vector<double>> finals_after;   // P(s_f | τ_t, a_t), per action
};

/// Exhaustive enumeration of the options of one start state under a tabular policy.
struct ExactAnalysis {
  const WorldSpec* world = nullptr;
  StateId start;
  std::vector<OptionProb> options;
  std::vector<double> final_marginal;
  double mutual_information = 0.0;  // = H(s_f | s_0), implicit options
  std::map<PrefixKey, PrefixNode> prefixes;

  const PrefixNode& node(const Trajectory& prefix) const;
  double policy_prob(const Trajectory& prefix, ActionId a) const;
  double prior_trans(const Trajectory& prefix, ActionId a, StateId next) const;
  /// p(a | τ, s_f); throws if P(s_f | τ) = 0.
  double posterior_action(const Trajectory& prefix, ActionId a, StateId sf) const;
  /// p(s' | τ, a, s_f); throws if P(s_f | τ, a) = 0.
  double posterior_trans(const Trajectory& prefix, ActionId a, StateId next, StateId sf) const;
  /// p(s_f | s_0).
  double final_prob(StateId sf) const { return final_marginal.at(static_cast<std::size_t>(sf.index)); }
};

inline constexpr std::size_t default_enumeration_cap = 1000000;

/// Throws std::length_error when more than `cap` options have positive probability.
ExactAnalysis analyze(const WorldSpec& world, const TabularPolicy& policy, StateId start,
                      std::size_t cap = default_enumeration_cap);
std::vector<OptionProb> enumerate_options(const WorldSpec& world, const TabularPolicy& policy, StateId start,
                                          std::size_t cap = default_enumeration_cap);

/// H(s_f|s_0) of the exact final-state marginal.
double exact_mutual_information(const ExactAnalysis& analysis);
/// Σ_Ω p(Ω) r^I_Ω with the per-step log-ratios under the exact posteriors.
double mutual_information_from_rewards(const ExactAnalysis& analysis);

/// Σ_t log p(a_t|τ_t,s_f)/π(a_t|τ_t) over all steps incl. TERMINATE.
double exact_policy_reward(const ExactAnalysis& analysis, const Trajectory& omega);
/// Σ over environment steps of log p(s'|τ,a,s_f)/p(s'|τ,a); throws for a zero-probability option.
double exact_bias(const ExactAnalysis& analysis, const Trajectory& omega);
/// r^I_Ω = policy reward + bias.
double exact_intrinsic_reward(const ExactAnalysis& analysis, const Trajectory& omega);
double option_probability(const ExactAnalysis& analysis, const Trajectory& omega);

/// Probabilities that stand in for the true posteriors and prior in I^VE and I^VE_σ.
class ModelSet {
 public:
  virtual ~ModelSet() = default;
  /// π^q(·|τ, s_f) over all actions.
  virtual std::vector<double> inference(const Trajectory& prefix, StateId sf) = 0;
  /// ρ^q(·|τ, a, s_f) over all states.
  virtual std::vector<double> posterior(const Trajectory& prefix, ActionId a, StateId sf) = 0;
  /// ρ^p(·|τ, a) over all states.
  virtual std::vector<double> prior(const Trajectory& prefix, ActionId a) = 0;
  /// log f^q_σ(x|τ, a, s_f) and log f^p_σ(x|τ, a) at absolute coordinates x.
  virtual double log_density_posterior(const Trajectory& prefix, ActionId a, std::span<const double> x, StateId sf);
  virtual double log_density_prior(const Trajectory& prefix, ActionId a, std::span<const double> x);
};

/// The true distributions; densities are the exact σ-smoothed mixtures.
class ExactModels : public ModelSet {
 public:
  ExactModels(const ExactAnalysis& analysis, std::optional<double> sigma = std::nullopt);
  std::vector<double> inference(const Trajectory& prefix, StateId sf) override;
  std::vector<double> posterior(const Trajectory& prefix, ActionId a, StateId sf) override;
  std::vector<double> prior(const Trajectory& prefix, ActionId a) override;
  double log_density_posterior(const Trajectory& prefix, ActionId a, std::span<const double> x, StateId sf) override;
  double log_density_prior(const Trajectory& prefix, ActionId a, std::span<const double> x) override;

 private:
  const ExactAnalysis& analysis_;
  std::optional<double> sigma_;
};

/// Exact distributions with every probability multiplied by exp(scale·N(0,1)) and
/// renormalized over the same support; the noise is a fixed function of (seed, query).
class PerturbedModels : public ModelSet {
 public:
  PerturbedModels(const ExactAnalysis& analysis, std::uint64_t seed, double scale);
  std::vector<double> inference(const Trajectory& prefix, StateId sf) override;
  std::vector<double> posterior(const Trajectory& prefix, ActionId a, StateId sf) override;
  std::vector<double> prior(const Trajectory& prefix, ActionId a) override;

 private:
  std::vector<double> perturb(std::vector<double> p, std::uint64_t tag, const PrefixKey& key, int a, int sf) const;
  ExactModels exact_;
  std::uint64_t seed_;
  double scale_;
};

/// Reads a bundle's heads: softmax transition heads for alg1, GMM heads for alg2.
class BundleModels : public ModelSet {
 public:
  BundleModels(AgentBundle& bundle, const WorldSpec& world);
  std::vector<double> inference(const Trajectory& prefix, StateId sf) override;
  std::vector<double> posterior(const Trajectory& prefix, ActionId a, StateId sf) override;
  std::vector<double> prior(const Trajectory& prefix, ActionId a) override;
  double log_density_posterior(const Trajectory& prefix, ActionId a, std::span<const double> x, StateId sf) override;
  double log_density_prior(const Trajectory& prefix, ActionId a, std::span<const double> x) override;

 private:
  AgentBundle& bundle_;
  const WorldSpec& world_;
};

struct VariationalEstimate {
  double i_ve = 0.0;
  double u_ve = 0.0;
  double kl_posterior = 0.0;  // Σ_sf p(s_f) KL[p(·|s_f) ‖ π^q ρ^q]
  double kl_prior = 0.0;      // KL[p ‖ π^p ρ^p]
};

/// I^VE with the models' π^q, ρ^q, ρ^p and the true π^p, and its bound U^VE.
VariationalEstimate exact_ive_and_uve(const ExactAnalysis& analysis, ModelSet& models);

struct SmoothedEstimate {
  double i_ve_sigma = 0.0;
  double u_sigma_1 = 0.0;
  double u_sigma_2 = 0.0;
};

/// I^VE_σ and U^VE_{σ,1}, U^VE_{σ,2} with the models' π^q and smoothed densities
/// evaluated at the realized (noise-free) next states.
SmoothedEstimate exact_smoothed_estimate(const ExactAnalysis& analysis, ModelSet& models);

/// Exact σ-smoothed transition densities of the analysed world and policy.
class SmoothedDensity {
 public:
  SmoothedDensity(const ExactAnalysis& analysis, double sigma);
  double prior(const Trajectory& prefix, ActionId a, std::span<const double> x) const;
  double posterior(const Trajectory& prefix, ActionId a, std::span<const double> x, StateId sf) const;
  double log_prior(const Trajectory& prefix, ActionId a, std::span<const double> x) const;
  double log_posterior(const Trajectory& prefix, ActionId a, std::span<const double> x, StateId sf) const;
  /// Draws x = s' + z with s' ~ p(·|τ, a [, s_f]) and z ~ N(0, σ² I).
  std::vector<double> sample(const Trajectory& prefix, ActionId a, std::optional<StateId> sf, Rng& rng) const;
  double sigma() const { return sigma_; }

 private:
  std::vector<double> atoms(const Trajectory& prefix, ActionId a, std::optional<StateId> sf) const;
  double mixture(const std::vector<double>& weights, std::span<const double> x) const;
  const ExactAnalysis& analysis_;
  double sigma_;
};

struct KlEstimate {
  double kl = 0.0;
  double std_error = 0.0;
  int samples = 0;
};

/// Monte Carlo KL(f ‖ g) = E_{x~f}[log f(x) − log g(x)] for one transition (prefix, a [, s_f]),
/// g given by a GMM head.
KlEstimate monte_carlo_kl(const SmoothedDensity& exact, RecurrentHead& head, const WorldSpec& world,
                          const Trajectory& prefix, ActionId a, std::optional<StateId> sf, int samples, Rng& rng);

struct SmoothingBounds {
  double sigma = 0.0;
  double difference = 0.0;  // I − I_σ
  double lower = 0.0;       // −(T_max / p_min,f) e^{−d²/2σ²}
  double upper = 0.0;       // (T_max / p_min) e^{−d²/2σ²}
  double lower_mean = 0.0;  // same with T̄
  double upper_mean = 0.0;
  double t_bar = 0.0;
  int t_max = 0;
  double p_min = 0.0;
  double p_min_f = 0.0;
  double d_min = 0.0;
  bool holds = false;  // lower ≤ difference ≤ upper
};

/// I − I_σ computed exactly (true π's, exact smoothed densities at noise-free states)
/// against the smoothing-error envelope. p_min / p_min,f are the smallest nonzero
/// prior / posterior transition probabilities over the enumerated support.
SmoothingBounds smoothing_bound_check(const ExactAnalysis& analysis, double sigma);

using PolicyGradient = std::map<PrefixKey, std::vector<double>>;

/// Σ_Ω p(Ω)(r^I_Ω − shift) ∇ log p(Ω) with respect to every logit of `policy`'s table.
PolicyGradient exact_policy_gradient(const WorldSpec& world, const TabularPolicy& policy, StateId start,
                                     double baseline_shift = 0.0);
/// Central differences of exact_mutual_information with respect to every finite logit.
PolicyGradient finite_difference_policy_grad(const WorldSpec& world, const TabularPolicy& policy, StateId start,
                                             double h);
/// Batch mean of (r^I_Ω − b) ∇ log π(Ω) over `episodes` sampled options, r^I from the
/// exact posteriors and b the batch-mean reward.
PolicyGradient sampled_policy_gradient(const WorldSpec& world, const TabularPolicy& policy, StateId start,
                                       int episodes, Rng& rng);

double gradient_max_abs(const PolicyGradient& g);
/// max |a − b| / max |b|.
double gradient_relative_error(const PolicyGradient& a, const PolicyGradient& b);
double gradient_cosine(const PolicyGradient& a, const PolicyGradient& b);

/// Samples one option from a tabular policy.
Trajectory sample_tabular(const WorldSpec& world, const TabularPolicy& policy, StateId start, Rng& rng);

}  // namespace empower
