#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "empower/envs.hpp"
#include "empower/tensor.hpp"

namespace empower {

struct ModelConfig {
  int hidden = 64;
  int n_gmm = 10;
  double sigma = 0.25;
  double init_std = 0.1;
};

enum class HeadKind { policy, inference, trans_prior, trans_posterior, gmm_prior, gmm_posterior };

const char* head_kind_name(HeadKind kind);
/// Heads that also see the final state s_f.
bool is_conditioned(HeadKind kind);
bool is_transition(HeadKind kind);
bool is_gmm(HeadKind kind);

/// LSTM encoder over one-hot step tokens followed by a linear output layer.
///
/// Action heads read (s_t, a_{t-1}) at step t (a null action token at t = 0)
/// and emit logits over all actions. Transition heads read (s_t, a_t) and emit
/// logits over states (softmax form) or n_gmm mixture logits followed by
/// n_gmm mean vectors of Δx (GMM form). Conditioned heads add an s_f token.
/// A one-hot input times w_x is a row lookup, so token embeddings are the rows of w_x.
class RecurrentHead {
 public:
  RecurrentHead(HeadKind kind, const WorldSpec& world, const ModelConfig& cfg);
  RecurrentHead(const RecurrentHead&) = delete;
  RecurrentHead& operator=(const RecurrentHead&) = delete;

  HeadKind kind() const { return kind_; }
  int num_states() const { return num_states_; }
  int num_actions() const { return num_actions_; }
  int dim() const { return dim_; }
  int n_gmm() const { return n_gmm_; }
  double sigma() const { return sigma_; }
  int hidden() const { return lstm.hidden(); }
  int out_dim() const { return static_cast<int>(w_out.cols()); }

  std::vector<ParamBlock*> blocks();
  std::vector<const ParamBlock*> blocks() const;
  void init(Rng& rng, double std);
  void zero();

  /// Token ids fed at step `t` of `traj`; `sf` required iff the head is conditioned.
  std::vector<int> tokens(const Trajectory& traj, int t, std::optional<StateId> sf) const;

  LstmWeights lstm;
  ParamBlock w_out;
  ParamBlock b_out;

 private:
  HeadKind kind_;
  int num_states_;
  int num_actions_;
  int dim_;
  int n_gmm_;
  double sigma_;
};

/// Per-step realized log-probabilities of a batch, rows sorted by decreasing
/// sequence length so that the rows alive at step t are a prefix.
struct StepLogProbs {
  std::vector<int> order;      // row -> trajectory index
  std::vector<int> active;     // rows alive at step t
  std::vector<Var> picked;     // active[t] x 1
  std::vector<Var> log_probs;  // active[t] x |A|, action heads only

  /// Σ_t picked per trajectory (indexed like the input batch), each term floored at `floor_log`.
  std::vector<double> totals(const Graph& g, std::size_t batch, double floor_log) const;
  /// Scalar Σ_t Σ_rows coef[trajectory] * picked.
  Var weighted(Graph& g, std::span<const double> coef) const;
};

/// log π(a_t | τ_t [, s_f]) for every step of complete trajectories, TERMINATE included.
StepLogProbs action_log_probs(Graph& g, RecurrentHead& head, const WorldSpec& world,
                              std::span<const Trajectory> batch);

/// log ρ(s_{t+1} | τ_t, a_t [, s_f]) for every environment step.
StepLogProbs transition_log_probs(Graph& g, RecurrentHead& head, const WorldSpec& world,
                                  std::span<const Trajectory> batch);

struct GmmTerms {
  StepLogProbs realized;      // log f_σ at the noise-free Δx
  std::vector<Var> smoothed;  // active[t] x n_samples, at Δx + noise (empty without noise)
  int n_samples = 0;

  /// Scalar Σ_t Σ_rows Σ_j coef[trajectory] * smoothed.
  Var weighted_smoothed(Graph& g, std::span<const double> coef) const;
};

/// GMM log-densities for every environment step. `noise`, when non-empty, holds
/// per trajectory an env_steps x (n_samples * dim) matrix added to Δx.
GmmTerms gmm_log_densities(Graph& g, RecurrentHead& head, const WorldSpec& world, std::span<const Trajectory> batch,
                           std::span<const Matrix> noise = {});

/// Log-probabilities over all actions after the prefix `traj` (−inf outside `legal`).
std::vector<double> policy_log_probs(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj,
                                     std::span<const ActionId> legal);
std::vector<double> inference_log_probs(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj,
                                        StateId sf, std::span<const ActionId> legal);
/// Log-probabilities over all states for the next transition after `traj` under action `a`.
std::vector<double> trans_softmax_log_probs(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj,
                                            ActionId a, std::optional<StateId> sf);
double trans_softmax_log_prob(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj, ActionId a,
                              StateId next, std::optional<StateId> sf);
/// A GMM head's mixture for one transition, with means shifted to absolute coordinates.
struct GmmMixture {
  std::vector<double> log_weights;
  std::vector<std::vector<double>> means;
  double sigma = 0.0;
  double log_density(std::span<const double> x) const;
};
GmmMixture gmm_mixture(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj, ActionId a,
                       std::optional<StateId> sf);

/// log Σ_i w_i N(x_next − x_t; μ_i, σ² I) for the transition after `traj` under action `a`.
double gmm_log_density(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj, ActionId a,
                       std::span<const double> x_next, std::optional<StateId> sf);

/// Per-start-state scalar b(s_0), fitted by SGD on squared error.
class Baseline {
 public:
  explicit Baseline(int num_states = 0) : values_(static_cast<std::size_t>(num_states), 0.0) {}
  double value(StateId s0) const;
  void update(StateId s0, double target, double lr);
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

 private:
  std::vector<double> values_;
};

}  // namespace empower
