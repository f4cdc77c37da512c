#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "empower/envs.hpp"
#include "empower/models.hpp"
#include "empower/tensor.hpp"

namespace empower {

enum class Algo { vic, alg1, alg2, random };

const char* algo_name(Algo algo);
/// Throws ConfigError for an unknown name.
Algo parse_algo(std::string_view name);

struct TrainConfig {
  Algo algo = Algo::vic;
  std::string world = "det-1d";
  std::optional<int> world_size;
  std::optional<int> t_max;
  /// Unset means the world default: 1e-3 for small worlds, 1e-4 for room worlds.
  std::optional<double> lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 128;
  int t_smooth = 128;
  double sigma = 0.25;
  int n_gmm = 10;
  int hidden = 64;
  double init_std = 0.1;
  int warmup_batches = 1000;
  double alpha = 0.0;
  double entropy_coef = 0.01;
  double baseline_lr = 0.1;
  int total_batches = 5000;
  std::uint64_t seed = 0;
  int repetitions = 5;
  double ema_decay = 0.99;
  int log_every = 1;
  int checkpoint_every = 0;
  bool record_wall_time = false;

  double resolved_lr() const;
  AdamConfig adam() const { return {resolved_lr(), beta1, beta2, adam_eps}; }
  ModelConfig model() const { return {hidden, n_gmm, sigma, init_std}; }
  WorldOverrides overrides() const { return {world_size, t_max}; }
  /// Throws ConfigError on an invalid value or combination.
  void validate() const;
};

/// The learned components of one algorithm. Heads absent for an algorithm are null:
/// random has only a policy, vic adds inference, alg1/alg2 add the transition prior and posterior.
struct AgentBundle {
  AgentBundle(Algo algo, const WorldSpec& world, const ModelConfig& cfg, Rng& init_rng, double init_std);

  Algo algo;
  std::unique_ptr<RecurrentHead> policy;
  std::unique_ptr<RecurrentHead> inference;
  std::unique_ptr<RecurrentHead> prior;
  std::unique_ptr<RecurrentHead> posterior;
  Baseline baseline;

  std::vector<RecurrentHead*> heads();
  std::vector<ParamBlock*> policy_blocks();
  /// Every parameter block except the policy's.
  std::vector<ParamBlock*> model_blocks();
  std::string manifest() const;
};

void save_bundle(const std::string& path, const AgentBundle& bundle);
void load_bundle(const std::string& path, AgentBundle& bundle);

/// Samples one complete option from π^p.
Trajectory sample_episode(AgentBundle& bundle, const WorldSpec& world, StateId start, Rng& rng);
/// Samples `n` options; episode i uses rng.split(i) and start state start_states[i mod |starts|].
std::vector<Trajectory> sample_batch(AgentBundle& bundle, const WorldSpec& world, Rng& rng, int n);

struct RewardBreakdown {
  double policy_term = 0.0;
  double transition_term = 0.0;
  double external_term = 0.0;
  double alpha = 0.0;
  double baseline = 0.0;
  double total_for_gradient = 0.0;
  Algo algo = Algo::vic;

  /// Reward before the baseline is subtracted.
  double reward() const { return policy_term + transition_term + alpha * external_term; }
};

/// Rewards of the bundle's algorithm for each option; the random agent gets α·r^E only.
/// Throws ConfigError if alpha != 0 on a world without rooms.
std::vector<RewardBreakdown> compute_rewards(AgentBundle& bundle, const WorldSpec& world,
                                             std::span<const Trajectory> batch, double alpha);
RewardBreakdown reward_vic(AgentBundle& bundle, const WorldSpec& world, const Trajectory& omega);
RewardBreakdown reward_alg1(AgentBundle& bundle, const WorldSpec& world, const Trajectory& omega);
RewardBreakdown reward_alg2(AgentBundle& bundle, const WorldSpec& world, const Trajectory& omega);
RewardBreakdown mixed_reward(AgentBundle& bundle, const WorldSpec& world, const Trajectory& omega, double alpha);

/// One Adam step on π^p along the batch mean of total_for_gradient × ∇ Σ_t log π^p(a_t|τ_t),
/// plus entropy_coef × per-step policy entropy when entropy_coef > 0.
void policy_gradient_step(AgentBundle& bundle, const WorldSpec& world, std::span<const Trajectory> batch,
                          std::span<const RewardBreakdown> rewards, const AdamConfig& adam, double entropy_coef);

/// One Adam step per model head maximizing the batch log-likelihood of π^q and of the
/// transition heads (softmax heads directly; GMM heads on t_smooth noisy copies of Δx).
void model_step(AgentBundle& bundle, const WorldSpec& world, std::span<const Trajectory> batch,
                const TrainConfig& cfg, Rng& rng);

/// Moves b(s_0) toward the mean reward of the options that started in s_0.
void baseline_step(AgentBundle& bundle, std::span<const Trajectory> batch, std::span<const RewardBreakdown> rewards,
                   double lr);

struct BatchResult {
  std::vector<Trajectory> episodes;
  std::vector<RewardBreakdown> rewards;
};

/// Samples a batch and trains on it. The policy is updated only when `update_policy` is set
/// (it is frozen during warm-up); models and baseline are always updated.
/// Rewards and gradients all come from parameters before this batch's updates.
BatchResult train_batch(AgentBundle& bundle, const WorldSpec& world, const TrainConfig& cfg, Rng& rng,
                        bool update_policy);

/// Gaussian noise for the smoothing fit: per option an env_steps x (t_smooth * dim) matrix of N(0, σ²).
std::vector<Matrix> smoothing_noise(const WorldSpec& world, std::span<const Trajectory> batch, int t_smooth,
                                    double sigma, Rng& rng);

}  // namespace empower
