#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "empower/agents.hpp"
#include "empower/envs.hpp"

namespace empower {

/// −Σ p log p in nats; zero entries contribute 0.
double entropy_nats(std::span<const double> p);

/// Exponential moving average of the final-state distribution of one start state.
/// The first batch initializes the average directly.
class EmpowermentEstimator {
 public:
  explicit EmpowermentEstimator(int num_states, double decay = 0.99);

  /// Folds the batch's empirical final-state distribution in and returns Î.
  double update(std::span<const StateId> batch_finals);
  double value() const;
  const std::vector<double>& distribution() const { return dist_; }
  bool initialized() const { return initialized_; }
  double decay() const { return decay_; }
  /// Overwrites the running distribution (used to resume or to test).
  void set_distribution(std::vector<double> dist);

 private:
  std::vector<double> dist_;
  double decay_;
  bool initialized_ = false;
};

/// One estimator per start state; Î is the mean of their entropies.
class ConditionalEstimator {
 public:
  ConditionalEstimator(const WorldSpec& world, double decay);
  double update(std::span<const Trajectory> batch);
  double value() const;
  const EmpowermentEstimator& at(StateId start) const;
  /// Final-state distribution averaged over start states.
  std::vector<double> pooled() const;

 private:
  const WorldSpec* world_;
  std::vector<StateId> starts_;
  std::vector<EmpowermentEstimator> per_start_;
};

struct RunRecord {
  int run_id = 0;
  Algo algo = Algo::vic;
  std::string world;
  std::uint64_t seed = 0;
  int batch = 0;
  std::int64_t episodes = 0;
  double i_hat = 0.0;
  double policy_term = 0.0;
  double transition_term = 0.0;
  double external_term = 0.0;
  double baseline = 0.0;
  double wall_ms = 0.0;
};

const char* csv_header();
std::string csv_line(const RunRecord& r);

struct RunResult {
  int run_id = 0;
  std::uint64_t seed = 0;
  std::vector<RunRecord> records;
  std::vector<double> final_distribution;  // pooled EMA over start states
  double final_i_hat = 0.0;
  std::unique_ptr<AgentBundle> bundle;
};

struct RunOptions {
  /// Directory for checkpoints; none are written when empty.
  std::string out_dir;
  /// Stops early once Î reaches this value (after the warm-up). Unset means never.
  std::optional<double> stop_at_i_hat;
};

/// Seed of repetition `run_id` under a master seed.
std::uint64_t run_seed(std::uint64_t master, int run_id);

/// Warm-up then joint training of one repetition. On a NumericError the bundle is
/// checkpointed (when out_dir is set) and the error rethrown.
RunResult run_single(const TrainConfig& cfg, int run_id, const RunOptions& opts = {});

struct ExperimentReport {
  TrainConfig config;
  std::vector<RunResult> runs;
  std::vector<int> batches;        // logged batch indices
  std::vector<double> mean_i_hat;  // pointwise mean over repetitions
  double final_mean_i_hat = 0.0;
  std::string csv() const;
};

/// Runs cfg.repetitions independent repetitions on up to `threads` workers
/// (0 = hardware concurrency). The result does not depend on the thread count.
ExperimentReport run_experiment(const TrainConfig& cfg, const RunOptions& opts = {}, unsigned threads = 0);

struct EvalResult {
  double mean_external = 0.0;
  int special_hits = 0;
  int episodes = 0;
  std::vector<double> final_distribution;
};

/// Samples `episodes` options from the trained policy and scores them with r^E.
EvalResult evaluate_policy(AgentBundle& bundle, const WorldSpec& world, Rng& rng, int episodes);

/// CSV of (coord..., probability) rows.
std::string heatmap_csv(const WorldSpec& world, std::span<const double> dist);
/// Binary 8-bit PGM over the coordinate bounding box; the most likely state maps to 255.
std::string heatmap_pgm(const WorldSpec& world, std::span<const double> dist);
/// Writes `<base>.csv` and `<base>.pgm`; throws std::runtime_error if either cannot be written.
void emit_heatmap(const WorldSpec& world, std::span<const double> dist, const std::string& base);

struct Gain {
  double percent = 0.0;
  double ratio = 0.0;
};

/// percent = 100 (Î_alg − Î_vic) / Î_vic, ratio = Î_alg / Î_vic; throws std::domain_error if Î_vic = 0.
Gain compute_gain(double i_alg, double i_vic);

}  // namespace empower
