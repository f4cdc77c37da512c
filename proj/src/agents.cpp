#include "empower/agents.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <map>
#include <sstream>

#include "empower/checkpoint.hpp"
#include "empower/errors.hpp"

namespace empower {

namespace {

const double log_floor = std::log(1e-8);

struct Forward {
  std::optional<StepLogProbs> policy;
  std::optional<StepLogProbs> inference;
  std::optional<StepLogProbs> prior;
  std::optional<StepLogProbs> posterior;
  std::optional<GmmTerms> gmm_prior;
  std::optional<GmmTerms> gmm_posterior;
};

Forward forward(Graph& g, AgentBundle& b, const WorldSpec& world, std::span<const Trajectory> batch,
                std::span<const Matrix> noise, bool with_policy, bool with_models) {
  Forward f;
  if (with_policy) f.policy = action_log_probs(g, *b.policy, world, batch);
  if (!with_models) return f;
  if (b.inference) f.inference = action_log_probs(g, *b.inference, world, batch);
  if (b.algo == Algo::alg1) {
    f.prior = transition_log_probs(g, *b.prior, world, batch);
    f.posterior = transition_log_probs(g, *b.posterior, world, batch);
  } else if (b.algo == Algo::alg2) {
    f.gmm_prior = gmm_log_densities(g, *b.prior, world, batch, noise);
    f.gmm_posterior = gmm_log_densities(g, *b.posterior, world, batch, noise);
  }
  return f;
}

void check_alpha(const WorldSpec& world, double alpha) {
  if (alpha != 0.0 && !world.has_rooms()) {
    throw ConfigError("alpha must be 0 on a world without rooms (" + world.name + ")");
  }
}

std::vector<RewardBreakdown> rewards_from(const Forward& f, const Graph& g, const AgentBundle& b,
                                          const WorldSpec& world, std::span<const Trajectory> batch, double alpha) {
  const std::size_t n = batch.size();
  std::vector<RewardBreakdown> out(n);
  std::vector<double> pol, inf, trans_q, trans_p;
  if (b.algo != Algo::random) {
    pol = f.policy->totals(g, n, log_floor);
    inf = f.inference->totals(g, n, log_floor);
  }
  if (b.algo == Algo::alg1) {
    trans_q = f.posterior->totals(g, n, log_floor);
    trans_p = f.prior->totals(g, n, log_floor);
  } else if (b.algo == Algo::alg2) {
    trans_q = f.gmm_posterior->realized.totals(g, n, log_floor);
    trans_p = f.gmm_prior->realized.totals(g, n, log_floor);
  }
  for (std::size_t i = 0; i < n; ++i) {
    RewardBreakdown& r = out[i];
    r.algo = b.algo;
    r.alpha = alpha;
    if (b.algo != Algo::random) r.policy_term = inf[i] - pol[i];
    if (!trans_q.empty()) r.transition_term = trans_q[i] - trans_p[i];
    r.external_term = external_reward(world, batch[i]);
    r.baseline = b.baseline.value(batch[i].start);
    r.total_for_gradient = r.reward() - r.baseline;
  }
  return out;
}

/// Adds the policy objective (negated, batch-averaged) to `loss`.
Var policy_loss(Graph& g, const StepLogProbs& pol, std::span<const RewardBreakdown> rewards, double entropy_coef) {
  const double inv = 1.0 / static_cast<double>(rewards.size());
  std::vector<double> coef(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) coef[i] = -rewards[i].total_for_gradient * inv;
  Var loss = pol.weighted(g, coef);
  if (entropy_coef > 0.0) {
    for (auto lp : pol.log_probs) {
      loss = g.add(loss, g.scale(g.sum(g.entropy(lp)), -entropy_coef * inv));
    }
  }
  return loss;
}

Var model_loss(Graph& g, const Forward& f, std::size_t n, int t_smooth) {
  const std::vector<double> nll(n, -1.0 / static_cast<double>(n));
  Var loss = g.input(Matrix::Zero(1, 1));
  if (f.inference) loss = g.add(loss, f.inference->weighted(g, nll));
  if (f.prior) loss = g.add(loss, f.prior->weighted(g, nll));
  if (f.posterior) loss = g.add(loss, f.posterior->weighted(g, nll));
  if (f.gmm_prior) {
    const std::vector<double> smooth(n, -1.0 / (static_cast<double>(n) * t_smooth));
    loss = g.add(loss, f.gmm_prior->weighted_smoothed(g, smooth));
    loss = g.add(loss, f.gmm_posterior->weighted_smoothed(g, smooth));
  }
  return loss;
}

void step_all(const std::vector<ParamBlock*>& blocks, const AdamConfig& adam) {
  for (auto* b : blocks) adam_step(*b, adam);
}

RewardBreakdown single_reward(AgentBundle& b, const WorldSpec& world, const Trajectory& omega, Algo expected,
                              double alpha) {
  if (b.algo != expected) {
    throw std::invalid_argument(std::string("reward for ") + algo_name(expected) + " requested from a " +
                                algo_name(b.algo) + " bundle");
  }
  return compute_rewards(b, world, std::span<const Trajectory>(&omega, 1), alpha).front();
}

}  // namespace

const char* algo_name(Algo algo) {
  switch (algo) {
    case Algo::vic: return "vic";
    case Algo::alg1: return "alg1";
    case Algo::alg2: return "alg2";
    case Algo::random: return "random";
  }
  return "?";
}

Algo parse_algo(std::string_view name) {
  for (Algo a : {Algo::vic, Algo::alg1, Algo::alg2, Algo::random}) {
    if (name == algo_name(a)) return a;
  }
  throw ConfigError("unknown algorithm '" + std::string(name) + "'");
}

double TrainConfig::resolved_lr() const {
  if (lr) return *lr;
  return world.rfind("rooms", 0) == 0 ? 1e-4 : 1e-3;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  const auto names = world_names();
  if (std::find(names.begin(), names.end(), world) == names.end()) fail("unknown world '" + world + "'");
  if (world_size && *world_size < 1) fail("world_size must be positive");
  if (t_max && *t_max < 0) fail("t_max must be non-negative");
  if (resolved_lr() < 0.0) fail("lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (t_smooth < 1) fail("t_smooth must be at least 1");
  if (!(sigma > 0.0)) fail("sigma must be positive");
  if (n_gmm < 1) fail("n_gmm must be at least 1");
  if (hidden < 1) fail("hidden must be at least 1");
  if (!(init_std > 0.0)) fail("init_std must be positive");
  if (warmup_batches < 0) fail("warmup_batches must be non-negative");
  if (!std::isfinite(alpha)) fail("alpha must be finite");
  if (entropy_coef < 0.0) fail("entropy_coef must be non-negative");
  if (!(baseline_lr >= 0.0 && baseline_lr <= 1.0)) fail("baseline_lr must lie in [0, 1]");
  if (total_batches < 0) fail("total_batches must be non-negative");
  if (repetitions < 1) fail("repetitions must be at least 1");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) fail("ema_decay must lie in (0, 1)");
  if (log_every < 1) fail("log_every must be at least 1");
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
  if (alpha != 0.0 && world != "rooms-35") fail("alpha != 0 needs a world with rooms");
}

AgentBundle::AgentBundle(Algo algo_, const WorldSpec& world, const ModelConfig& cfg, Rng& init_rng, double init_std)
    : algo(algo_), baseline(world.num_states()) {
  policy = std::make_unique<RecurrentHead>(HeadKind::policy, world, cfg);
  if (algo != Algo::random) inference = std::make_unique<RecurrentHead>(HeadKind::inference, world, cfg);
  if (algo == Algo::alg1) {
    prior = std::make_unique<RecurrentHead>(HeadKind::trans_prior, world, cfg);
    posterior = std::make_unique<RecurrentHead>(HeadKind::trans_posterior, world, cfg);
  } else if (algo == Algo::alg2) {
    prior = std::make_unique<RecurrentHead>(HeadKind::gmm_prior, world, cfg);
    posterior = std::make_unique<RecurrentHead>(HeadKind::gmm_posterior, world, cfg);
  }
  std::uint64_t id = 0;
  for (auto* h : heads()) {
    Rng r = init_rng.split(id++);
    h->init(r, init_std);
  }
}

std::vector<RecurrentHead*> AgentBundle::heads() {
  std::vector<RecurrentHead*> out;
  for (auto* h : {policy.get(), inference.get(), prior.get(), posterior.get()}) {
    if (h) out.push_back(h);
  }
  return out;
}

std::vector<ParamBlock*> AgentBundle::policy_blocks() { return policy->blocks(); }

std::vector<ParamBlock*> AgentBundle::model_blocks() {
  std::vector<ParamBlock*> out;
  for (auto* h : heads()) {
    if (h == policy.get()) continue;
    for (auto* b : h->blocks()) out.push_back(b);
  }
  return out;
}

std::string AgentBundle::manifest() const {
  std::ostringstream out;
  out << "algo=" << algo_name(algo) << ";heads=";
  bool first = true;
  for (const auto* h : {policy.get(), inference.get(), prior.get(), posterior.get()}) {
    if (!h) continue;
    out << (first ? "" : ",") << head_kind_name(h->kind());
    first = false;
  }
  return out.str();
}

void save_bundle(const std::string& path, const AgentBundle& bundle) {
  auto& b = const_cast<AgentBundle&>(bundle);
  std::vector<const ParamBlock*> blocks;
  for (auto* h : b.heads()) {
    for (auto* p : h->blocks()) blocks.push_back(p);
  }
  const auto& values = bundle.baseline.values();
  ParamBlock base("baseline", 1, static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) base.values(0, static_cast<Eigen::Index>(i)) = values[i];
  blocks.push_back(&base);
  save_checkpoint_file(path, bundle.manifest(), blocks);
}

void load_bundle(const std::string& path, AgentBundle& bundle) {
  std::vector<ParamBlock*> blocks;
  for (auto* h : bundle.heads()) {
    for (auto* p : h->blocks()) blocks.push_back(p);
  }
  auto& values = bundle.baseline.values();
  ParamBlock base("baseline", 1, static_cast<Eigen::Index>(values.size()));
  blocks.push_back(&base);
  const std::string manifest = load_checkpoint_file(path, blocks);
  if (manifest != bundle.manifest()) {
    throw ParseError("checkpoint manifest '" + manifest + "' does not match '" + bundle.manifest() + "'", 0);
  }
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = base.values(0, static_cast<Eigen::Index>(i));
}

namespace {

/// Runs π^p in lockstep over several episodes, each with its own RNG stream.
std::vector<Trajectory> sample_lockstep(AgentBundle& bundle, const WorldSpec& world, std::vector<StateId> starts,
                                        std::vector<Rng>& rngs) {
  RecurrentHead& head = *bundle.policy;
  const auto n = static_cast<Eigen::Index>(starts.size());
  const Eigen::Index h = head.hidden();
  std::vector<Trajectory> trajs(starts.size());
  for (std::size_t i = 0; i < starts.size(); ++i) trajs[i].start = starts[i];
  std::vector<bool> alive(starts.size(), true);
  Matrix hs = Matrix::Zero(n, h);
  Matrix cs = Matrix::Zero(n, h);
  Matrix pre(n, 4 * h);
  std::vector<double> weights(static_cast<std::size_t>(world.num_actions()));
  for (int t = 0; t <= world.t_max; ++t) {
    bool any = false;
    for (Eigen::Index r = 0; r < n; ++r) {
      pre.row(r) = head.lstm.bias.values.row(0);
      if (!alive[static_cast<std::size_t>(r)]) continue;
      for (int tok : head.tokens(trajs[static_cast<std::size_t>(r)], t, std::nullopt)) {
        pre.row(r) += head.lstm.w_x.values.row(tok);
      }
      any = true;
    }
    if (!any) break;
    pre.noalias() += hs * head.lstm.w_h.values;
    auto sig = [](auto x) { return 1.0 / (1.0 + (-x).exp()); };
    const Matrix i_g = sig(pre.leftCols(h).array());
    const Matrix f_g = sig(pre.middleCols(h, h).array());
    const Matrix c_hat = pre.middleCols(2 * h, h).array().tanh();
    const Matrix o_g = sig(pre.rightCols(h).array());
    cs = f_g.cwiseProduct(cs) + i_g.cwiseProduct(c_hat);
    hs = o_g.cwiseProduct(Matrix(cs.array().tanh()));
    Matrix logits = hs * head.w_out.values;
    logits.rowwise() += head.b_out.values.row(0);
    for (Eigen::Index r = 0; r < n; ++r) {
      const auto i = static_cast<std::size_t>(r);
      if (!alive[i]) continue;
      Trajectory& tr = trajs[i];
      const auto legal = legal_actions_at(world, tr.current(), t);
      double mx = -std::numeric_limits<double>::infinity();
      for (auto a : legal) mx = std::max(mx, logits(r, a.index));
      std::fill(weights.begin(), weights.end(), 0.0);
      for (auto a : legal) weights[static_cast<std::size_t>(a.index)] = std::exp(logits(r, a.index) - mx);
      const ActionId a{static_cast<int>(rngs[i].categorical(weights))};
      if (step(world, rngs[i], tr, a).done) alive[i] = false;
    }
  }
  return trajs;
}

}  // namespace

Trajectory sample_episode(AgentBundle& bundle, const WorldSpec& world, StateId start, Rng& rng) {
  std::vector<Rng> rngs{rng};
  auto out = sample_lockstep(bundle, world, {start}, rngs);
  rng = rngs[0];
  return std::move(out[0]);
}

std::vector<Trajectory> sample_batch(AgentBundle& bundle, const WorldSpec& world, Rng& rng, int n) {
  if (n < 1) throw std::invalid_argument("sample_batch: batch size must be positive");
  if (world.start_states.empty()) throw std::invalid_argument("sample_batch: world has no start state");
  std::vector<StateId> starts;
  std::vector<Rng> rngs;
  for (int i = 0; i < n; ++i) {
    starts.push_back(world.start_states[static_cast<std::size_t>(i) % world.start_states.size()]);
    rngs.push_back(rng.split(static_cast<std::uint64_t>(i)));
  }
  return sample_lockstep(bundle, world, starts, rngs);
}

std::vector<RewardBreakdown> compute_rewards(AgentBundle& bundle, const WorldSpec& world,
                                             std::span<const Trajectory> batch, double alpha) {
  check_alpha(world, alpha);
  Graph g;
  const bool intrinsic = bundle.algo != Algo::random;
  const Forward f = forward(g, bundle, world, batch, {}, intrinsic, intrinsic);
  return rewards_from(f, g, bundle, world, batch, alpha);
}

RewardBreakdown reward_vic(AgentBundle& bundle, const WorldSpec& world, const Trajectory& omega) {
  return single_reward(bundle, world, omega, Algo::vic, 0.0);
}

RewardBreakdown reward_alg1(AgentBundle& bundle, const WorldSpec& world, const Trajectory& omega) {
  return single_reward(bundle, world, omega, Algo::alg1, 0.0);
}

RewardBreakdown reward_alg2(AgentBundle& bundle, const WorldSpec& world, const Trajectory& omega) {
  return single_reward(bundle, world, omega, Algo::alg2, 0.0);
}

RewardBreakdown mixed_reward(AgentBundle& bundle, const WorldSpec& world, const Trajectory& omega, double alpha) {
  if (!world.has_rooms()) throw ConfigError("mixed reward needs a world with rooms");
  return single_reward(bundle, world, omega, bundle.algo, alpha);
}

void policy_gradient_step(AgentBundle& bundle, const WorldSpec& world, std::span<const Trajectory> batch,
                          std::span<const RewardBreakdown> rewards, const AdamConfig& adam, double entropy_coef) {
  if (rewards.size() != batch.size() || batch.empty()) {
    throw std::invalid_argument("policy_gradient_step: need one reward per option in a non-empty batch");
  }
  for (const auto& r : rewards) {
    if (r.algo != bundle.algo) {
      throw std::invalid_argument(std::string("policy_gradient_step: ") + algo_name(r.algo) + " reward for a " +
                                  algo_name(bundle.algo) + " bundle");
    }
  }
  Graph g;
  const StepLogProbs pol = action_log_probs(g, *bundle.policy, world, batch);
  g.backward(policy_loss(g, pol, rewards, entropy_coef));
  step_all(bundle.policy_blocks(), adam);
}

std::vector<Matrix> smoothing_noise(const WorldSpec& world, std::span<const Trajectory> batch, int t_smooth,
                                    double sigma, Rng& rng) {
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
  if (t_smooth < 1) throw ConfigError("t_smooth must be at least 1");
  std::vector<Matrix> out;
  out.reserve(batch.size());
  for (const auto& tr : batch) {
    Matrix m(tr.env_steps(world), static_cast<Eigen::Index>(t_smooth) * world.dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sigma * rng.normal();
    out.push_back(std::move(m));
  }
  return out;
}

void model_step(AgentBundle& bundle, const WorldSpec& world, std::span<const Trajectory> batch,
                const TrainConfig& cfg, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("model_step: empty batch");
  const auto blocks = bundle.model_blocks();
  if (blocks.empty()) return;
  std::vector<Matrix> noise;
  if (bundle.algo == Algo::alg2) noise = smoothing_noise(world, batch, cfg.t_smooth, cfg.sigma, rng);
  Graph g;
  const Forward f = forward(g, bundle, world, batch, noise, false, true);
  g.backward(model_loss(g, f, batch.size(), cfg.t_smooth));
  step_all(blocks, cfg.adam());
}

void baseline_step(AgentBundle& bundle, std::span<const Trajectory> batch, std::span<const RewardBreakdown> rewards,
                   double lr) {
  std::map<int, std::pair<double, int>> by_start;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto& [sum, count] = by_start[batch[i].start.index];
    sum += rewards[i].reward();
    ++count;
  }
  for (const auto& [s, acc] : by_start) {
    bundle.baseline.update(StateId{s}, acc.first / acc.second, lr);
  }
}

BatchResult train_batch(AgentBundle& bundle, const WorldSpec& world, const TrainConfig& cfg, Rng& rng,
                        bool update_policy) {
  check_alpha(world, cfg.alpha);
  Rng sample_rng = rng.split(0);
  Rng noise_rng = rng.split(1);
  BatchResult res;
  res.episodes = sample_batch(bundle, world, sample_rng, cfg.batch_size);
  std::vector<Matrix> noise;
  if (bundle.algo == Algo::alg2) noise = smoothing_noise(world, res.episodes, cfg.t_smooth, cfg.sigma, noise_rng);

  const bool intrinsic = bundle.algo != Algo::random;
  const bool need_policy = update_policy || intrinsic;
  Graph g;
  const Forward f = forward(g, bundle, world, res.episodes, noise, need_policy, true);
  res.rewards = rewards_from(f, g, bundle, world, res.episodes, cfg.alpha);

  Var loss = model_loss(g, f, res.episodes.size(), cfg.t_smooth);
  if (update_policy) {
    const double entropy = bundle.algo == Algo::random ? cfg.entropy_coef : 0.0;
    loss = g.add(loss, policy_loss(g, *f.policy, res.rewards, entropy));
  }
  g.backward(loss);
  const AdamConfig adam = cfg.adam();
  step_all(bundle.model_blocks(), adam);
  if (update_policy) {
    step_all(bundle.policy_blocks(), adam);
  } else {
    for (auto* b : bundle.policy_blocks()) b->zero_grad();
  }
  baseline_step(bundle, res.episodes, res.rewards, cfg.baseline_lr);
  return res;
}

}  // namespace empower
