#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "empower/agents.hpp"
#include "empower/checkpoint.hpp"
#include "empower/errors.hpp"

using namespace empower;

namespace {

AgentBundle make_bundle(Algo algo, const WorldSpec& w, std::uint64_t seed = 1, int hidden = 16) {
  Rng rng(seed);
  ModelConfig cfg;
  cfg.hidden = hidden;
  return AgentBundle(algo, w, cfg, rng, 0.1);
}

// Zero weights make a head's output the constant b_out.
void constant_head(RecurrentHead& h, const std::vector<double>& out) {
  h.zero();
  for (std::size_t i = 0; i < out.size(); ++i) h.b_out.values(0, static_cast<Eigen::Index>(i)) = out[i];
}

Trajectory trace(const WorldSpec& w, std::vector<std::pair<const char*, int>> steps) {
  Trajectory t{w.start_states[0], {}};
  for (const auto& [a, s] : steps) t.steps.push_back({*w.find_action(a), StateId{s}});
  return t;
}

std::vector<Matrix> snapshot(const std::vector<ParamBlock*>& blocks) {
  std::vector<Matrix> out;
  for (auto* b : blocks) out.push_back(b->values);
  return out;
}

}  // namespace

TEST(Agents, ConfigDefaults) {
  TrainConfig c;
  EXPECT_EQ(c.batch_size, 128);
  EXPECT_EQ(c.t_smooth, 128);
  EXPECT_EQ(c.sigma, 0.25);
  EXPECT_EQ(c.n_gmm, 10);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.resolved_lr(), 1e-3);
  c.world = "rooms-35";
  EXPECT_EQ(c.resolved_lr(), 1e-4);
  c.lr = 5e-4;
  EXPECT_EQ(c.resolved_lr(), 5e-4);
  EXPECT_NO_THROW(c.validate());
}

TEST(Agents, ConfigValidation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.sigma = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.alpha = 30;
  EXPECT_THROW(c.validate(), ConfigError);
  c.world = "rooms-35";
  EXPECT_NO_THROW(c.validate());
  c = {};
  c.world = "nowhere";
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_algo("ppo"), ConfigError);
  EXPECT_EQ(parse_algo("alg2"), Algo::alg2);
}

TEST(Agents, BundleHeads) {
  const WorldSpec w = make_world("det-1d");
  EXPECT_EQ(make_bundle(Algo::random, w).heads().size(), 1u);
  EXPECT_EQ(make_bundle(Algo::vic, w).heads().size(), 2u);
  AgentBundle a1 = make_bundle(Algo::alg1, w);
  EXPECT_EQ(a1.heads().size(), 4u);
  EXPECT_EQ(a1.prior->kind(), HeadKind::trans_prior);
  AgentBundle a2 = make_bundle(Algo::alg2, w);
  EXPECT_EQ(a2.posterior->kind(), HeadKind::gmm_posterior);
}

TEST(Agents, ForcedTerminationAtTmaxZero) {
  const WorldSpec w = make_world("det-1d", {.t_max = 0});
  AgentBundle b = make_bundle(Algo::vic, w);
  Rng rng(3);
  const Trajectory t = sample_episode(b, w, w.start_states[0], rng);
  ASSERT_EQ(t.num_steps(), 1);
  EXPECT_TRUE(w.is_terminate(t.steps[0].action));
  EXPECT_EQ(t.final_state(w), w.start_states[0]);
}

TEST(Agents, SamplingIsDeterministicAndValid) {
  const WorldSpec w = make_world("stoch-2d");
  AgentBundle b = make_bundle(Algo::vic, w);
  Rng r1(9), r2(9);
  const auto x = sample_batch(b, w, r1, 64);
  const auto y = sample_batch(b, w, r2, 64);
  EXPECT_EQ(x, y);
  for (const auto& t : x) {
    EXPECT_NO_THROW(t.check(w));
    EXPECT_TRUE(t.terminated(w));
    EXPECT_LE(t.num_steps(), w.t_max + 1);
  }
  // Episode i of a batch draws from split(i).
  Rng r3 = Rng(9).split(0);
  EXPECT_EQ(sample_episode(b, w, w.start_states[0], r3), x[0]);
}

TEST(Agents, UniformNonTerminatingOptionProbabilities) {
  const WorldSpec w = make_world("stoch-1d", {.size = 3, .t_max = 1});
  AgentBundle b = make_bundle(Algo::vic, w);
  constant_head(*b.policy, {0.0, 0.0, -1000.0});
  Rng rng(11);
  const int n = 40000;
  std::map<std::pair<int, int>, int> counts;
  for (const auto& t : sample_batch(b, w, rng, n)) {
    ASSERT_EQ(t.num_steps(), 2);
    ++counts[{t.steps[0].action.index, t.steps[0].next.index}];
  }
  const std::map<std::pair<int, int>, double> want = {{{0, 0}, 0.35}, {{0, 2}, 0.15}, {{1, 0}, 0.15}, {{1, 2}, 0.35}};
  for (const auto& [key, p] : want) {
    const double se = std::sqrt(p * (1 - p) / n);
    EXPECT_NEAR(static_cast<double>(counts[key]) / n, p, 4 * se);
  }
}

TEST(Agents, VicRewardEqualHeadsIsZero) {
  const WorldSpec w = make_world("det-1d");
  AgentBundle b = make_bundle(Algo::vic, w);
  b.policy->zero();
  b.inference->zero();
  const RewardBreakdown r = reward_vic(b, w, trace(w, {{"left", 4}, {"left", 3}, {"TERMINATE", 3}}));
  EXPECT_NEAR(r.policy_term, 0.0, 1e-12);
  EXPECT_EQ(r.transition_term, 0.0);
}

TEST(Agents, VicRewardSingleStep) {
  const WorldSpec w = make_world("det-1d", {.t_max = 1});
  AgentBundle b = make_bundle(Algo::vic, w);
  constant_head(*b.policy, {0.0, 0.0, -1000.0});
  constant_head(*b.inference, {1000.0, 0.0, 0.0});
  const RewardBreakdown r = reward_vic(b, w, trace(w, {{"left", 4}, {"TERMINATE", 4}}));
  EXPECT_NEAR(r.policy_term, std::log(2.0), 1e-12);
}

TEST(Agents, VicRewardIgnoresTransitionStochasticity) {
  const WorldSpec det = make_world("det-1d");
  const WorldSpec sto = make_world("stoch-1d");
  AgentBundle a = make_bundle(Algo::vic, det, 4);
  AgentBundle b = make_bundle(Algo::vic, sto, 4);
  const Trajectory t = trace(det, {{"right", 6}, {"left", 5}, {"TERMINATE", 5}});
  EXPECT_EQ(reward_vic(a, det, t).policy_term, reward_vic(b, sto, t).policy_term);
}

TEST(Agents, Alg1TransitionTermFromExactHeads) {
  const WorldSpec w = make_world("stoch-1d", {.t_max = 1});
  AgentBundle b = make_bundle(Algo::alg1, w);
  std::vector<double> prior(11, -1000.0), post(11, -1000.0);
  prior[4] = std::log(0.7);
  prior[6] = std::log(0.3);
  post[4] = 0.0;
  constant_head(*b.prior, prior);
  constant_head(*b.posterior, post);
  const RewardBreakdown r = reward_alg1(b, w, trace(w, {{"left", 4}, {"TERMINATE", 4}}));
  EXPECT_NEAR(r.transition_term, std::log(1 / 0.7), 1e-12);
  EXPECT_NEAR(r.transition_term, 0.3567, 1e-4);

  constant_head(*b.posterior, prior);
  EXPECT_NEAR(reward_alg1(b, w, trace(w, {{"left", 4}, {"TERMINATE", 4}})).transition_term, 0.0, 1e-15);
}

TEST(Agents, TerminateStepHasNoTransitionTerm) {
  const WorldSpec w = make_world("stoch-1d");
  AgentBundle b = make_bundle(Algo::alg1, w);
  const RewardBreakdown r = reward_alg1(b, w, trace(w, {{"TERMINATE", 5}}));
  EXPECT_EQ(r.transition_term, 0.0);
}

TEST(Agents, Alg2SharesPolicyTermAndZeroForEqualHeads) {
  const WorldSpec w = make_world("stoch-1d");
  AgentBundle v = make_bundle(Algo::vic, w, 21);
  AgentBundle a = make_bundle(Algo::alg2, w, 21);
  const Trajectory t = trace(w, {{"right", 6}, {"right", 5}, {"TERMINATE", 5}});
  EXPECT_EQ(reward_alg2(a, w, t).policy_term, reward_vic(v, w, t).policy_term);
  // Zeroed heads output the same mixture whatever the conditioning.
  a.posterior->zero();
  a.prior->zero();
  EXPECT_NEAR(reward_alg2(a, w, t).transition_term, 0.0, 1e-15);
}

TEST(Agents, RewardAlgoMismatchThrows) {
  const WorldSpec w = make_world("det-1d");
  AgentBundle b = make_bundle(Algo::vic, w);
  const Trajectory t = trace(w, {{"TERMINATE", 5}});
  EXPECT_THROW(reward_alg1(b, w, t), std::invalid_argument);
  auto rewards = compute_rewards(b, w, std::span<const Trajectory>(&t, 1), 0.0);
  rewards[0].algo = Algo::alg2;
  EXPECT_THROW(policy_gradient_step(b, w, std::span<const Trajectory>(&t, 1), rewards, {}, 0.0), std::invalid_argument);
}

TEST(Agents, ZeroAdvantageLeavesPolicyUnchanged) {
  const WorldSpec w = make_world("det-1d");
  AgentBundle b = make_bundle(Algo::vic, w);
  Rng rng(2);
  const auto batch = sample_batch(b, w, rng, 16);
  auto rewards = compute_rewards(b, w, batch, 0.0);
  for (auto& r : rewards) r.total_for_gradient = 0.0;
  const auto before = snapshot(b.policy_blocks());
  policy_gradient_step(b, w, batch, rewards, {}, 0.0);
  EXPECT_EQ(snapshot(b.policy_blocks()), before);
}

TEST(Agents, BatchOfOneEqualsNoAveraging) {
  const WorldSpec w = make_world("det-1d");
  AgentBundle a = make_bundle(Algo::vic, w, 5);
  AgentBundle b = make_bundle(Algo::vic, w, 5);
  Rng rng(3);
  const auto one = sample_batch(a, w, rng, 1);
  const std::vector<Trajectory> two = {one[0], one[0]};
  const auto r1 = compute_rewards(a, w, one, 0.0);
  const std::vector<RewardBreakdown> r2 = {r1[0], r1[0]};
  policy_gradient_step(a, w, one, r1, {}, 0.0);
  policy_gradient_step(b, w, two, r2, {}, 0.0);
  const auto sa = snapshot(a.policy_blocks()), sb = snapshot(b.policy_blocks());
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_LE((sa[i] - sb[i]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Agents, AlphaRequiresRooms) {
  const WorldSpec w = make_world("det-1d");
  AgentBundle b = make_bundle(Algo::vic, w);
  const Trajectory t = trace(w, {{"TERMINATE", 5}});
  EXPECT_THROW(compute_rewards(b, w, std::span<const Trajectory>(&t, 1), 30.0), ConfigError);
  EXPECT_THROW(mixed_reward(b, w, t, 30.0), ConfigError);
}

TEST(Agents, MixedRewardAndRandomAgent) {
  const WorldSpec w = make_world("rooms-35");
  const StateId s0 = w.start_states[0];
  const auto& c0 = w.coords[static_cast<std::size_t>(s0.index)];
  const StateId a = *w.find_state({c0[0], c0[1] + 1});
  const StateId b = *w.find_state({c0[0] + 1, c0[1] + 1});
  const StateId room = *w.find_state({c0[0] + 2, c0[1] + 1});
  ASSERT_EQ(w.room(room), RoomKind::normal);
  Trajectory t{s0, {{*w.find_action("down"), a}, {*w.find_action("right"), b}, {*w.find_action("right"), room},
                    {w.terminate(), room}}};
  ASSERT_NO_THROW(t.check(w));
  AgentBundle vic = make_bundle(Algo::vic, w);
  const RewardBreakdown r0 = mixed_reward(vic, w, t, 0.0);
  EXPECT_EQ(r0.reward(), r0.policy_term);
  const RewardBreakdown r30 = mixed_reward(vic, w, t, 30.0);
  EXPECT_NEAR(r30.external_term, 0.7, 1e-12);
  EXPECT_NEAR(r30.reward() - r30.policy_term, 21.0, 1e-12);
  AgentBundle rnd = make_bundle(Algo::random, w);
  const RewardBreakdown rr = mixed_reward(rnd, w, t, 30.0);
  EXPECT_EQ(rr.policy_term, 0.0);
  EXPECT_EQ(rr.transition_term, 0.0);
  EXPECT_NEAR(rr.reward(), 21.0, 1e-12);
}

TEST(Agents, LargeEntropyBonusKeepsPolicyUniform) {
  const WorldSpec w = make_world("det-1d", {.t_max = 3});
  TrainConfig cfg;
  cfg.algo = Algo::random;
  cfg.world = "det-1d";
  cfg.entropy_coef = 100.0;
  cfg.batch_size = 32;
  cfg.lr = 0.01;
  AgentBundle b = make_bundle(Algo::random, w, 6);
  constant_head(*b.policy, {2.0, -1.0, 0.5});
  for (int i = 0; i < 500; ++i) {
    Rng rng(static_cast<std::uint64_t>(i));
    train_batch(b, w, cfg, rng, true);
  }
  const Trajectory root{w.start_states[0], {}};
  double h = 0;
  for (double lp : policy_log_probs(*b.policy, w, root, legal_actions(w, root))) h -= std::exp(lp) * lp;
  EXPECT_GE(h, 0.99 * std::log(3.0));
}

TEST(Agents, ModelStepMatchesEmpiricalTransitions) {
  const WorldSpec w = make_world("stoch-1d", {.t_max = 1});
  AgentBundle b = make_bundle(Algo::alg1, w, 7);
  std::vector<Trajectory> batch;
  for (int i = 0; i < 10; ++i) batch.push_back(trace(w, {{"left", i < 7 ? 4 : 6}, {"TERMINATE", i < 7 ? 4 : 6}}));
  TrainConfig cfg;
  cfg.algo = Algo::alg1;
  cfg.world = "stoch-1d";
  cfg.lr = 0.01;
  Rng rng(0);
  for (int i = 0; i < 600; ++i) model_step(b, w, batch, cfg, rng);
  const Trajectory root{w.start_states[0], {}};
  EXPECT_NEAR(std::exp(trans_softmax_log_prob(*b.prior, w, root, ActionId{0}, StateId{4}, std::nullopt)), 0.7, 0.02);
  EXPECT_GT(std::exp(trans_softmax_log_prob(*b.posterior, w, root, ActionId{0}, StateId{4}, StateId{4})), 0.98);
}

TEST(Agents, WarmupFreezesPolicyAndFitsBaseline) {
  const WorldSpec w = make_world("det-1d", {.t_max = 3});
  TrainConfig cfg;
  cfg.algo = Algo::vic;
  cfg.world = "det-1d";
  cfg.batch_size = 64;
  cfg.lr = 0.005;
  AgentBundle b = make_bundle(Algo::vic, w, 8);
  const auto before = snapshot(b.policy_blocks());
  for (int i = 0; i < 200; ++i) {
    Rng rng = Rng::stream(1, {static_cast<std::uint64_t>(i)});
    train_batch(b, w, cfg, rng, false);
  }
  EXPECT_EQ(snapshot(b.policy_blocks()), before);
  double mean = 0;
  const int reps = 20;
  for (int i = 0; i < reps; ++i) {
    Rng rng = Rng::stream(2, {static_cast<std::uint64_t>(i)});
    const auto batch = sample_batch(b, w, rng, 128);
    for (const auto& r : compute_rewards(b, w, batch, 0.0)) mean += r.reward() / (128.0 * reps);
  }
  EXPECT_NEAR(b.baseline.value(w.start_states[0]), mean, 0.05);
}

TEST(Agents, TrainBatchIsDeterministic) {
  const WorldSpec w = make_world("stoch-1d", {.t_max = 3});
  TrainConfig cfg;
  cfg.algo = Algo::alg2;
  cfg.world = "stoch-1d";
  cfg.batch_size = 16;
  cfg.t_smooth = 8;
  auto run = [&] {
    AgentBundle b = make_bundle(Algo::alg2, w, 9);
    std::vector<double> out;
    for (int i = 0; i < 3; ++i) {
      Rng rng(static_cast<std::uint64_t>(i));
      for (const auto& r : train_batch(b, w, cfg, rng, i > 0).rewards) out.push_back(r.reward());
    }
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Agents, BundleCheckpointRoundTrip) {
  const WorldSpec w = make_world("det-2d");
  AgentBundle a = make_bundle(Algo::alg1, w, 10);
  a.baseline.update(w.start_states[0], 3.0, 0.5);
  const auto path = (std::filesystem::temp_directory_path() / "bundle_roundtrip.ckpt").string();
  save_bundle(path, a);
  AgentBundle b = make_bundle(Algo::alg1, w, 99);
  load_bundle(path, b);
  EXPECT_EQ(snapshot(b.model_blocks()), snapshot(a.model_blocks()));
  EXPECT_EQ(snapshot(b.policy_blocks()), snapshot(a.policy_blocks()));
  EXPECT_EQ(b.baseline.values(), a.baseline.values());
  AgentBundle c = make_bundle(Algo::vic, w, 1);
  EXPECT_EQ(read_checkpoint_manifest(path), a.manifest());
  EXPECT_EQ(read_checkpoint_manifest(path).rfind("algo=alg1;", 0), 0u);
  EXPECT_ANY_THROW(load_bundle(path, c));
  std::filesystem::remove(path);
}
