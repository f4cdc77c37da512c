#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "empower/models.hpp"

using namespace empower;

namespace {

Trajectory traj(const WorldSpec& w, std::vector<std::pair<const char*, int>> steps) {
  Trajectory t{w.start_states[0], {}};
  for (const auto& [a, s] : steps) t.steps.push_back({*w.find_action(a), StateId{s}});
  return t;
}

double lse(const std::vector<double>& v) {
  double m = -INFINITY;
  for (double x : v) m = std::max(m, x);
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Trains an action head by plain gradient ascent on the log-likelihood of `batch`.
void fit_actions(RecurrentHead& head, const WorldSpec& w, const std::vector<Trajectory>& batch, int iters) {
  AdamConfig adam;
  adam.lr = 0.01;
  for (int i = 0; i < iters; ++i) {
    Graph g;
    const StepLogProbs lp = action_log_probs(g, head, w, batch);
    std::vector<double> coef(batch.size(), -1.0 / static_cast<double>(batch.size()));
    g.backward(lp.weighted(g, coef));
    for (auto* b : head.blocks()) adam_step(*b, adam);
  }
}

}  // namespace

TEST(Models, ZeroHeadIsUniformOverLegal) {
  const WorldSpec w = make_world("det-1d");
  RecurrentHead head(HeadKind::policy, w, {});
  head.zero();
  const Trajectory t{w.start_states[0], {}};
  const auto legal = legal_actions(w, t);
  const auto lp = policy_log_probs(head, w, t, legal);
  for (double x : lp) EXPECT_NEAR(x, std::log(1.0 / 3.0), 1e-12);
}

TEST(Models, TmaxMaskGivesPointMass) {
  const WorldSpec w = make_world("det-1d", {.t_max = 1});
  Rng rng(1);
  RecurrentHead head(HeadKind::policy, w, {});
  head.init(rng, 0.5);
  const Trajectory t = traj(w, {{"left", 4}});
  const auto lp = policy_log_probs(head, w, t, legal_actions(w, t));
  EXPECT_EQ(lp[static_cast<std::size_t>(w.terminate().index)], 0.0);
  EXPECT_EQ(std::exp(lp[0]), 0.0);
  EXPECT_EQ(std::exp(lp[1]), 0.0);

  RecurrentHead inf(HeadKind::inference, w, {});
  inf.init(rng, 0.5);
  const auto lq = inference_log_probs(inf, w, t, StateId{4}, legal_actions(w, t));
  EXPECT_EQ(lq[static_cast<std::size_t>(w.terminate().index)], 0.0);
  EXPECT_THROW(policy_log_probs(head, w, t, {}), std::invalid_argument);
}

TEST(Models, RandomHeadNormalizes) {
  const WorldSpec w = make_world("det-2d");
  Rng rng(2);
  RecurrentHead head(HeadKind::policy, w, {});
  head.init(rng, 1.0);
  const Trajectory t = traj(w, {{"up", 7}, {"left", 6}});
  const auto lp = policy_log_probs(head, w, t, legal_actions(w, t));
  double s = 0;
  for (double x : lp) s += std::exp(x);
  EXPECT_NEAR(s, 1.0, 1e-10);
}

TEST(Models, ZeroInferenceIsUniform) {
  const WorldSpec w = make_world("det-1d");
  RecurrentHead head(HeadKind::inference, w, {});
  head.zero();
  const Trajectory t{w.start_states[0], {}};
  for (double x : inference_log_probs(head, w, t, StateId{3}, legal_actions(w, t))) {
    EXPECT_NEAR(x, std::log(1.0 / 3.0), 1e-12);
  }
}

TEST(Models, InferenceHeadUsesFinalState) {
  const WorldSpec w = make_world("det-1d", {.t_max = 1});
  Rng rng(3);
  RecurrentHead head(HeadKind::inference, w, {.hidden = 16});
  head.init(rng, 0.1);
  const std::vector<Trajectory> batch = {traj(w, {{"left", 4}, {"TERMINATE", 4}}),
                                         traj(w, {{"right", 6}, {"TERMINATE", 6}})};
  fit_actions(head, w, batch, 200);
  const Trajectory root{w.start_states[0], {}};
  const auto legal = legal_actions(w, root);
  const auto to_left = inference_log_probs(head, w, root, StateId{4}, legal);
  const auto to_right = inference_log_probs(head, w, root, StateId{6}, legal);
  EXPECT_GT(std::exp(to_left[0]), 0.9);
  EXPECT_GT(std::exp(to_right[1]), 0.9);
}

TEST(Models, ZeroSoftmaxTransition) {
  const WorldSpec w = make_world("det-1d");
  RecurrentHead head(HeadKind::trans_prior, w, {});
  head.zero();
  const Trajectory t{w.start_states[0], {}};
  EXPECT_NEAR(trans_softmax_log_prob(head, w, t, ActionId{0}, StateId{4}, std::nullopt), std::log(1.0 / 11), 1e-12);
  EXPECT_THROW(trans_softmax_log_prob(head, w, t, w.terminate(), StateId{4}, std::nullopt), std::invalid_argument);
  EXPECT_THROW(trans_softmax_log_prob(head, w, t, ActionId{0}, StateId{4}, StateId{4}), std::invalid_argument);
}

TEST(Models, SoftmaxTransitionNormalizes) {
  const WorldSpec w = make_world("stoch-1d");
  Rng rng(4);
  RecurrentHead head(HeadKind::trans_posterior, w, {});
  head.init(rng, 1.0);
  const Trajectory t = traj(w, {{"left", 4}});
  const auto lp = trans_softmax_log_probs(head, w, t, ActionId{1}, StateId{5});
  EXPECT_NEAR(lse(lp), 0.0, 1e-10);
}

TEST(Models, SoftmaxPriorFitsDeterministicWorld) {
  const WorldSpec w = make_world("det-1d", {.t_max = 2});
  Rng rng(5);
  RecurrentHead head(HeadKind::trans_prior, w, {.hidden = 16});
  head.init(rng, 0.1);
  std::vector<Trajectory> batch;
  for (const char* a : {"left", "right"}) {
    for (const char* b : {"left", "right"}) {
      Rng r(0);
      Trajectory t{w.start_states[0], {}};
      step(w, r, t, *w.find_action(a));
      step(w, r, t, *w.find_action(b));
      step(w, r, t, w.terminate());
      batch.push_back(t);
    }
  }
  AdamConfig adam;
  adam.lr = 0.01;
  for (int i = 0; i < 300; ++i) {
    Graph g;
    const StepLogProbs lp = transition_log_probs(g, head, w, batch);
    std::vector<double> coef(batch.size(), -0.25);
    g.backward(lp.weighted(g, coef));
    for (auto* b : head.blocks()) adam_step(*b, adam);
  }
  for (const auto& t : batch) {
    Trajectory prefix{t.start, {}};
    for (int s = 0; s < t.env_steps(w); ++s) {
      const auto& st = t.steps[static_cast<std::size_t>(s)];
      EXPECT_GE(trans_softmax_log_prob(head, w, prefix, st.action, st.next, std::nullopt), std::log(0.99));
      prefix.steps.push_back(st);
    }
  }
}

TEST(Models, GmmSingleComponentDensity) {
  const WorldSpec w = make_world("det-1d");
  RecurrentHead head(HeadKind::gmm_prior, w, {.n_gmm = 1});
  head.zero();
  const Trajectory t{w.start_states[0], {}};
  const std::vector<double> x{0.0};
  const double expected = -std::log(0.25 * std::sqrt(2 * std::numbers::pi));
  EXPECT_NEAR(gmm_log_density(head, w, t, ActionId{0}, x, std::nullopt), expected, 1e-12);
  EXPECT_NEAR(expected, 0.4674, 1e-4);
}

TEST(Models, GmmTwoFarComponents) {
  const WorldSpec w = make_world("det-1d");
  RecurrentHead head(HeadKind::gmm_prior, w, {.n_gmm = 2});
  head.zero();
  head.b_out.values(0, 3) = 50.0;  // second mean; logits stay equal
  const Trajectory t{w.start_states[0], {}};
  const std::vector<double> x{0.0};
  const double one = -std::log(0.25 * std::sqrt(2 * std::numbers::pi));
  EXPECT_NEAR(gmm_log_density(head, w, t, ActionId{0}, x, std::nullopt), one + std::log(0.5), 1e-12);
  EXPECT_NEAR(gmm_log_density(head, w, t, ActionId{0}, x, std::nullopt), -0.2258, 1e-4);
}

TEST(Models, GmmIntegratesToOne) {
  const WorldSpec w = make_world("stoch-1d");
  Rng rng(6);
  RecurrentHead head(HeadKind::gmm_posterior, w, {});
  head.init(rng, 1.0);
  const Trajectory t = traj(w, {{"right", 6}});
  const GmmMixture mix = gmm_mixture(head, w, t, ActionId{0}, StateId{5});
  // Trapezoid rule over a range wide enough to hold every component.
  double lo = 1e9, hi = -1e9;
  for (const auto& m : mix.means) {
    lo = std::min(lo, m[0]);
    hi = std::max(hi, m[0]);
  }
  lo -= 3;
  hi += 3;
  const int n = 20000;
  const double dx = (hi - lo) / n;
  double total = 0;
  for (int i = 0; i <= n; ++i) {
    const std::vector<double> x{lo + i * dx};
    total += (i == 0 || i == n ? 0.5 : 1.0) * std::exp(mix.log_density(x)) * dx;
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
  const std::vector<double> probe{6.3};
  EXPECT_NEAR(mix.log_density(probe), gmm_log_density(head, w, t, ActionId{0}, probe, StateId{5}), 1e-10);
}

TEST(Models, GmmRejectsBadQueries) {
  const WorldSpec w = make_world("det-2d");
  RecurrentHead head(HeadKind::gmm_prior, w, {});
  const Trajectory t{w.start_states[0], {}};
  const std::vector<double> wrong_dim{1.0};
  EXPECT_THROW(gmm_log_density(head, w, t, ActionId{0}, wrong_dim, std::nullopt), std::invalid_argument);
  const std::vector<double> x{1.0, 2.0};
  EXPECT_THROW(gmm_log_density(head, w, t, w.terminate(), x, std::nullopt), std::invalid_argument);
}

TEST(Models, BatchMatchesSinglePrefixQueries) {
  const WorldSpec w = make_world("stoch-1d", {.t_max = 3});
  Rng rng(7);
  RecurrentHead pol(HeadKind::policy, w, {.hidden = 8});
  RecurrentHead post(HeadKind::trans_posterior, w, {.hidden = 8});
  RecurrentHead gmm(HeadKind::gmm_posterior, w, {.hidden = 8});
  pol.init(rng, 0.5);
  post.init(rng, 0.5);
  gmm.init(rng, 0.5);
  std::vector<Trajectory> batch = {traj(w, {{"left", 4}, {"left", 3}, {"right", 4}, {"TERMINATE", 4}}),
                                   traj(w, {{"TERMINATE", 5}}),
                                   traj(w, {{"right", 4}, {"TERMINATE", 4}})};
  Graph g;
  const StepLogProbs a = action_log_probs(g, pol, w, batch);
  const StepLogProbs r = transition_log_probs(g, post, w, batch);
  const GmmTerms m = gmm_log_densities(g, gmm, w, batch);
  const auto at = a.totals(g, batch.size(), -1e300);
  const auto rt = r.totals(g, batch.size(), -1e300);
  const auto mt = m.realized.totals(g, batch.size(), -1e300);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trajectory& t = batch[i];
    const StateId sf = t.final_state(w);
    double ea = 0, er = 0, em = 0;
    Trajectory prefix{t.start, {}};
    for (const auto& st : t.steps) {
      ea += policy_log_probs(pol, w, prefix, legal_actions(w, prefix))[static_cast<std::size_t>(st.action.index)];
      if (!w.is_terminate(st.action)) {
        er += trans_softmax_log_prob(post, w, prefix, st.action, st.next, sf);
        const std::vector<double> x{static_cast<double>(w.coords[static_cast<std::size_t>(st.next.index)][0])};
        em += gmm_log_density(gmm, w, prefix, st.action, x, sf);
      }
      prefix.steps.push_back(st);
    }
    EXPECT_NEAR(at[i], ea, 1e-10);
    EXPECT_NEAR(rt[i], er, 1e-10);
    EXPECT_NEAR(mt[i], em, 1e-10);
  }
}

TEST(Models, HeadsAreDeterministic) {
  const WorldSpec w = make_world("det-2d");
  auto run = [&] {
    Rng rng(8);
    RecurrentHead head(HeadKind::policy, w, {});
    head.init(rng, 0.1);
    const Trajectory t = traj(w, {{"up", 7}});
    return policy_log_probs(head, w, t, legal_actions(w, t));
  };
  EXPECT_EQ(run(), run());
}

TEST(Models, Baseline) {
  Baseline b(3);
  EXPECT_EQ(b.value(StateId{1}), 0.0);
  for (int i = 0; i < 1000; ++i) b.update(StateId{1}, 1.0, 0.1);
  EXPECT_NEAR(b.value(StateId{1}), 1.0, 1e-3);
  EXPECT_EQ(b.value(StateId{0}), 0.0);
}
