#include "empower/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "empower/errors.hpp"

namespace empower {

namespace {

constexpr double neg_inf = -std::numeric_limits<double>::infinity();

void require_live(const WorldSpec& world, const Trajectory& prefix) {
  if (prefix.terminated(world)) throw std::invalid_argument("prefix is already terminated");
}

/// Visits every reachable live prefix (all legal actions, positive outcomes) in depth-first order.
void for_each_prefix(const WorldSpec& world, StateId start, const std::function<void(const Trajectory&)>& fn,
                     std::size_t cap = default_enumeration_cap) {
  std::size_t visited = 0;
  Trajectory tau{start, {}};
  std::function<void()> rec = [&]() {
    if (++visited > cap) throw std::length_error("prefix enumeration exceeds cap");
    fn(tau);
    for (auto a : legal_actions_at(world, tau.current(), tau.num_steps())) {
      if (world.is_terminate(a)) continue;
      for (const auto& o : world.table.row(tau.current(), a)) {
        if (o.prob <= 0.0) continue;
        tau.steps.push_back({a, o.next});
        rec();
        tau.steps.pop_back();
      }
    }
  };
  rec();
}

double log_sum_exp(std::span<const double> v) {
  double mx = neg_inf;
  for (double x : v) mx = std::max(mx, x);
  if (mx == neg_inf) return neg_inf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

double sq_dist(const std::vector<int>& a, std::span<const double> x) {
  double d2 = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) d2 += (x[c] - a[c]) * (x[c] - a[c]);
  return d2;
}

std::vector<double> coord_of(const WorldSpec& world, StateId s) {
  const auto& c = world.coords[static_cast<std::size_t>(s.index)];
  return {c.begin(), c.end()};
}

Trajectory extend(const Trajectory& prefix, ActionId a, StateId next) {
  Trajectory t = prefix;
  t.steps.push_back({a, next});
  return t;
}

}  // namespace

PrefixKey prefix_key(const Trajectory& prefix) {
  PrefixKey key;
  key.reserve(1 + 2 * prefix.steps.size());
  key.push_back(prefix.start.index);
  for (const auto& s : prefix.steps) {
    key.push_back(s.action.index);
    key.push_back(s.next.index);
  }
  return key;
}

void TabularPolicy::set_logits(const PrefixKey& key, std::vector<double> logits) { logits_[key] = std::move(logits); }

const std::vector<double>* TabularPolicy::find(const PrefixKey& key) const {
  const auto it = logits_.find(key);
  return it == logits_.end() ? nullptr : &it->second;
}

std::vector<double> TabularPolicy::probs(const WorldSpec& world, const Trajectory& prefix) const {
  require_live(world, prefix);
  const auto legal = legal_actions(world, prefix);
  const auto* logits = find(prefix_key(prefix));
  if (logits && static_cast<int>(logits->size()) != world.num_actions()) {
    throw std::invalid_argument("tabular policy: logit vector has the wrong size");
  }
  std::vector<double> out(static_cast<std::size_t>(world.num_actions()), 0.0);
  double mx = neg_inf;
  for (auto a : legal) mx = std::max(mx, logits ? (*logits)[static_cast<std::size_t>(a.index)] : 0.0);
  if (mx == neg_inf) throw std::invalid_argument("tabular policy: every legal action has -inf logit");
  double sum = 0.0;
  for (auto a : legal) {
    const double l = logits ? (*logits)[static_cast<std::size_t>(a.index)] : 0.0;
    out[static_cast<std::size_t>(a.index)] = std::exp(l - mx);
    sum += out[static_cast<std::size_t>(a.index)];
  }
  for (auto& p : out) p /= sum;
  return out;
}

void TabularPolicy::materialize(const WorldSpec& world, StateId start) {
  for_each_prefix(world, start, [&](const Trajectory& tau) {
    logits_.try_emplace(prefix_key(tau), static_cast<std::size_t>(world.num_actions()), 0.0);
  });
}

TabularPolicy random_tabular_policy(const WorldSpec& world, StateId start, Rng& rng, double scale) {
  TabularPolicy p;
  for_each_prefix(world, start, [&](const Trajectory& tau) {
    std::vector<double> logits(static_cast<std::size_t>(world.num_actions()), 0.0);
    for (auto a : legal_actions(world, tau)) logits[static_cast<std::size_t>(a.index)] = scale * rng.normal();
    p.set_logits(prefix_key(tau), std::move(logits));
  });
  return p;
}

std::string policy_to_text(const WorldSpec& world, const TabularPolicy& policy) {
  std::ostringstream out;
  char buf[32];
  for (const auto& [key, logits] : policy.table()) {
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (i > 0) out << ' ';
      if (i % 2 == 0) {
        out << key[i];
      } else {
        out << world.action_name(ActionId{key[i]});
      }
    }
    out << " :";
    for (double l : logits) {
      std::snprintf(buf, sizeof buf, "%.17g", l);
      out << ' ' << buf;
    }
    out << '\n';
  }
  return out.str();
}

TabularPolicy parse_policy(const WorldSpec& world, std::string_view text) {
  TabularPolicy policy;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const auto colon = raw.find(':');
    if (colon == std::string::npos) {
      if (raw.find_first_not_of(" \t\r") != std::string::npos) throw ParseError("expected 'prefix : logits'", line_no);
      continue;
    }
    std::istringstream lhs(raw.substr(0, colon));
    std::istringstream rhs(raw.substr(colon + 1));
    PrefixKey key;
    std::string tok;
    while (lhs >> tok) {
      if (key.size() % 2 == 0) {
        try {
          key.push_back(std::stoi(tok));
        } catch (const std::exception&) {
          throw ParseError("expected a state index, got '" + tok + "'", line_no);
        }
        if (key.back() < 0 || key.back() >= world.num_states()) throw ParseError("state out of range", line_no);
      } else {
        const auto a = world.find_action(tok);
        if (!a) throw ParseError("unknown action '" + tok + "'", line_no);
        key.push_back(a->index);
      }
    }
    if (key.empty() || key.size() % 2 == 0) throw ParseError("prefix must start and end with a state", line_no);
    std::vector<double> logits;
    while (rhs >> tok) {
      try {
        logits.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ParseError("bad logit '" + tok + "'", line_no);
      }
    }
    if (static_cast<int>(logits.size()) != world.num_actions()) {
      throw ParseError("expected " + std::to_string(world.num_actions()) + " logits", line_no);
    }
    policy.set_logits(key, std::move(logits));
  }
  return policy;
}

TabularPolicy load_policy_file(const WorldSpec& world, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open policy file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_policy(world, buf.str());
}

const PrefixNode& ExactAnalysis::node(const Trajectory& prefix) const {
  const auto it = prefixes.find(prefix_key(prefix));
  if (it == prefixes.end()) throw std::invalid_argument("prefix has probability 0 under the analysed policy");
  return it->second;
}

double ExactAnalysis::policy_prob(const Trajectory& prefix, ActionId a) const {
  return node(prefix).policy.at(static_cast<std::size_t>(a.index));
}

double ExactAnalysis::prior_trans(const Trajectory& prefix, ActionId a, StateId next) const {
  return world->table.prob(prefix.current(), a, next);
}

double ExactAnalysis::posterior_action(const Trajectory& prefix, ActionId a, StateId sf) const {
  const PrefixNode& n = node(prefix);
  const double f = n.finals.at(static_cast<std::size_t>(sf.index));
  if (f <= 0.0) throw std::domain_error("posterior_action: conditioning event has probability 0");
  return n.policy[static_cast<std::size_t>(a.index)] *
         n.finals_after[static_cast<std::size_t>(a.index)][static_cast<std::size_t>(sf.index)] / f;
}

double ExactAnalysis::posterior_trans(const Trajectory& prefix, ActionId a, StateId next, StateId sf) const {
  if (world->is_terminate(a)) throw std::invalid_argument("posterior_trans: TERMINATE has no transition");
  const PrefixNode& n = node(prefix);
  const double fa = n.finals_after.at(static_cast<std::size_t>(a.index))[static_cast<std::size_t>(sf.index)];
  if (n.policy[static_cast<std::size_t>(a.index)] <= 0.0 || fa <= 0.0) {
    throw std::domain_error("posterior_trans: conditioning event has probability 0");
  }
  const double p = world->table.prob(prefix.current(), a, next);
  if (p <= 0.0) return 0.0;
  const PrefixNode& child = node(extend(prefix, a, next));
  return p * child.finals[static_cast<std::size_t>(sf.index)] / fa;
}

ExactAnalysis analyze(const WorldSpec& world, const TabularPolicy& policy, StateId start, std::size_t cap) {
  ExactAnalysis an;
  an.world = &world;
  an.start = start;
  const auto S = static_cast<std::size_t>(world.num_states());
  const auto A = static_cast<std::size_t>(world.num_actions());
  Trajectory tau{start, {}};
  std::function<const PrefixNode&(double)> visit = [&](double reach) -> const PrefixNode& {
    PrefixNode n;
    n.prefix = tau;
    n.reach = reach;
    n.policy = policy.probs(world, tau);
    n.finals.assign(S, 0.0);
    n.finals_after.assign(A, std::vector<double>(S, 0.0));
    for (std::size_t ai = 0; ai < A; ++ai) {
      const double pa = n.policy[ai];
      if (pa <= 0.0) continue;
      const ActionId a{static_cast<int>(ai)};
      auto& after = n.finals_after[ai];
      if (world.is_terminate(a)) {
        if (an.options.size() >= cap) throw std::length_error("option enumeration exceeds cap");
        an.options.push_back({extend(tau, a, tau.current()), reach * pa});
        after[static_cast<std::size_t>(tau.current().index)] = 1.0;
      } else {
        for (const auto& o : world.table.row(tau.current(), a)) {
          if (o.prob <= 0.0) continue;
          tau.steps.push_back({a, o.next});
          const PrefixNode& child = visit(reach * pa * o.prob);
          tau.steps.pop_back();
          for (std::size_t s = 0; s < S; ++s) after[s] += o.prob * child.finals[s];
        }
      }
      for (std::size_t s = 0; s < S; ++s) n.finals[s] += pa * after[s];
    }
    auto [it, inserted] = an.prefixes.emplace(prefix_key(tau), std::move(n));
    return it->second;
  };
  visit(1.0);
  an.final_marginal.assign(S, 0.0);
  for (const auto& o : an.options) an.final_marginal[static_cast<std::size_t>(o.omega.final_state(world).index)] += o.prob;
  an.mutual_information = exact_mutual_information(an);
  return an;
}

std::vector<OptionProb> enumerate_options(const WorldSpec& world, const TabularPolicy& policy, StateId start,
                                          std::size_t cap) {
  return analyze(world, policy, start, cap).options;
}

double exact_mutual_information(const ExactAnalysis& analysis) {
  double h = 0.0;
  for (double p : analysis.final_marginal) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double option_probability(const ExactAnalysis& analysis, const Trajectory& omega) {
  const WorldSpec& w = *analysis.world;
  if (omega.start != analysis.start || !omega.terminated(w)) return 0.0;
  double p = 1.0;
  Trajectory tau{omega.start, {}};
  for (const auto& s : omega.steps) {
    if (!analysis.prefixes.count(prefix_key(tau))) return 0.0;
    p *= analysis.policy_prob(tau, s.action);
    if (!w.is_terminate(s.action)) p *= w.table.prob(tau.current(), s.action, s.next);
    tau.steps.push_back(s);
  }
  return p;
}

double exact_policy_reward(const ExactAnalysis& analysis, const Trajectory& omega) {
  if (option_probability(analysis, omega) <= 0.0) throw std::domain_error("option has probability 0");
  const StateId sf = omega.final_state(*analysis.world);
  double r = 0.0;
  Trajectory tau{omega.start, {}};
  for (const auto& s : omega.steps) {
    r += std::log(analysis.posterior_action(tau, s.action, sf)) - std::log(analysis.policy_prob(tau, s.action));
    tau.steps.push_back(s);
  }
  return r;
}

double exact_bias(const ExactAnalysis& analysis, const Trajectory& omega) {
  if (option_probability(analysis, omega) <= 0.0) throw std::domain_error("option has probability 0");
  const WorldSpec& w = *analysis.world;
  const StateId sf = omega.final_state(w);
  double b = 0.0;
  Trajectory tau{omega.start, {}};
  for (const auto& s : omega.steps) {
    if (!w.is_terminate(s.action)) {
      b += std::log(analysis.posterior_trans(tau, s.action, s.next, sf)) -
           std::log(analysis.prior_trans(tau, s.action, s.next));
    }
    tau.steps.push_back(s);
  }
  return b;
}

double exact_intrinsic_reward(const ExactAnalysis& analysis, const Trajectory& omega) {
  return exact_policy_reward(analysis, omega) + exact_bias(analysis, omega);
}

double mutual_information_from_rewards(const ExactAnalysis& analysis) {
  double i = 0.0;
  for (const auto& o : analysis.options) i += o.prob * exact_intrinsic_reward(analysis, o.omega);
  return i;
}

double ModelSet::log_density_posterior(const Trajectory&, ActionId, std::span<const double>, StateId) {
  throw std::logic_error("model set has no smoothed densities");
}

double ModelSet::log_density_prior(const Trajectory&, ActionId, std::span<const double>) {
  throw std::logic_error("model set has no smoothed densities");
}

ExactModels::ExactModels(const ExactAnalysis& analysis, std::optional<double> sigma)
    : analysis_(analysis), sigma_(sigma) {}

std::vector<double> ExactModels::inference(const Trajectory& prefix, StateId sf) {
  std::vector<double> out(static_cast<std::size_t>(analysis_.world->num_actions()));
  for (std::size_t a = 0; a < out.size(); ++a) out[a] = analysis_.posterior_action(prefix, ActionId{static_cast<int>(a)}, sf);
  return out;
}

std::vector<double> ExactModels::posterior(const Trajectory& prefix, ActionId a, StateId sf) {
  std::vector<double> out(static_cast<std::size_t>(analysis_.world->num_states()));
  for (std::size_t s = 0; s < out.size(); ++s) out[s] = analysis_.posterior_trans(prefix, a, StateId{static_cast<int>(s)}, sf);
  return out;
}

std::vector<double> ExactModels::prior(const Trajectory& prefix, ActionId a) {
  std::vector<double> out(static_cast<std::size_t>(analysis_.world->num_states()));
  for (std::size_t s = 0; s < out.size(); ++s) out[s] = analysis_.prior_trans(prefix, a, StateId{static_cast<int>(s)});
  return out;
}

double ExactModels::log_density_posterior(const Trajectory& prefix, ActionId a, std::span<const double> x, StateId sf) {
  if (!sigma_) return ModelSet::log_density_posterior(prefix, a, x, sf);
  return SmoothedDensity(analysis_, *sigma_).log_posterior(prefix, a, x, sf);
}

double ExactModels::log_density_prior(const Trajectory& prefix, ActionId a, std::span<const double> x) {
  if (!sigma_) return ModelSet::log_density_prior(prefix, a, x);
  return SmoothedDensity(analysis_, *sigma_).log_prior(prefix, a, x);
}

PerturbedModels::PerturbedModels(const ExactAnalysis& analysis, std::uint64_t seed, double scale)
    : exact_(analysis), seed_(seed), scale_(scale) {}

std::vector<double> PerturbedModels::perturb(std::vector<double> p, std::uint64_t tag, const PrefixKey& key, int a,
                                             int sf) const {
  std::uint64_t h = mix64(seed_ ^ mix64(tag));
  for (int k : key) h = mix64(h ^ static_cast<std::uint64_t>(k + 1));
  h = mix64(h ^ static_cast<std::uint64_t>(a + 7));
  h = mix64(h ^ static_cast<std::uint64_t>(sf + 13));
  Rng rng(h);
  double sum = 0.0;
  for (auto& v : p) {
    if (v > 0.0) v *= std::exp(scale_ * rng.normal());
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

std::vector<double> PerturbedModels::inference(const Trajectory& prefix, StateId sf) {
  return perturb(exact_.inference(prefix, sf), 1, prefix_key(prefix), -1, sf.index);
}

std::vector<double> PerturbedModels::posterior(const Trajectory& prefix, ActionId a, StateId sf) {
  return perturb(exact_.posterior(prefix, a, sf), 2, prefix_key(prefix), a.index, sf.index);
}

std::vector<double> PerturbedModels::prior(const Trajectory& prefix, ActionId a) {
  return perturb(exact_.prior(prefix, a), 3, prefix_key(prefix), a.index, -1);
}

BundleModels::BundleModels(AgentBundle& bundle, const WorldSpec& world) : bundle_(bundle), world_(world) {
  if (!bundle.inference) throw std::invalid_argument("bundle has no inference head");
}

namespace {
std::vector<double> exp_all(std::vector<double> v) {
  for (auto& x : v) x = std::exp(x);
  return v;
}
}  // namespace

std::vector<double> BundleModels::inference(const Trajectory& prefix, StateId sf) {
  const auto legal = legal_actions(world_, prefix);
  return exp_all(inference_log_probs(*bundle_.inference, world_, prefix, sf, legal));
}

std::vector<double> BundleModels::posterior(const Trajectory& prefix, ActionId a, StateId sf) {
  if (bundle_.algo != Algo::alg1) throw std::invalid_argument("bundle has no softmax transition heads");
  return exp_all(trans_softmax_log_probs(*bundle_.posterior, world_, prefix, a, sf));
}

std::vector<double> BundleModels::prior(const Trajectory& prefix, ActionId a) {
  if (bundle_.algo != Algo::alg1) throw std::invalid_argument("bundle has no softmax transition heads");
  return exp_all(trans_softmax_log_probs(*bundle_.prior, world_, prefix, a, std::nullopt));
}

double BundleModels::log_density_posterior(const Trajectory& prefix, ActionId a, std::span<const double> x,
                                           StateId sf) {
  if (bundle_.algo != Algo::alg2) throw std::invalid_argument("bundle has no GMM heads");
  return gmm_log_density(*bundle_.posterior, world_, prefix, a, x, sf);
}

double BundleModels::log_density_prior(const Trajectory& prefix, ActionId a, std::span<const double> x) {
  if (bundle_.algo != Algo::alg2) throw std::invalid_argument("bundle has no GMM heads");
  return gmm_log_density(*bundle_.prior, world_, prefix, a, x, std::nullopt);
}

VariationalEstimate exact_ive_and_uve(const ExactAnalysis& analysis, ModelSet& models) {
  const WorldSpec& w = *analysis.world;
  VariationalEstimate est;
  for (const auto& o : analysis.options) {
    if (o.prob <= 0.0) continue;
    const StateId sf = o.omega.final_state(w);
    double lq = 0.0, lpi = 0.0, lrq = 0.0, lrp = 0.0;
    Trajectory tau{o.omega.start, {}};
    for (const auto& s : o.omega.steps) {
      const auto ai = static_cast<std::size_t>(s.action.index);
      lq += std::log(models.inference(tau, sf)[ai]);
      lpi += std::log(analysis.policy_prob(tau, s.action));
      if (!w.is_terminate(s.action)) {
        const auto ni = static_cast<std::size_t>(s.next.index);
        lrq += std::log(models.posterior(tau, s.action, sf)[ni]);
        lrp += std::log(models.prior(tau, s.action)[ni]);
      }
      tau.steps.push_back(s);
    }
    const double log_p = std::log(o.prob);
    const double log_psf = std::log(analysis.final_prob(sf));
    est.i_ve += o.prob * (lq + lrq - lpi - lrp);
    est.kl_posterior += o.prob * (log_p - log_psf - lq - lrq);
    est.kl_prior += o.prob * (log_p - lpi - lrp);
  }
  est.u_ve = est.kl_posterior + est.kl_prior;
  return est;
}

SmoothedEstimate exact_smoothed_estimate(const ExactAnalysis& analysis, ModelSet& models) {
  const WorldSpec& w = *analysis.world;
  SmoothedEstimate est;
  double u1 = 0.0;
  for (const auto& o : analysis.options) {
    if (o.prob <= 0.0) continue;
    const StateId sf = o.omega.final_state(w);
    double lq = 0.0, lpi = 0.0, lpost = 0.0, lfq = 0.0, lfp = 0.0;
    Trajectory tau{o.omega.start, {}};
    for (const auto& s : o.omega.steps) {
      lq += std::log(models.inference(tau, sf)[static_cast<std::size_t>(s.action.index)]);
      lpi += std::log(analysis.policy_prob(tau, s.action));
      lpost += std::log(analysis.posterior_action(tau, s.action, sf));
      if (!w.is_terminate(s.action)) {
        const auto x = coord_of(w, s.next);
        lfq += models.log_density_posterior(tau, s.action, x, sf);
        lfp += models.log_density_prior(tau, s.action, x);
      }
      tau.steps.push_back(s);
    }
    est.i_ve_sigma += o.prob * (lq + lfq - lpi - lfp);
    u1 += o.prob * (exact_bias(analysis, o.omega) + lfp - lfq);
    est.u_sigma_2 += o.prob * (lpost - lq);
  }
  est.u_sigma_1 = std::abs(u1);
  return est;
}

SmoothedDensity::SmoothedDensity(const ExactAnalysis& analysis, double sigma) : analysis_(analysis), sigma_(sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("smoothed density: sigma must be positive");
}

std::vector<double> SmoothedDensity::atoms(const Trajectory& prefix, ActionId a, std::optional<StateId> sf) const {
  const WorldSpec& w = *analysis_.world;
  std::vector<double> p(static_cast<std::size_t>(w.num_states()));
  for (std::size_t s = 0; s < p.size(); ++s) {
    const StateId next{static_cast<int>(s)};
    p[s] = sf ? analysis_.posterior_trans(prefix, a, next, *sf) : analysis_.prior_trans(prefix, a, next);
  }
  return p;
}

double SmoothedDensity::mixture(const std::vector<double>& weights, std::span<const double> x) const {
  const WorldSpec& w = *analysis_.world;
  const double log_norm = -0.5 * static_cast<double>(w.dim) * std::log(2.0 * std::numbers::pi * sigma_ * sigma_);
  std::vector<double> terms;
  for (std::size_t s = 0; s < weights.size(); ++s) {
    if (weights[s] <= 0.0) continue;
    terms.push_back(std::log(weights[s]) - 0.5 * sq_dist(w.coords[s], x) / (sigma_ * sigma_));
  }
  return log_norm + log_sum_exp(terms);
}

double SmoothedDensity::log_prior(const Trajectory& prefix, ActionId a, std::span<const double> x) const {
  return mixture(atoms(prefix, a, std::nullopt), x);
}

double SmoothedDensity::log_posterior(const Trajectory& prefix, ActionId a, std::span<const double> x,
                                      StateId sf) const {
  return mixture(atoms(prefix, a, sf), x);
}

double SmoothedDensity::prior(const Trajectory& prefix, ActionId a, std::span<const double> x) const {
  return std::exp(log_prior(prefix, a, x));
}

double SmoothedDensity::posterior(const Trajectory& prefix, ActionId a, std::span<const double> x, StateId sf) const {
  return std::exp(log_posterior(prefix, a, x, sf));
}

std::vector<double> SmoothedDensity::sample(const Trajectory& prefix, ActionId a, std::optional<StateId> sf,
                                            Rng& rng) const {
  const auto p = atoms(prefix, a, sf);
  const auto s = rng.categorical(p);
  std::vector<double> x = coord_of(*analysis_.world, StateId{static_cast<int>(s)});
  for (auto& v : x) v += sigma_ * rng.normal();
  return x;
}

KlEstimate monte_carlo_kl(const SmoothedDensity& exact, RecurrentHead& head, const WorldSpec& world,
                          const Trajectory& prefix, ActionId a, std::optional<StateId> sf, int samples, Rng& rng) {
  if (samples < 2) throw std::invalid_argument("monte_carlo_kl: need at least two samples");
  const GmmMixture model = gmm_mixture(head, world, prefix, a, sf);
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < samples; ++i) {
    const auto x = exact.sample(prefix, a, sf, rng);
    const double lf = sf ? exact.log_posterior(prefix, a, x, *sf) : exact.log_prior(prefix, a, x);
    const double v = lf - model.log_density(x);
    sum += v;
    sum_sq += v * v;
  }
  const double n = samples;
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n), samples};
}

SmoothingBounds smoothing_bound_check(const ExactAnalysis& analysis, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("smoothing_bound_check: sigma must be positive");
  const WorldSpec& w = *analysis.world;
  SmoothingBounds b;
  b.sigma = sigma;
  b.d_min = min_state_distance(w);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  const auto S = static_cast<std::size_t>(w.num_states());

  // Σ_{s''≠s'} q(s'') exp(−‖s''−s'‖²/2σ²), the off-atom mass of the kernel at s'.
  auto leak = [&](const std::vector<double>& q, std::size_t at) {
    double e = 0.0;
    const auto x = coord_of(w, StateId{static_cast<int>(at)});
    for (std::size_t s = 0; s < S; ++s) {
      if (s != at && q[s] > 0.0) e += q[s] * std::exp(-sq_dist(w.coords[s], x) * inv2s2);
    }
    return e;
  };

  b.p_min = std::numeric_limits<double>::infinity();
  b.p_min_f = std::numeric_limits<double>::infinity();
  for (const auto& [key, node] : analysis.prefixes) {
    for (int ai = 0; ai < w.num_moves(); ++ai) {
      if (node.policy[static_cast<std::size_t>(ai)] <= 0.0) continue;
      const ActionId a{ai};
      for (const auto& o : w.table.row(node.prefix.current(), a)) {
        if (o.prob > 0.0) b.p_min = std::min(b.p_min, o.prob);
      }
      for (std::size_t sf = 0; sf < S; ++sf) {
        if (node.finals_after[static_cast<std::size_t>(ai)][sf] <= 0.0) continue;
        for (const auto& o : w.table.row(node.prefix.current(), a)) {
          const double q = analysis.posterior_trans(node.prefix, a, o.next, StateId{static_cast<int>(sf)});
          if (q > 0.0) b.p_min_f = std::min(b.p_min_f, q);
        }
      }
    }
  }

  double diff = 0.0;
  for (const auto& o : analysis.options) {
    const StateId sf = o.omega.final_state(w);
    const int steps = o.omega.env_steps(w);
    b.t_bar += o.prob * steps;
    b.t_max = std::max(b.t_max, steps);
    Trajectory tau{o.omega.start, {}};
    double per = 0.0;
    for (const auto& s : o.omega.steps) {
      if (!w.is_terminate(s.action)) {
        std::vector<double> prior(S), post(S);
        for (std::size_t k = 0; k < S; ++k) {
          prior[k] = analysis.prior_trans(tau, s.action, StateId{static_cast<int>(k)});
          post[k] = analysis.posterior_trans(tau, s.action, StateId{static_cast<int>(k)}, sf);
        }
        const auto at = static_cast<std::size_t>(s.next.index);
        per += std::log1p(leak(prior, at) / prior[at]) - std::log1p(leak(post, at) / post[at]);
      }
      tau.steps.push_back(s);
    }
    diff += o.prob * per;
  }
  if (b.t_max == 0) {
    b.p_min = 1.0;
    b.p_min_f = 1.0;
  }
  const double e = std::exp(-b.d_min * b.d_min * inv2s2);
  b.difference = diff;
  b.upper = b.t_max / b.p_min * e;
  b.lower = -b.t_max / b.p_min_f * e;
  b.upper_mean = b.t_bar / b.p_min * e;
  b.lower_mean = -b.t_bar / b.p_min_f * e;
  b.holds = b.lower <= diff && diff <= b.upper;
  return b;
}

namespace {

void accumulate_score(PolicyGradient& g, const ExactAnalysis& an, const TabularPolicy& policy, const Trajectory& omega,
                      double weight) {
  const WorldSpec& w = *an.world;
  Trajectory tau{omega.start, {}};
  for (const auto& s : omega.steps) {
    const PrefixKey key = prefix_key(tau);
    const auto& pi = an.node(tau).policy;
    auto& row = g[key];
    row.resize(pi.size(), 0.0);
    const auto* logits = policy.find(key);
    for (auto a : legal_actions(w, tau)) {
      const auto ai = static_cast<std::size_t>(a.index);
      if (logits && (*logits)[ai] == neg_inf) continue;
      row[ai] += weight * ((a == s.action ? 1.0 : 0.0) - pi[ai]);
    }
    tau.steps.push_back(s);
  }
}

PolicyGradient zero_gradient(const TabularPolicy& policy) {
  PolicyGradient g;
  for (const auto& [key, logits] : policy.table()) g[key].assign(logits.size(), 0.0);
  return g;
}

}  // namespace

PolicyGradient exact_policy_gradient(const WorldSpec& world, const TabularPolicy& policy_in, StateId start,
                                     double baseline_shift) {
  TabularPolicy policy = policy_in;
  policy.materialize(world, start);
  const ExactAnalysis an = analyze(world, policy, start);
  PolicyGradient g = zero_gradient(policy);
  for (const auto& o : an.options) {
    const double r = -std::log(an.final_prob(o.omega.final_state(world)));
    accumulate_score(g, an, policy, o.omega, o.prob * (r - baseline_shift));
  }
  return g;
}

PolicyGradient finite_difference_policy_grad(const WorldSpec& world, const TabularPolicy& policy_in, StateId start,
                                             double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite differences: h must be positive");
  TabularPolicy policy = policy_in;
  policy.materialize(world, start);
  PolicyGradient g = zero_gradient(policy);
  for (auto& [key, row] : g) {
    auto& logits = policy.table().at(key);
    for (std::size_t a = 0; a < row.size(); ++a) {
      if (!std::isfinite(logits[a])) continue;
      const double keep = logits[a];
      logits[a] = keep + h;
      const double up = analyze(world, policy, start).mutual_information;
      logits[a] = keep - h;
      const double down = analyze(world, policy, start).mutual_information;
      logits[a] = keep;
      row[a] = (up - down) / (2.0 * h);
    }
  }
  return g;
}

Trajectory sample_tabular(const WorldSpec& world, const TabularPolicy& policy, StateId start, Rng& rng) {
  Trajectory tau{start, {}};
  while (true) {
    const auto p = policy.probs(world, tau);
    const ActionId a{static_cast<int>(rng.categorical(p))};
    if (step(world, rng, tau, a).done) return tau;
  }
}

PolicyGradient sampled_policy_gradient(const WorldSpec& world, const TabularPolicy& policy_in, StateId start,
                                       int episodes, Rng& rng) {
  if (episodes < 1) throw std::invalid_argument("sampled gradient: need at least one episode");
  TabularPolicy policy = policy_in;
  policy.materialize(world, start);
  const ExactAnalysis an = analyze(world, policy, start);
  std::vector<Trajectory> batch;
  std::vector<double> rewards;
  for (int i = 0; i < episodes; ++i) {
    Rng r = rng.split(static_cast<std::uint64_t>(i));
    batch.push_back(sample_tabular(world, policy, start, r));
    rewards.push_back(-std::log(an.final_prob(batch.back().final_state(world))));
  }
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= episodes;
  PolicyGradient g = zero_gradient(policy);
  for (int i = 0; i < episodes; ++i) {
    accumulate_score(g, an, policy, batch[static_cast<std::size_t>(i)], (rewards[static_cast<std::size_t>(i)] - mean) / episodes);
  }
  return g;
}

double gradient_max_abs(const PolicyGradient& g) {
  double m = 0.0;
  for (const auto& [key, row] : g) {
    for (double v : row) m = std::max(m, std::abs(v));
  }
  return m;
}

namespace {
template <class F>
void zip_gradients(const PolicyGradient& a, const PolicyGradient& b, F f) {
  if (a.size() != b.size()) throw std::invalid_argument("gradients cover different prefixes");
  for (const auto& [key, row] : a) {
    const auto it = b.find(key);
    if (it == b.end() || it->second.size() != row.size()) throw std::invalid_argument("gradients cover different prefixes");
    for (std::size_t i = 0; i < row.size(); ++i) f(row[i], it->second[i]);
  }
}
}  // namespace

double gradient_relative_error(const PolicyGradient& a, const PolicyGradient& b) {
  double diff = 0.0;
  zip_gradients(a, b, [&](double x, double y) { diff = std::max(diff, std::abs(x - y)); });
  const double scale = gradient_max_abs(b);
  return scale > 0.0 ? diff / scale : diff;
}

double gradient_cosine(const PolicyGradient& a, const PolicyGradient& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  zip_gradients(a, b, [&](double x, double y) {
    dot += x * y;
    na += x * x;
    nb += y * y;
  });
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace empower
