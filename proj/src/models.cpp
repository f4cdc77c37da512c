#include "empower/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "empower/errors.hpp"

namespace empower {

namespace {

constexpr double neg_inf = -std::numeric_limits<double>::infinity();

int vocab_size(HeadKind kind, const WorldSpec& w) {
  const int s = w.num_states();
  const int base = is_transition(kind) ? s + w.num_moves() : s + w.num_actions() + 1;
  return base + (is_conditioned(kind) ? s : 0);
}

int output_size(HeadKind kind, const WorldSpec& w, const ModelConfig& cfg) {
  if (is_gmm(kind)) return cfg.n_gmm * (1 + w.dim);
  if (is_transition(kind)) return w.num_states();
  return w.num_actions();
}

struct Unrolled {
  std::vector<int> order;
  std::vector<int> active;
  std::vector<Var> outputs;
};

/// Runs the head over per-trajectory token sequences (seqs[i][t] = tokens of step t).
Unrolled unroll(Graph& g, RecurrentHead& head, const std::vector<std::vector<std::vector<int>>>& seqs) {
  Unrolled u;
  u.order.resize(seqs.size());
  std::iota(u.order.begin(), u.order.end(), 0);
  std::stable_sort(u.order.begin(), u.order.end(),
                   [&](int a, int b) { return seqs[static_cast<std::size_t>(a)].size() > seqs[static_cast<std::size_t>(b)].size(); });
  if (seqs.empty()) return u;
  const std::size_t steps = seqs[static_cast<std::size_t>(u.order[0])].size();
  if (steps == 0) return u;

  const int h = head.hidden();
  const Var w_x = g.param(head.lstm.w_x);
  const Var w_out = g.param(head.w_out);
  const Var b_out = g.param(head.b_out);
  int rows = 0;
  while (rows < static_cast<int>(u.order.size()) && !seqs[static_cast<std::size_t>(u.order[static_cast<std::size_t>(rows)])].empty()) ++rows;
  LstmState state{g.input(Matrix::Zero(rows, h)), g.input(Matrix::Zero(rows, h))};
  for (std::size_t t = 0; t < steps; ++t) {
    int n = 0;
    while (n < rows && seqs[static_cast<std::size_t>(u.order[static_cast<std::size_t>(n)])].size() > t) ++n;
    if (n < rows) {
      state = {g.slice_rows(state.h, 0, n), g.slice_rows(state.c, 0, n)};
      rows = n;
    }
    const std::size_t slots = seqs[static_cast<std::size_t>(u.order[0])][t].size();
    Var x;
    for (std::size_t j = 0; j < slots; ++j) {
      std::vector<int> ids(static_cast<std::size_t>(n));
      for (int r = 0; r < n; ++r) ids[static_cast<std::size_t>(r)] = seqs[static_cast<std::size_t>(u.order[static_cast<std::size_t>(r)])][t][j];
      const Var part = g.gather_rows(w_x, ids);
      x = j == 0 ? part : g.add(x, part);
    }
    state = lstm_cell_projected(g, x, state, head.lstm);
    u.active.push_back(n);
    u.outputs.push_back(g.add_row(g.matmul(state.h, w_out), b_out));
  }
  return u;
}

void require_kind(const RecurrentHead& head, bool ok, const char* fn) {
  if (!ok) {
    throw std::invalid_argument(std::string(fn) + ": wrong head kind " + head_kind_name(head.kind()));
  }
}

std::optional<StateId> final_if_conditioned(const RecurrentHead& head, const WorldSpec& world, const Trajectory& t) {
  if (!is_conditioned(head.kind())) return std::nullopt;
  return t.final_state(world);
}

Matrix legal_mask(const WorldSpec& world, StateId s, int t) {
  Matrix m = Matrix::Zero(1, world.num_actions());
  for (auto a : legal_actions_at(world, s, t)) m(0, a.index) = 1.0;
  return m;
}

/// Builds the one-trajectory prefix sequence of an action head and returns the last step's logits.
Var prefix_action_logits(Graph& g, RecurrentHead& head, const Trajectory& traj, std::optional<StateId> sf) {
  std::vector<std::vector<std::vector<int>>> seqs(1);
  for (int t = 0; t <= traj.num_steps(); ++t) seqs[0].push_back(head.tokens(traj, t, sf));
  return unroll(g, head, seqs).outputs.back();
}

std::vector<double> masked_action_log_probs(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj,
                                            std::optional<StateId> sf, std::span<const ActionId> legal) {
  if (legal.empty()) throw std::invalid_argument("action log-probs: empty legal set");
  if (traj.terminated(world)) throw std::invalid_argument("action log-probs: trajectory already terminated");
  Graph g;
  const Var logits = prefix_action_logits(g, head, traj, sf);
  Matrix mask = Matrix::Zero(1, world.num_actions());
  for (auto a : legal) mask(0, a.index) = 1.0;
  const Matrix& lp = g.value(g.log_softmax(logits, mask));
  return {lp.data(), lp.data() + lp.size()};
}

/// Sequence for transition heads: steps 0..t of `traj` followed by the queried action.
Var prefix_transition_output(Graph& g, RecurrentHead& head, const WorldSpec& world, const Trajectory& traj, ActionId a,
                             std::optional<StateId> sf) {
  if (world.is_terminate(a)) {
    throw std::invalid_argument("transition models never see TERMINATE");
  }
  if (traj.terminated(world)) throw std::invalid_argument("transition query on a terminated trajectory");
  if (is_conditioned(head.kind()) != sf.has_value()) {
    throw std::invalid_argument("transition query: s_f must be given exactly for conditioned heads");
  }
  Trajectory ext = traj;
  ext.steps.push_back({a, traj.current()});
  std::vector<std::vector<std::vector<int>>> seqs(1);
  for (int t = 0; t < ext.num_steps(); ++t) seqs[0].push_back(head.tokens(ext, t, sf));
  return unroll(g, head, seqs).outputs.back();
}

}  // namespace

const char* head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::policy: return "policy";
    case HeadKind::inference: return "inference";
    case HeadKind::trans_prior: return "trans_prior";
    case HeadKind::trans_posterior: return "trans_posterior";
    case HeadKind::gmm_prior: return "gmm_prior";
    case HeadKind::gmm_posterior: return "gmm_posterior";
  }
  return "?";
}

bool is_conditioned(HeadKind kind) {
  return kind == HeadKind::inference || kind == HeadKind::trans_posterior || kind == HeadKind::gmm_posterior;
}

bool is_transition(HeadKind kind) { return kind != HeadKind::policy && kind != HeadKind::inference; }

bool is_gmm(HeadKind kind) { return kind == HeadKind::gmm_prior || kind == HeadKind::gmm_posterior; }

RecurrentHead::RecurrentHead(HeadKind kind, const WorldSpec& world, const ModelConfig& cfg)
    : lstm(head_kind_name(kind), vocab_size(kind, world), cfg.hidden),
      w_out(std::string(head_kind_name(kind)) + ".w_out", cfg.hidden, output_size(kind, world, cfg)),
      b_out(std::string(head_kind_name(kind)) + ".b_out", 1, output_size(kind, world, cfg)),
      kind_(kind),
      num_states_(world.num_states()),
      num_actions_(world.num_actions()),
      dim_(world.dim),
      n_gmm_(cfg.n_gmm),
      sigma_(cfg.sigma) {
  if (cfg.hidden <= 0) throw ConfigError("hidden size must be positive");
  if (is_gmm(kind) && cfg.n_gmm <= 0) throw ConfigError("n_gmm must be positive");
  if (is_gmm(kind) && !(cfg.sigma > 0.0)) throw ConfigError("sigma must be positive");
}

std::vector<ParamBlock*> RecurrentHead::blocks() { return {&lstm.w_x, &lstm.w_h, &lstm.bias, &w_out, &b_out}; }

std::vector<const ParamBlock*> RecurrentHead::blocks() const {
  return {&lstm.w_x, &lstm.w_h, &lstm.bias, &w_out, &b_out};
}

void RecurrentHead::init(Rng& rng, double std) {
  for (auto* b : blocks()) gaussian_init(*b, rng, std);
}

void RecurrentHead::zero() {
  for (auto* b : blocks()) b->values.setZero();
}

std::vector<int> RecurrentHead::tokens(const Trajectory& traj, int t, std::optional<StateId> sf) const {
  if (is_conditioned(kind_) != sf.has_value()) {
    throw std::invalid_argument("tokens: s_f must be given exactly for conditioned heads");
  }
  const int s = traj.state_at(static_cast<std::size_t>(t)).index;
  std::vector<int> ids;
  int offset = num_states_;
  ids.push_back(s);
  if (is_transition(kind_)) {
    ids.push_back(offset + traj.steps[static_cast<std::size_t>(t)].action.index);
    offset += num_actions_ - 1;
  } else {
    ids.push_back(offset + (t == 0 ? num_actions_ : traj.steps[static_cast<std::size_t>(t) - 1].action.index));
    offset += num_actions_ + 1;
  }
  if (sf) ids.push_back(offset + sf->index);
  return ids;
}

std::vector<double> StepLogProbs::totals(const Graph& g, std::size_t batch, double floor_log) const {
  std::vector<double> out(batch, 0.0);
  for (std::size_t t = 0; t < picked.size(); ++t) {
    const Matrix& v = g.value(picked[t]);
    for (int r = 0; r < active[t]; ++r) {
      out[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] += std::max(v(r, 0), floor_log);
    }
  }
  return out;
}

Var StepLogProbs::weighted(Graph& g, std::span<const double> coef) const {
  Var total = g.input(Matrix::Zero(1, 1));
  for (std::size_t t = 0; t < picked.size(); ++t) {
    Matrix w(active[t], 1);
    for (int r = 0; r < active[t]; ++r) w(r, 0) = coef[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
    total = g.add(total, g.weighted_sum(picked[t], w));
  }
  return total;
}

Var GmmTerms::weighted_smoothed(Graph& g, std::span<const double> coef) const {
  Var total = g.input(Matrix::Zero(1, 1));
  for (std::size_t t = 0; t < smoothed.size(); ++t) {
    const int n = realized.active[t];
    Matrix w(n, n_samples);
    for (int r = 0; r < n; ++r) w.row(r).setConstant(coef[static_cast<std::size_t>(realized.order[static_cast<std::size_t>(r)])]);
    total = g.add(total, g.weighted_sum(smoothed[t], w));
  }
  return total;
}

StepLogProbs action_log_probs(Graph& g, RecurrentHead& head, const WorldSpec& world, std::span<const Trajectory> batch) {
  require_kind(head, !is_transition(head.kind()), "action_log_probs");
  std::vector<std::vector<std::vector<int>>> seqs(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trajectory& tr = batch[i];
    if (!tr.terminated(world)) throw std::invalid_argument("action_log_probs: incomplete trajectory");
    const auto sf = final_if_conditioned(head, world, tr);
    for (int t = 0; t < tr.num_steps(); ++t) seqs[i].push_back(head.tokens(tr, t, sf));
  }
  Unrolled u = unroll(g, head, seqs);
  StepLogProbs out{u.order, u.active, {}, {}};
  for (std::size_t t = 0; t < u.outputs.size(); ++t) {
    const int n = u.active[t];
    Matrix mask(n, world.num_actions());
    std::vector<int> taken(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
      const Trajectory& tr = batch[static_cast<std::size_t>(u.order[static_cast<std::size_t>(r)])];
      mask.row(r) = legal_mask(world, tr.state_at(t), static_cast<int>(t));
      taken[static_cast<std::size_t>(r)] = tr.steps[t].action.index;
    }
    const Var lp = g.log_softmax(u.outputs[t], mask);
    out.log_probs.push_back(lp);
    out.picked.push_back(g.pick(lp, taken));
  }
  return out;
}

StepLogProbs transition_log_probs(Graph& g, RecurrentHead& head, const WorldSpec& world,
                                  std::span<const Trajectory> batch) {
  require_kind(head, is_transition(head.kind()) && !is_gmm(head.kind()), "transition_log_probs");
  std::vector<std::vector<std::vector<int>>> seqs(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trajectory& tr = batch[i];
    if (!tr.terminated(world)) throw std::invalid_argument("transition_log_probs: incomplete trajectory");
    const auto sf = final_if_conditioned(head, world, tr);
    for (int t = 0; t < tr.env_steps(world); ++t) seqs[i].push_back(head.tokens(tr, t, sf));
  }
  Unrolled u = unroll(g, head, seqs);
  StepLogProbs out{u.order, u.active, {}, {}};
  for (std::size_t t = 0; t < u.outputs.size(); ++t) {
    std::vector<int> next(static_cast<std::size_t>(u.active[t]));
    for (int r = 0; r < u.active[t]; ++r) {
      next[static_cast<std::size_t>(r)] = batch[static_cast<std::size_t>(u.order[static_cast<std::size_t>(r)])].steps[t].next.index;
    }
    out.picked.push_back(g.pick(g.log_softmax(u.outputs[t]), next));
  }
  return out;
}

GmmTerms gmm_log_densities(Graph& g, RecurrentHead& head, const WorldSpec& world, std::span<const Trajectory> batch,
                           std::span<const Matrix> noise) {
  require_kind(head, is_gmm(head.kind()), "gmm_log_densities");
  if (!noise.empty() && noise.size() != batch.size()) {
    throw std::invalid_argument("gmm_log_densities: one noise matrix per trajectory required");
  }
  const int d = world.dim;
  const int k = head.n_gmm();
  std::vector<std::vector<std::vector<int>>> seqs(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trajectory& tr = batch[i];
    if (!tr.terminated(world)) throw std::invalid_argument("gmm_log_densities: incomplete trajectory");
    const auto sf = final_if_conditioned(head, world, tr);
    for (int t = 0; t < tr.env_steps(world); ++t) seqs[i].push_back(head.tokens(tr, t, sf));
  }
  Unrolled u = unroll(g, head, seqs);
  GmmTerms out;
  out.realized.order = u.order;
  out.realized.active = u.active;
  out.n_samples = noise.empty() ? 0 : static_cast<int>(noise[0].cols() / d);
  const int m = 1 + out.n_samples;
  for (std::size_t t = 0; t < u.outputs.size(); ++t) {
    const int n = u.active[t];
    Matrix points(n, m * d);
    for (int r = 0; r < n; ++r) {
      const auto idx = static_cast<std::size_t>(u.order[static_cast<std::size_t>(r)]);
      const Trajectory& tr = batch[idx];
      const auto& from = world.coords[static_cast<std::size_t>(tr.state_at(t).index)];
      const auto& to = world.coords[static_cast<std::size_t>(tr.steps[t].next.index)];
      for (int j = 0; j < m; ++j) {
        for (int c = 0; c < d; ++c) {
          const double dx = to[static_cast<std::size_t>(c)] - from[static_cast<std::size_t>(c)];
          points(r, j * d + c) = j == 0 ? dx : dx + noise[idx](static_cast<Eigen::Index>(t), (j - 1) * d + c);
        }
      }
    }
    const Var logits = g.slice_cols(u.outputs[t], 0, k);
    const Var means = g.slice_cols(u.outputs[t], k, static_cast<Eigen::Index>(k) * d);
    const Var dens = g.gmm_logpdf(logits, means, points, d, head.sigma());
    out.realized.picked.push_back(g.slice_cols(dens, 0, 1));
    if (out.n_samples > 0) out.smoothed.push_back(g.slice_cols(dens, 1, out.n_samples));
  }
  return out;
}

std::vector<double> policy_log_probs(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj,
                                     std::span<const ActionId> legal) {
  require_kind(head, head.kind() == HeadKind::policy, "policy_log_probs");
  return masked_action_log_probs(head, world, traj, std::nullopt, legal);
}

std::vector<double> inference_log_probs(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj,
                                        StateId sf, std::span<const ActionId> legal) {
  require_kind(head, head.kind() == HeadKind::inference, "inference_log_probs");
  return masked_action_log_probs(head, world, traj, sf, legal);
}

std::vector<double> trans_softmax_log_probs(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj,
                                            ActionId a, std::optional<StateId> sf) {
  require_kind(head, is_transition(head.kind()) && !is_gmm(head.kind()), "trans_softmax_log_probs");
  Graph g;
  const Matrix& lp = g.value(g.log_softmax(prefix_transition_output(g, head, world, traj, a, sf)));
  return {lp.data(), lp.data() + lp.size()};
}

double trans_softmax_log_prob(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj, ActionId a,
                              StateId next, std::optional<StateId> sf) {
  const auto lp = trans_softmax_log_probs(head, world, traj, a, sf);
  return lp.at(static_cast<std::size_t>(next.index));
}

double gmm_log_density(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj, ActionId a,
                       std::span<const double> x_next, std::optional<StateId> sf) {
  require_kind(head, is_gmm(head.kind()), "gmm_log_density");
  if (static_cast<int>(x_next.size()) != world.dim) throw std::invalid_argument("gmm_log_density: dimension mismatch");
  Graph g;
  const Var out = prefix_transition_output(g, head, world, traj, a, sf);
  const int k = head.n_gmm();
  const auto& from = world.coords[static_cast<std::size_t>(traj.current().index)];
  Matrix point(1, world.dim);
  for (int c = 0; c < world.dim; ++c) point(0, c) = x_next[static_cast<std::size_t>(c)] - from[static_cast<std::size_t>(c)];
  const Var dens = g.gmm_logpdf(g.slice_cols(out, 0, k), g.slice_cols(out, k, static_cast<Eigen::Index>(k) * world.dim),
                                point, world.dim, head.sigma());
  return g.scalar(dens);
}

GmmMixture gmm_mixture(RecurrentHead& head, const WorldSpec& world, const Trajectory& traj, ActionId a,
                       std::optional<StateId> sf) {
  require_kind(head, is_gmm(head.kind()), "gmm_mixture");
  Graph g;
  const Matrix& out = g.value(prefix_transition_output(g, head, world, traj, a, sf));
  const int k = head.n_gmm();
  const int d = world.dim;
  const auto& from = world.coords[static_cast<std::size_t>(traj.current().index)];
  GmmMixture mix;
  mix.sigma = head.sigma();
  const double mx = out.leftCols(k).maxCoeff();
  const double lse = mx + std::log((out.leftCols(k).array() - mx).exp().sum());
  for (int i = 0; i < k; ++i) {
    mix.log_weights.push_back(out(0, i) - lse);
    std::vector<double> mu(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) mu[static_cast<std::size_t>(c)] = from[static_cast<std::size_t>(c)] + out(0, k + i * d + c);
    mix.means.push_back(std::move(mu));
  }
  return mix;
}

double GmmMixture::log_density(std::span<const double> x) const {
  const auto d = static_cast<double>(x.size());
  const double log_norm = -0.5 * d * std::log(2.0 * std::numbers::pi * sigma * sigma);
  double best = neg_inf;
  std::vector<double> terms(log_weights.size());
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) d2 += (x[c] - means[i][c]) * (x[c] - means[i][c]);
    terms[i] = log_weights[i] - 0.5 * d2 / (sigma * sigma);
    best = std::max(best, terms[i]);
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - best);
  return log_norm + best + std::log(s);
}

double Baseline::value(StateId s0) const { return values_.at(static_cast<std::size_t>(s0.index)); }

void Baseline::update(StateId s0, double target, double lr) {
  double& b = values_.at(static_cast<std::size_t>(s0.index));
  b += lr * (target - b);
  if (!std::isfinite(b)) throw NumericError("baseline became non-finite");
}

}  // namespace empower
