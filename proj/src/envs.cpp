#include "empower/envs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace empower {

TransitionTable::TransitionTable(int num_states, int num_moves)
    : num_states_(num_states), num_moves_(num_moves), rows_(static_cast<std::size_t>(num_states * num_moves)) {}

void TransitionTable::set_row(StateId s, ActionId a, std::vector<Outcome> row) {
  if (s.index < 0 || s.index >= num_states_ || a.index < 0 || a.index >= num_moves_) {
    throw std::out_of_range("set_row: state or action out of range");
  }
  rows_[static_cast<std::size_t>(s.index * num_moves_ + a.index)] = std::move(row);
}

bool TransitionTable::has_row(StateId s, ActionId a) const {
  if (a.index < 0 || a.index >= num_moves_) {
    return false;
  }
  return rows_.at(static_cast<std::size_t>(s.index * num_moves_ + a.index)).has_value();
}

const std::vector<Outcome>& TransitionTable::row(StateId s, ActionId a) const {
  if (!has_row(s, a)) {
    throw std::out_of_range("no transition row for (state " + std::to_string(s.index) + ", action " +
                            std::to_string(a.index) + ")");
  }
  return *rows_[static_cast<std::size_t>(s.index * num_moves_ + a.index)];
}

double TransitionTable::prob(StateId s, ActionId a, StateId next) const {
  for (const auto& o : row(s, a)) {
    if (o.next == next) {
      return o.prob;
    }
  }
  return 0.0;
}

RoomKind WorldSpec::room(StateId s) const {
  return rooms.empty() ? RoomKind::none : rooms.at(static_cast<std::size_t>(s.index));
}

bool WorldSpec::has_rooms() const {
  return std::any_of(rooms.begin(), rooms.end(), [](RoomKind k) { return k != RoomKind::none; });
}

std::optional<StateId> WorldSpec::find_state(const std::vector<int>& coord) const {
  for (int i = 0; i < num_states(); ++i) {
    if (coords[static_cast<std::size_t>(i)] == coord) {
      return StateId{i};
    }
  }
  return std::nullopt;
}

std::optional<ActionId> WorldSpec::find_action(std::string_view action_name) const {
  for (int i = 0; i < num_actions(); ++i) {
    if (actions[static_cast<std::size_t>(i)] == action_name) {
      return ActionId{i};
    }
  }
  return std::nullopt;
}

void WorldSpec::validate() const {
  if (coords.empty()) {
    throw std::invalid_argument("world has no states");
  }
  if (actions.empty() || actions.back() != "TERMINATE") {
    throw std::invalid_argument("TERMINATE must be the last action");
  }
  if (t_max < 0) {
    throw std::invalid_argument("t_max must be non-negative");
  }
  for (const auto& c : coords) {
    if (static_cast<int>(c.size()) != dim) {
      throw std::invalid_argument("coordinate dimension mismatch");
    }
  }
  if (min_state_distance(*this) < 1.0) {
    throw std::invalid_argument("state coordinates must be at least distance 1 apart");
  }
  if (table.num_states() != num_states() || table.num_moves() != num_moves()) {
    throw std::invalid_argument("transition table shape mismatch");
  }
  for (int s = 0; s < num_states(); ++s) {
    for (int a = 0; a < num_moves(); ++a) {
      if (!table.has_row(StateId{s}, ActionId{a})) {
        continue;
      }
      double total = 0.0;
      for (const auto& o : table.row(StateId{s}, ActionId{a})) {
        if (o.next.index < 0 || o.next.index >= num_states() || !(o.prob >= 0.0)) {
          throw std::invalid_argument("invalid outcome in transition row");
        }
        total += o.prob;
      }
      if (std::abs(total - 1.0) > 1e-12) {
        throw std::invalid_argument("transition row of state " + std::to_string(s) + " does not sum to 1");
      }
    }
  }
  if (start_states.empty()) {
    throw std::invalid_argument("world has no start state");
  }
  for (auto s : start_states) {
    if (s.index < 0 || s.index >= num_states()) {
      throw std::invalid_argument("start state out of range");
    }
  }
  if (!rooms.empty() && static_cast<int>(rooms.size()) != num_states()) {
    throw std::invalid_argument("room annotations must cover every state");
  }
}

bool Trajectory::terminated(const WorldSpec& world) const {
  return !steps.empty() && world.is_terminate(steps.back().action);
}

int Trajectory::env_steps(const WorldSpec& world) const {
  return terminated(world) ? num_steps() - 1 : num_steps();
}

StateId Trajectory::final_state(const WorldSpec& world) const {
  if (!terminated(world)) {
    throw std::logic_error("final_state of an incomplete trajectory");
  }
  return steps.back().next;
}

void Trajectory::check(const WorldSpec& world) const {
  if (num_steps() > world.t_max + 1) {
    throw std::logic_error("trajectory longer than t_max + 1");
  }
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const bool is_term = world.is_terminate(steps[t].action);
    if (is_term && t + 1 != steps.size()) {
      throw std::logic_error("TERMINATE before the last step");
    }
    if (is_term && steps[t].next != state_at(t)) {
      throw std::logic_error("TERMINATE must leave the state unchanged");
    }
  }
}

namespace {

// Adds probability mass to `next`, merging with an existing outcome.
void add_outcome(std::vector<Outcome>& row, StateId next, double p) {
  if (p <= 0.0) {
    return;
  }
  for (auto& o : row) {
    if (o.next == next) {
      o.prob += p;
      return;
    }
  }
  row.push_back({next, p});
}

void finish_row(std::vector<Outcome>& row) {
  std::sort(row.begin(), row.end(), [](const Outcome& a, const Outcome& b) { return a.next < b.next; });
}

int require_positive(const std::optional<int>& v, int fallback, const char* what) {
  const int x = v.value_or(fallback);
  if (x <= 0) {
    throw std::invalid_argument(std::string("invalid size override: ") + what + " must be positive");
  }
  return x;
}

WorldSpec make_1d(bool stochastic, const WorldOverrides& ov) {
  const int n = require_positive(ov.size, 11, "cells");
  WorldSpec w;
  w.name = stochastic ? "stoch-1d" : "det-1d";
  w.dim = 1;
  for (int i = 0; i < n; ++i) {
    w.coords.push_back({i - n / 2});
  }
  w.actions = {"left", "right", "TERMINATE"};
  w.table = TransitionTable(n, 2);
  auto clamp = [n](int i) { return StateId{std::clamp(i, 0, n - 1)}; };
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < 2; ++a) {
      const int dir = a == 0 ? -1 : 1;
      std::vector<Outcome> row;
      if (stochastic) {
        add_outcome(row, clamp(i + dir), 0.7);
        add_outcome(row, clamp(i - dir), 0.3);
      } else {
        add_outcome(row, clamp(i + dir), 1.0);
      }
      finish_row(row);
      w.table.set_row(StateId{i}, ActionId{a}, std::move(row));
    }
  }
  w.start_states = {StateId{n / 2}};
  w.t_max = ov.t_max.value_or(5);
  return w;
}

WorldSpec make_2d(bool stochastic, const WorldOverrides& ov) {
  const int n = require_positive(ov.size, 5, "side");
  WorldSpec w;
  w.name = stochastic ? "stoch-2d" : "det-2d";
  w.dim = 2;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      w.coords.push_back({x, y});
    }
  }
  w.actions = {"left", "up", "right", "down", "TERMINATE"};
  const int dx[4] = {-1, 0, 1, 0};
  const int dy[4] = {0, -1, 0, 1};
  w.table = TransitionTable(n * n, 4);
  auto target = [&](int x, int y, int dir) {
    const int nx = x + dx[dir];
    const int ny = y + dy[dir];
    if (nx < 0 || ny < 0 || nx >= n || ny >= n) {
      return StateId{y * n + x};
    }
    return StateId{ny * n + nx};
  };
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      for (int a = 0; a < 4; ++a) {
        std::vector<Outcome> row;
        if (stochastic) {
          for (int dir = 0; dir < 4; ++dir) {
            add_outcome(row, target(x, y, dir), dir == a ? 0.7 : 0.1);
          }
        } else {
          add_outcome(row, target(x, y, a), 1.0);
        }
        finish_row(row);
        w.table.set_row(StateId{y * n + x}, ActionId{a}, std::move(row));
      }
    }
  }
  w.start_states = {StateId{(n / 2) * n + n / 2}};
  w.t_max = ov.t_max.value_or(5);
  return w;
}

WorldSpec make_tree(bool stochastic, const WorldOverrides& ov) {
  const int depth = require_positive(ov.size, 4, "depth");
  WorldSpec w;
  w.name = stochastic ? "stoch-tree" : "det-tree";
  w.dim = 2;
  auto node = [](int d, int k) { return StateId{(1 << d) - 1 + k}; };
  for (int d = 0; d <= depth; ++d) {
    for (int k = 0; k < (1 << d); ++k) {
      w.coords.push_back({d, k});
    }
  }
  w.actions = {"left", "right", "TERMINATE"};
  w.table = TransitionTable(w.num_states(), 2);
  for (int d = 0; d < depth; ++d) {
    for (int k = 0; k < (1 << d); ++k) {
      const StateId self = node(d, k);
      const StateId left = node(d + 1, 2 * k);
      const StateId right = node(d + 1, 2 * k + 1);
      std::vector<Outcome> go_left;
      std::vector<Outcome> go_right;
      if (stochastic) {
        add_outcome(go_left, left, 0.8);
        add_outcome(go_left, self, 0.2);
        // The "go right" row sends the agent to the left child most of the time.
        add_outcome(go_right, left, 0.6);
        add_outcome(go_right, right, 0.2);
        add_outcome(go_right, self, 0.2);
      } else {
        add_outcome(go_left, left, 1.0);
        add_outcome(go_right, right, 1.0);
      }
      finish_row(go_left);
      finish_row(go_right);
      w.table.set_row(self, ActionId{0}, std::move(go_left));
      w.table.set_row(self, ActionId{1}, std::move(go_right));
    }
  }
  w.start_states = {node(0, 0)};
  w.t_max = ov.t_max.value_or(4);
  return w;
}

// Builds a grid world from a cell mask; `cell_kind` returns -1 for walls,
// otherwise the RoomKind of a free cell. Moves into walls or borders stay.
template <typename CellKind>
WorldSpec make_grid(int n, const std::vector<std::string>& moves, const std::vector<std::pair<int, int>>& dirs,
                    double success, CellKind cell_kind) {
  WorldSpec w;
  w.dim = 2;
  std::map<std::pair<int, int>, int> index;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const int kind = cell_kind(x, y);
      if (kind < 0) {
        continue;
      }
      index[{x, y}] = static_cast<int>(w.coords.size());
      w.coords.push_back({x, y});
      w.rooms.push_back(static_cast<RoomKind>(kind));
    }
  }
  w.actions = moves;
  w.actions.push_back("TERMINATE");
  const int num_moves = static_cast<int>(moves.size());
  w.table = TransitionTable(w.num_states(), num_moves);
  for (int s = 0; s < w.num_states(); ++s) {
    const int x = w.coords[static_cast<std::size_t>(s)][0];
    const int y = w.coords[static_cast<std::size_t>(s)][1];
    for (int a = 0; a < num_moves; ++a) {
      const auto& [dx, dy] = dirs[static_cast<std::size_t>(a)];
      const auto it = index.find({x + dx, y + dy});
      const StateId dest = it == index.end() ? StateId{s} : StateId{it->second};
      std::vector<Outcome> row;
      add_outcome(row, dest, success);
      add_outcome(row, StateId{s}, 1.0 - success);
      finish_row(row);
      w.table.set_row(StateId{s}, ActionId{a}, std::move(row));
    }
  }
  return w;
}

WorldSpec make_rooms_4(const WorldOverrides& ov) {
  const int n = require_positive(ov.size, 25, "side");
  if (n < 7) {
    throw std::invalid_argument("invalid size override: rooms-4 needs side >= 7");
  }
  const int mid = n / 2;
  const int door_a = mid / 2;
  const int door_b = mid + (n - mid) / 2;
  auto kind = [&](int x, int y) {
    const bool wall_col = x == mid && y != door_a && y != door_b;
    const bool wall_row = y == mid && x != door_a && x != door_b;
    return (wall_col || wall_row) ? -1 : 0;
  };
  WorldSpec w = make_grid(n, {"left", "up", "right", "down"}, {{-1, 0}, {0, -1}, {1, 0}, {0, 1}}, 1.0, kind);
  w.name = "rooms-4";
  w.rooms.clear();
  w.start_states = {*w.find_state({mid / 3, mid / 3}), *w.find_state({mid - 2, mid / 3})};
  w.t_max = ov.t_max.value_or(25);
  return w;
}

// Room columns sit at even x >= 2. Within a room column, rows with y % 3 == 1
// are rooms, y % 3 == 0 are walls and y % 3 == 2 are passages.
WorldSpec make_rooms_35(const WorldOverrides& ov) {
  const int n = require_positive(ov.size, 15, "side");
  if (n < 5) {
    throw std::invalid_argument("invalid size override: rooms-35 needs side >= 5");
  }
  const int special_x = (n - 1) % 2 == 0 ? n - 1 : n - 2;
  int special_y = 1;
  for (int y = 1; y < n; y += 3) {
    if (std::abs(y - n / 2) < std::abs(special_y - n / 2)) {
      special_y = y;
    }
  }
  auto kind = [&](int x, int y) {
    if (x < 2 || x % 2 != 0) {
      return 0;
    }
    switch (y % 3) {
      case 1:
        return (x == special_x && y == special_y) ? static_cast<int>(RoomKind::special)
                                                  : static_cast<int>(RoomKind::normal);
      case 0:
        return -1;
      default:
        return 0;
    }
  };
  WorldSpec w = make_grid(n, {"up", "down", "right"}, {{0, -1}, {0, 1}, {1, 0}}, 0.7, kind);
  w.name = "rooms-35";
  w.start_states = {*w.find_state({0, n / 2 - 1})};
  w.t_max = ov.t_max.value_or(25);
  // Movement only until a room is entered or t_max is reached.
  w.early_terminate = false;
  w.step_penalty = -0.1;
  w.normal_bonus = 1.0;
  w.special_bonus = 100.0;
  return w;
}

}  // namespace

std::vector<std::string> world_names() {
  return {"det-1d", "stoch-1d", "det-2d", "stoch-2d", "det-tree", "stoch-tree", "rooms-4", "rooms-35"};
}

WorldSpec make_world(std::string_view name, const WorldOverrides& overrides) {
  if (overrides.t_max && *overrides.t_max < 0) {
    throw std::invalid_argument("invalid t_max override: must be non-negative");
  }
  WorldSpec w;
  if (name == "det-1d" || name == "stoch-1d") {
    w = make_1d(name == "stoch-1d", overrides);
  } else if (name == "det-2d" || name == "stoch-2d") {
    w = make_2d(name == "stoch-2d", overrides);
  } else if (name == "det-tree" || name == "stoch-tree") {
    w = make_tree(name == "stoch-tree", overrides);
  } else if (name == "rooms-4") {
    w = make_rooms_4(overrides);
  } else if (name == "rooms-35") {
    w = make_rooms_35(overrides);
  } else {
    throw std::invalid_argument("unknown world: " + std::string(name));
  }
  w.validate();
  return w;
}

std::vector<ActionId> legal_actions(const WorldSpec& world, const Trajectory& traj) {
  if (traj.terminated(world)) {
    throw std::logic_error("legal_actions: trajectory already terminated");
  }
  return legal_actions_at(world, traj.current(), traj.num_steps());
}

std::vector<ActionId> legal_actions_at(const WorldSpec& world, StateId s, int steps_taken) {
  if (steps_taken >= world.t_max || world.room(s) != RoomKind::none) {
    return {world.terminate()};
  }
  std::vector<ActionId> legal;
  for (int a = 0; a < world.num_moves(); ++a) {
    if (world.table.has_row(s, ActionId{a})) {
      legal.push_back(ActionId{a});
    }
  }
  if (world.early_terminate || legal.empty()) {
    legal.push_back(world.terminate());
  }
  return legal;
}

StepResult step(const WorldSpec& world, Rng& rng, Trajectory& traj, ActionId action) {
  const auto legal = legal_actions(world, traj);
  if (std::find(legal.begin(), legal.end(), action) == legal.end()) {
    throw std::invalid_argument("illegal action " + std::to_string(action.index));
  }
  const StateId s = traj.current();
  if (world.is_terminate(action)) {
    traj.steps.push_back({action, s});
    return {s, true};
  }
  const auto& row = world.table.row(s, action);
  std::vector<double> probs;
  probs.reserve(row.size());
  for (const auto& o : row) {
    probs.push_back(o.prob);
  }
  const StateId next = row[rng.categorical(probs)].next;
  traj.steps.push_back({action, next});
  return {next, false};
}

double external_reward(const WorldSpec& world, const Trajectory& omega) {
  if (!omega.terminated(world)) {
    throw std::invalid_argument("external_reward: incomplete trajectory");
  }
  if (!world.has_rooms()) {
    return 0.0;
  }
  double r = world.step_penalty * omega.env_steps(world);
  switch (world.room(omega.final_state(world))) {
    case RoomKind::normal:
      r += world.normal_bonus;
      break;
    case RoomKind::special:
      r += world.special_bonus;
      break;
    case RoomKind::none:
      break;
  }
  return r;
}

std::vector<StateId> reachable_final_states(const WorldSpec& world, StateId start) {
  if (start.index < 0 || start.index >= world.num_states()) {
    throw std::invalid_argument("reachable_final_states: invalid start");
  }
  // Layer t holds the states that can be occupied after t steps; a state is a
  // possible final when TERMINATE is legal there at that step.
  const auto n = static_cast<std::size_t>(world.num_states());
  std::vector<char> final(n, 0);
  std::vector<char> layer(n, 0);
  layer[static_cast<std::size_t>(start.index)] = 1;
  for (int t = 0; t <= world.t_max; ++t) {
    std::vector<char> next(n, 0);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!layer[i]) {
        continue;
      }
      const StateId s{static_cast<int>(i)};
      for (auto a : legal_actions_at(world, s, t)) {
        if (world.is_terminate(a)) {
          final[i] = 1;
          continue;
        }
        for (const auto& o : world.table.row(s, a)) {
          if (o.prob > 0.0) {
            next[static_cast<std::size_t>(o.next.index)] = 1;
            any = true;
          }
        }
      }
    }
    if (!any) {
      break;
    }
    layer = std::move(next);
  }
  std::vector<StateId> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (final[i]) {
      out.push_back(StateId{static_cast<int>(i)});
    }
  }
  return out;
}

double min_state_distance(const WorldSpec& world) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < world.coords.size(); ++i) {
    for (std::size_t j = i + 1; j < world.coords.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < world.coords[i].size(); ++k) {
        const double diff = world.coords[i][k] - world.coords[j][k];
        d2 += diff * diff;
      }
      best = std::min(best, std::sqrt(d2));
    }
  }
  return best;
}

}  // namespace empower
