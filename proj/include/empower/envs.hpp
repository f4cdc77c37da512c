#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "empower/rng.hpp"

namespace empower {

struct StateId {
  int index = 0;
  friend auto operator<=>(const StateId&, const StateId&) = default;
};

struct ActionId {
  int index = 0;
  friend auto operator<=>(const ActionId&, const ActionId&) = default;
};

struct Outcome {
  StateId next;
  double prob = 0.0;
};

/// Categorical rows p(s' | s, a) for every (state, movement action) pair.
/// A missing row means the action is unavailable in that state (tree leaves).
/// TERMINATE never has a row.
class TransitionTable {
 public:
  TransitionTable() = default;
  TransitionTable(int num_states, int num_moves);

  void set_row(StateId s, ActionId a, std::vector<Outcome> row);
  bool has_row(StateId s, ActionId a) const;
  const std::vector<Outcome>& row(StateId s, ActionId a) const;
  /// p(s'|s,a), 0 when s' is outside the row.
  double prob(StateId s, ActionId a, StateId next) const;

  int num_states() const { return num_states_; }
  int num_moves() const { return num_moves_; }

 private:
  int num_states_ = 0;
  int num_moves_ = 0;
  std::vector<std::optional<std::vector<Outcome>>> rows_;
};

enum class RoomKind : std::uint8_t { none, normal, special };

/// A finite MDP with a distinguished TERMINATE action (always the last action id).
struct WorldSpec {
  std::string name;
  int dim = 1;
  std::vector<std::vector<int>> coords;
  /// Movement action names followed by "TERMINATE".
  std::vector<std::string> actions;
  TransitionTable table;
  std::vector<StateId> start_states;
  int t_max = 1;
  /// When false, TERMINATE is legal only in a room or once t_max steps are taken.
  bool early_terminate = true;
  std::vector<RoomKind> rooms;  // empty, or one entry per state
  double step_penalty = 0.0;
  double normal_bonus = 0.0;
  double special_bonus = 0.0;

  int num_states() const { return static_cast<int>(coords.size()); }
  int num_actions() const { return static_cast<int>(actions.size()); }
  int num_moves() const { return num_actions() - 1; }
  ActionId terminate() const { return ActionId{num_actions() - 1}; }
  bool is_terminate(ActionId a) const { return a.index == num_actions() - 1; }
  RoomKind room(StateId s) const;
  bool has_rooms() const;
  std::optional<StateId> find_state(const std::vector<int>& coord) const;
  std::optional<ActionId> find_action(std::string_view name) const;
  const std::string& action_name(ActionId a) const { return actions.at(a.index); }

  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
};

struct Step {
  ActionId action;
  StateId next;
  friend bool operator==(const Step&, const Step&) = default;
};

/// τ_t = (s_0, a_0, ..., s_t). A trajectory whose last action is TERMINATE is a
/// complete option.
struct Trajectory {
  StateId start;
  std::vector<Step> steps;

  StateId current() const { return steps.empty() ? start : steps.back().next; }
  StateId state_at(std::size_t t) const { return t == 0 ? start : steps[t - 1].next; }
  int num_steps() const { return static_cast<int>(steps.size()); }
  bool terminated(const WorldSpec& world) const;
  /// Number of environment transitions (the TERMINATE step excluded).
  int env_steps(const WorldSpec& world) const;
  /// Final state of a complete trajectory.
  StateId final_state(const WorldSpec& world) const;
  /// Checks the structural invariants against a world; throws on violation.
  void check(const WorldSpec& world) const;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct WorldOverrides {
  /// Cells for 1D, side length for 2D and room worlds, depth for trees.
  std::optional<int> size;
  std::optional<int> t_max;
};

/// det-1d, stoch-1d, det-2d, stoch-2d, det-tree, stoch-tree, rooms-4, rooms-35.
WorldSpec make_world(std::string_view name, const WorldOverrides& overrides = {});
std::vector<std::string> world_names();

std::vector<ActionId> legal_actions(const WorldSpec& world, const Trajectory& traj);
/// Same rule for a state reached after `steps_taken` steps of a live trajectory.
std::vector<ActionId> legal_actions_at(const WorldSpec& world, StateId s, int steps_taken);

struct StepResult {
  StateId next;
  bool done = false;
};

/// Applies `action` to `traj` (appending the step) and returns the new state.
StepResult step(const WorldSpec& world, Rng& rng, Trajectory& traj, ActionId action);

/// step penalty per environment step plus the bonus of the final room; 0 without rooms.
double external_reward(const WorldSpec& world, const Trajectory& omega);

/// States reachable with positive probability within t_max steps, sorted by index.
std::vector<StateId> reachable_final_states(const WorldSpec& world, StateId start);

/// Minimum Euclidean distance between two distinct state coordinates.
double min_state_distance(const WorldSpec& world);

/// Flat text form: header directives followed by `state action -> state:prob,...` rows.
std::string world_to_text(const WorldSpec& world);
WorldSpec parse_world(std::string_view text);
WorldSpec load_world_file(const std::string& path);

}  // namespace empower
