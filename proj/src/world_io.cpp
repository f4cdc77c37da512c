#include <cstdio>
#include <fstream>
#include <sstream>

#include "empower/envs.hpp"
#include "empower/errors.hpp"

namespace empower {

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* room_name(RoomKind k) {
  switch (k) {
    case RoomKind::normal:
      return "normal";
    case RoomKind::special:
      return "special";
    case RoomKind::none:
      break;
  }
  return "none";
}

}  // namespace

std::string world_to_text(const WorldSpec& world) {
  std::ostringstream out;
  out << "world " << world.name << "\n";
  out << "dim " << world.dim << "\n";
  out << "tmax " << world.t_max << "\n";
  if (!world.early_terminate) {
    out << "early_terminate 0\n";
  }
  out << "actions";
  for (int a = 0; a < world.num_moves(); ++a) {
    out << ' ' << world.actions[static_cast<std::size_t>(a)];
  }
  out << "\n";
  if (world.has_rooms()) {
    out << "rewards " << format_double(world.step_penalty) << ' ' << format_double(world.normal_bonus) << ' '
        << format_double(world.special_bonus) << "\n";
  }
  for (int s = 0; s < world.num_states(); ++s) {
    out << "state " << s;
    for (int c : world.coords[static_cast<std::size_t>(s)]) {
      out << ' ' << c;
    }
    if (world.room(StateId{s}) != RoomKind::none) {
      out << " room " << room_name(world.room(StateId{s}));
    }
    out << "\n";
  }
  for (auto s : world.start_states) {
    out << "start " << s.index << "\n";
  }
  for (int s = 0; s < world.num_states(); ++s) {
    for (int a = 0; a < world.num_moves(); ++a) {
      if (!world.table.has_row(StateId{s}, ActionId{a})) {
        continue;
      }
      out << s << ' ' << world.actions[static_cast<std::size_t>(a)] << " ->";
      const auto& row = world.table.row(StateId{s}, ActionId{a});
      for (std::size_t i = 0; i < row.size(); ++i) {
        out << (i == 0 ? " " : ",") << row[i].next.index << ':' << format_double(row[i].prob);
      }
      out << "\n";
    }
  }
  return out.str();
}

WorldSpec parse_world(std::string_view text) {
  WorldSpec w;
  w.name = "custom";
  std::vector<std::vector<int>> coords;
  std::vector<RoomKind> rooms;
  struct RowLine {
    int state;
    std::string action;
    std::vector<Outcome> outcomes;
    int line;
  };
  std::vector<RowLine> row_lines;
  bool have_actions = false;

  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) {
      raw.erase(hash);
    }
    std::istringstream ls(raw);
    std::string head;
    if (!(ls >> head)) {
      continue;
    }
    auto fail = [&](const std::string& msg) { throw ParseError(msg, line_no); };
    if (head == "world") {
      if (!(ls >> w.name)) fail("expected world name");
    } else if (head == "dim") {
      if (!(ls >> w.dim) || w.dim <= 0) fail("expected positive dimension");
    } else if (head == "tmax") {
      if (!(ls >> w.t_max) || w.t_max < 0) fail("expected non-negative tmax");
    } else if (head == "early_terminate") {
      int flag = -1;
      if (!(ls >> flag) || (flag != 0 && flag != 1)) fail("expected early_terminate 0 or 1");
      w.early_terminate = flag == 1;
    } else if (head == "actions") {
      std::string name;
      while (ls >> name) {
        if (name == "TERMINATE") fail("TERMINATE is implicit and must not be listed");
        w.actions.push_back(name);
      }
      w.actions.push_back("TERMINATE");
      have_actions = true;
    } else if (head == "rewards") {
      if (!(ls >> w.step_penalty >> w.normal_bonus >> w.special_bonus)) fail("expected three reward constants");
    } else if (head == "state") {
      int idx = 0;
      if (!(ls >> idx) || idx != static_cast<int>(coords.size())) fail("states must be listed in index order");
      std::vector<int> c(static_cast<std::size_t>(w.dim));
      for (auto& v : c) {
        if (!(ls >> v)) fail("state needs " + std::to_string(w.dim) + " coordinates");
      }
      RoomKind kind = RoomKind::none;
      std::string tag;
      if (ls >> tag) {
        std::string kind_name;
        if (tag != "room" || !(ls >> kind_name)) fail("expected 'room normal|special'");
        if (kind_name == "normal") {
          kind = RoomKind::normal;
        } else if (kind_name == "special") {
          kind = RoomKind::special;
        } else {
          fail("unknown room kind " + kind_name);
        }
      }
      coords.push_back(std::move(c));
      rooms.push_back(kind);
    } else if (head == "start") {
      int idx = 0;
      if (!(ls >> idx)) fail("expected start state index");
      w.start_states.push_back(StateId{idx});
    } else {
      RowLine row{0, {}, {}, line_no};
      try {
        row.state = std::stoi(head);
      } catch (const std::exception&) {
        fail("unknown directive '" + head + "'");
      }
      std::string arrow;
      if (!(ls >> row.action >> arrow) || arrow != "->") fail("expected 'state action -> state:prob,...'");
      std::string rest;
      std::getline(ls, rest);
      std::istringstream items(rest);
      std::string item;
      while (std::getline(items, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) fail("expected state:prob");
        try {
          row.outcomes.push_back({StateId{std::stoi(item.substr(0, colon))}, std::stod(item.substr(colon + 1))});
        } catch (const std::exception&) {
          fail("bad outcome '" + item + "'");
        }
      }
      if (row.outcomes.empty()) fail("empty transition row");
      row_lines.push_back(std::move(row));
    }
  }
  if (!have_actions) {
    throw ParseError("missing 'actions' directive", line_no);
  }
  w.coords = std::move(coords);
  bool any_room = false;
  for (auto k : rooms) {
    any_room = any_room || k != RoomKind::none;
  }
  if (any_room) {
    w.rooms = std::move(rooms);
  }
  w.table = TransitionTable(w.num_states(), w.num_moves());
  for (auto& r : row_lines) {
    const auto a = w.find_action(r.action);
    if (!a || w.is_terminate(*a)) {
      throw ParseError("unknown action '" + r.action + "'", r.line);
    }
    if (r.state < 0 || r.state >= w.num_states()) {
      throw ParseError("state out of range", r.line);
    }
    w.table.set_row(StateId{r.state}, *a, std::move(r.outcomes));
  }
  try {
    w.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(e.what(), line_no);
  }
  return w;
}

WorldSpec load_world_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open world file " + path);
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_world(buf.str());
}

}  // namespace empower
