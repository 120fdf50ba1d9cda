#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfdt/errors.hpp"
#include "cfdt/rng.hpp"

// Deterministic obstacle gridworld. The border ring is an implicit wall; the
// obstacle set lives on interior cells and is the only structural feature
// that interventions resample. Start and goal are pinned to the top-left /
// bottom-right interior corners.

namespace cfdt {

using Json = nlohmann::ordered_json;

enum class Action : int { TurnLeft = 0, TurnRight = 1, Forward = 2 };
constexpr int kActionCount = 3;

enum class Heading : int { East = 0, South = 1, West = 2, North = 3 };
constexpr int kHeadingCount = 4;

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
  friend auto operator<=>(const Cell& a, const Cell& b) {
    if (auto c = a.y <=> b.y; c != 0) return c;
    return a.x <=> b.x;
  }
};

inline const char* heading_name(Heading h) {
  switch (h) {
    case Heading::East: return "east";
    case Heading::South: return "south";
    case Heading::West: return "west";
    case Heading::North: return "north";
  }
  throw UsageError("invalid heading");
}

inline Heading heading_from_name(const std::string& s) {
  if (s == "east") return Heading::East;
  if (s == "south") return Heading::South;
  if (s == "west") return Heading::West;
  if (s == "north") return Heading::North;
  throw DataError("unknown heading: " + s);
}

inline const char* action_name(Action a) {
  switch (a) {
    case Action::TurnLeft: return "turn_left";
    case Action::TurnRight: return "turn_right";
    case Action::Forward: return "forward";
  }
  throw UsageError("invalid action");
}

inline Action action_from_name(const std::string& s) {
  if (s == "turn_left") return Action::TurnLeft;
  if (s == "turn_right") return Action::TurnRight;
  if (s == "forward") return Action::Forward;
  throw DataError("unknown action: " + s);
}

// Forward displacement per heading, indexed by Heading value.
inline Cell heading_delta(Heading h) {
  static constexpr int dx[4] = {1, 0, -1, 0};
  static constexpr int dy[4] = {0, 1, 0, -1};
  const int i = static_cast<int>(h);
  return {dx[i], dy[i]};
}

struct GridLayout {
  int width = 0;
  int height = 0;
  std::vector<Cell> obstacles;  // interior cells, kept sorted
  Cell start;
  Heading start_heading = Heading::East;
  Cell goal;
  uint64_t layout_seed = 0;

  bool in_bounds(Cell c) const {
    return c.x >= 0 && c.x < width && c.y >= 0 && c.y < height;
  }
  bool is_border(Cell c) const {
    return c.x == 0 || c.y == 0 || c.x == width - 1 || c.y == height - 1;
  }
  bool is_obstacle(Cell c) const {
    return std::binary_search(obstacles.begin(), obstacles.end(), c);
  }
  // A cell the agent can never occupy: outside, border wall or obstacle.
  bool blocked(Cell c) const {
    return !in_bounds(c) || is_border(c) || is_obstacle(c);
  }

  friend bool operator==(const GridLayout&, const GridLayout&) = default;
};

// Content hash over geometry (dims, start, goal, sorted obstacles). The seed
// is deliberately excluded: two draws that produce the same obstacle set are
// the same configuration and must collide.
inline uint64_t layout_hash(const GridLayout& g) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  mix(static_cast<uint64_t>(g.width));
  mix(static_cast<uint64_t>(g.height));
  mix(static_cast<uint64_t>(g.start.x));
  mix(static_cast<uint64_t>(g.start.y));
  mix(static_cast<uint64_t>(g.start_heading));
  mix(static_cast<uint64_t>(g.goal.x));
  mix(static_cast<uint64_t>(g.goal.y));
  for (const Cell& c : g.obstacles) {
    mix(static_cast<uint64_t>(c.x));
    mix(static_cast<uint64_t>(c.y));
  }
  return h;
}

inline std::string layout_id_hex(uint64_t id) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(id));
  return buf;
}

inline uint64_t layout_id_from_hex(const std::string& s) {
  return std::stoull(s, nullptr, 16);
}

// BFS over non-blocked cells, 4-connectivity.
inline bool path_exists(const GridLayout& g, Cell from, Cell to) {
  if (g.blocked(from) || g.blocked(to)) return false;
  std::vector<uint8_t> seen(static_cast<size_t>(g.width) * g.height, 0);
  auto idx = [&g](Cell c) { return static_cast<size_t>(c.y) * g.width + c.x; };
  std::queue<Cell> q;
  q.push(from);
  seen[idx(from)] = 1;
  while (!q.empty()) {
    const Cell c = q.front();
    q.pop();
    if (c == to) return true;
    for (int h = 0; h < kHeadingCount; ++h) {
      const Cell d = heading_delta(static_cast<Heading>(h));
      const Cell n{c.x + d.x, c.y + d.y};
      if (!g.blocked(n) && !seen[idx(n)]) {
        seen[idx(n)] = 1;
        q.push(n);
      }
    }
  }
  return false;
}

// Draws a layout with exactly n_obstacles interior obstacles, rejection
// sampling until start and goal are connected. Deterministic in
// (seed, width, height, n_obstacles).
inline GridLayout generate_layout(uint64_t seed, int width, int height, int n_obstacles) {
  if (width < 3 || height < 3) throw ConfigError("generate_layout: grid must be at least 3x3");
  if (n_obstacles < 0) throw ConfigError("generate_layout: negative obstacle count");
  const int interior = (width - 2) * (height - 2);
  if (interior < n_obstacles + 2) {
    throw ConfigError("generate_layout: interior too small for obstacle count");
  }

  GridLayout g;
  g.width = width;
  g.height = height;
  g.start = {1, 1};
  g.start_heading = Heading::East;
  g.goal = {width - 2, height - 2};
  g.layout_seed = seed;

  std::vector<Cell> candidates;
  candidates.reserve(static_cast<size_t>(interior) - 2);
  for (int y = 1; y < height - 1; ++y) {
    for (int x = 1; x < width - 1; ++x) {
      const Cell c{x, y};
      if (c == g.start || c == g.goal) continue;
      candidates.push_back(c);
    }
  }

  Rng rng(seed);
  constexpr int kMaxAttempts = 10000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    // Partial Fisher-Yates: the first n_obstacles entries are the draw.
    std::vector<Cell> pool = candidates;
    for (int i = 0; i < n_obstacles; ++i) {
      const int j = i + rng.below(static_cast<int>(pool.size()) - i);
      std::swap(pool[i], pool[j]);
    }
    g.obstacles.assign(pool.begin(), pool.begin() + n_obstacles);
    std::sort(g.obstacles.begin(), g.obstacles.end());
    if (path_exists(g, g.start, g.goal)) return g;
  }
  throw GenerationError("generate_layout: no reachable configuration after 10000 resamples");
}

// Causal intervention on the obstacle feature: resample obstacles from the
// counterfactual seed stream while keeping dims, start and goal fixed.
inline GridLayout intervene(const GridLayout& base, uint64_t cf_seed, int n_obstacles) {
  return generate_layout(cf_seed, base.width, base.height, n_obstacles);
}

struct RewardSpec {
  int horizon = 100;
  double success_scale = 0.9;
  double failure_reward = -1.0;
  double discount = 1.0;  // carried for completeness; returns-to-go are undiscounted

  void validate() const {
    if (horizon <= 0) throw ConfigError("RewardSpec: horizon must be positive");
    if (success_scale < 0.0 || success_scale > 1.0) {
      throw ConfigError("RewardSpec: success_scale must be in [0, 1]");
    }
  }
};

struct EnvState {
  const GridLayout* layout = nullptr;
  Cell pos;
  Heading heading = Heading::East;
  int step_count = 0;
};

inline EnvState reset(const GridLayout& layout) {
  return EnvState{&layout, layout.start, layout.start_heading, 0};
}

inline bool is_terminal(const EnvState& s, const RewardSpec& spec) {
  return s.pos == s.layout->goal || s.step_count >= spec.horizon;
}

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
  bool bumped = false;
};

// Deterministic dynamics. Forward into a wall keeps the position and flags
// bumped. The step that lands on the goal pays 1 - success_scale * (t / T);
// hitting the horizon off-goal pays failure_reward; all other steps pay 0.
inline StepResult step(const EnvState& state, Action action, const RewardSpec& spec) {
  if (is_terminal(state, spec)) throw UsageError("step: state is terminal");

  StepResult out;
  out.state = state;
  switch (action) {
    case Action::TurnLeft:
      out.state.heading = static_cast<Heading>((static_cast<int>(state.heading) + 3) % 4);
      break;
    case Action::TurnRight:
      out.state.heading = static_cast<Heading>((static_cast<int>(state.heading) + 1) % 4);
      break;
    case Action::Forward: {
      const Cell d = heading_delta(state.heading);
      const Cell target{state.pos.x + d.x, state.pos.y + d.y};
      if (state.layout->blocked(target)) {
        out.bumped = true;
      } else {
        out.state.pos = target;
      }
      break;
    }
  }
  out.state.step_count = state.step_count + 1;

  if (out.state.pos == state.layout->goal) {
    out.done = true;
    out.reward = 1.0 - spec.success_scale *
                           (static_cast<double>(out.state.step_count) / spec.horizon);
  } else if (out.state.step_count >= spec.horizon) {
    out.done = true;
    out.reward = spec.failure_reward;
  }
  return out;
}

// Observation: per cell a one-hot over {empty, obstacle, goal, agent} in
// row-major cell order, then a one-hot heading block. Border walls read as
// obstacle. Fully observable.
constexpr int kObsChannels = 4;

inline int observation_dim(int width, int height) {
  return width * height * kObsChannels + kHeadingCount;
}

inline void write_observation(const GridLayout& g, Cell agent_pos, Heading heading,
                              float* out) {
  const int n = observation_dim(g.width, g.height);
  std::fill(out, out + n, 0.0f);
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const Cell c{x, y};
      int ch = 0;  // empty
      if (c == agent_pos) {
        ch = 3;
      } else if (c == g.goal) {
        ch = 2;
      } else if (g.is_border(c) || g.is_obstacle(c)) {
        ch = 1;
      }
      out[(y * g.width + x) * kObsChannels + ch] = 1.0f;
    }
  }
  out[g.width * g.height * kObsChannels + static_cast<int>(heading)] = 1.0f;
}

inline std::vector<float> make_observation(const GridLayout& g, Cell agent_pos,
                                           Heading heading) {
  std::vector<float> obs(observation_dim(g.width, g.height));
  write_observation(g, agent_pos, heading, obs.data());
  return obs;
}

inline std::vector<float> observe(const EnvState& s) {
  return make_observation(*s.layout, s.pos, s.heading);
}

// --- serialization ---------------------------------------------------------

inline Json layout_to_json(const GridLayout& g) {
  Json obstacles = Json::array();
  for (const Cell& c : g.obstacles) obstacles.push_back({c.x, c.y});
  Json j;
  j["width"] = g.width;
  j["height"] = g.height;
  j["obstacles"] = std::move(obstacles);
  j["start"] = {{"x", g.start.x}, {"y", g.start.y}, {"heading", heading_name(g.start_heading)}};
  j["goal"] = {{"x", g.goal.x}, {"y", g.goal.y}};
  j["layout_seed"] = g.layout_seed;
  return j;
}

inline GridLayout layout_from_json(const Json& j) {
  GridLayout g;
  g.width = j.at("width").get<int>();
  g.height = j.at("height").get<int>();
  for (const auto& o : j.at("obstacles")) {
    g.obstacles.push_back({o.at(0).get<int>(), o.at(1).get<int>()});
  }
  std::sort(g.obstacles.begin(), g.obstacles.end());
  g.start = {j.at("start").at("x").get<int>(), j.at("start").at("y").get<int>()};
  g.start_heading = heading_from_name(j.at("start").at("heading").get<std::string>());
  g.goal = {j.at("goal").at("x").get<int>(), j.at("goal").at("y").get<int>()};
  g.layout_seed = j.at("layout_seed").get<uint64_t>();
  return g;
}

}  // namespace cfdt
