#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cfdt/grid.hpp"
#include "cfdt/rng.hpp"

// Source policy: exact value iteration on the pose MDP (cell x heading) of
// one layout. Stands in for a trained demonstrator; the rest of the pipeline
// only sees it through act()/failsafe_act().

namespace cfdt {

inline int pose_index(const GridLayout& g, Cell c, Heading h) {
  return (c.y * g.width + c.x) * kHeadingCount + static_cast<int>(h);
}

// Immutable after solve; safe to share read-only across rollouts. The table
// is keyed by pose only, so it can be queried on counterfactual layouts with
// the same dimensions (that mismatch is exactly how transfer failure arises).
struct PolicyTable {
  GridLayout layout;
  std::vector<Action> action_of;  // indexed by pose_index
  std::vector<double> values;
};

namespace detail {

// One-step lookahead in the shaped pose MDP. Reaching the goal from a fresh
// start at step t yields 1 - s*t/T, which decomposes into a -s/T cost per
// step plus +1 on goal entry; that makes the stationary problem exact.
struct PoseTransition {
  int next_pose;
  bool enters_goal;
};

inline PoseTransition pose_step(const GridLayout& g, Cell c, Heading h, Action a) {
  Cell pos = c;
  Heading heading = h;
  switch (a) {
    case Action::TurnLeft:
      heading = static_cast<Heading>((static_cast<int>(h) + 3) % 4);
      break;
    case Action::TurnRight:
      heading = static_cast<Heading>((static_cast<int>(h) + 1) % 4);
      break;
    case Action::Forward: {
      const Cell d = heading_delta(h);
      const Cell target{c.x + d.x, c.y + d.y};
      if (!g.blocked(target)) pos = target;
      break;
    }
  }
  return {pose_index(g, pos, heading), pos == g.goal};
}

}  // namespace detail

// Exact value iteration until the max value change drops below 1e-12. Poses
// that cannot reach the goal sit on a give-up floor at failure_reward, which
// is what the environment pays them at the horizon. Greedy tie-break order is
// TurnLeft < TurnRight < Forward.
inline PolicyTable solve_policy(const GridLayout& layout, const RewardSpec& spec) {
  spec.validate();
  const int n_poses = layout.width * layout.height * kHeadingCount;
  const double step_cost = -spec.success_scale / spec.horizon;

  std::vector<double> values(n_poses, spec.failure_reward);
  for (int h = 0; h < kHeadingCount; ++h) {
    values[pose_index(layout, layout.goal, static_cast<Heading>(h))] = 0.0;
  }

  std::vector<double> next(values);
  const int max_sweeps = 4 * n_poses + 64;
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (int y = 0; y < layout.height; ++y) {
      for (int x = 0; x < layout.width; ++x) {
        const Cell c{x, y};
        if (c == layout.goal) continue;
        for (int h = 0; h < kHeadingCount; ++h) {
          const int p = pose_index(layout, c, static_cast<Heading>(h));
          double best = -1e300;
          for (int a = 0; a < kActionCount; ++a) {
            const auto t =
                detail::pose_step(layout, c, static_cast<Heading>(h), static_cast<Action>(a));
            const double q =
                step_cost + (t.enters_goal ? 1.0 : values[t.next_pose]);
            if (q > best) best = q;
          }
          const double v = std::max(spec.failure_reward, best);
          max_change = std::max(max_change, std::abs(v - values[p]));
          next[p] = v;
        }
      }
    }
    values.swap(next);
    if (max_change < 1e-12) break;
  }
  if (sweep == max_sweeps) throw GenerationError("solve_policy: value iteration did not converge");

  PolicyTable table;
  table.layout = layout;
  table.values = values;
  table.action_of.assign(n_poses, Action::TurnLeft);
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const Cell c{x, y};
      for (int h = 0; h < kHeadingCount; ++h) {
        const int p = pose_index(layout, c, static_cast<Heading>(h));
        double best = -1e300;
        Action best_a = Action::TurnLeft;
        for (int a = 0; a < kActionCount; ++a) {
          const auto t =
              detail::pose_step(layout, c, static_cast<Heading>(h), static_cast<Action>(a));
          const double q = step_cost + (t.enters_goal ? 1.0 : values[t.next_pose]);
          if (q > best) {
            best = q;
            best_a = static_cast<Action>(a);
          }
        }
        table.action_of[p] = best_a;
      }
    }
  }
  return table;
}

// Total over poses: any in-grid (cell, heading) has an action, including
// cells that are obstacles in the table's own layout.
inline Action act(const PolicyTable& policy, const EnvState& state) {
  if (!policy.layout.in_bounds(state.pos)) throw UsageError("act: pose outside grid");
  return policy.action_of[pose_index(policy.layout, state.pos, state.heading)];
}

struct FailSafeConfig {
  int explore_steps = 10;
  uint64_t rng_seed = 0;

  void validate() const {
    if (explore_steps < 1) throw ConfigError("FailSafeConfig: explore_steps must be >= 1");
  }
};

// Per-rollout exploration state; never share across rollouts. A bump arms the
// exploration counter; while it is armed the wrapped policy is replaced by
// uniform random actions. Re-arming requires another bump after the counter
// has drained.
struct FailSafeState {
  int remaining = 0;
  Rng rng;

  FailSafeState(const FailSafeConfig& cfg, uint64_t rollout_seed)
      : rng(mix_seed(cfg.rng_seed, mix_seed(seed_stream::kFailSafe, rollout_seed))) {
    cfg.validate();
  }

  template <typename PolicyFn>
  Action select(PolicyFn&& policy, const EnvState& state, bool bumped_last,
                const FailSafeConfig& cfg) {
    if (bumped_last && remaining == 0) remaining = cfg.explore_steps;
    if (remaining > 0) {
      --remaining;
      return static_cast<Action>(rng.below(kActionCount));
    }
    return policy(state);
  }
};

inline Action failsafe_act(const PolicyTable& policy, const EnvState& state, bool bumped_last,
                           const FailSafeConfig& fs, FailSafeState& fs_state) {
  return fs_state.select([&policy](const EnvState& s) { return act(policy, s); }, state,
                         bumped_last, fs);
}

// --- serialization ---------------------------------------------------------
// JSON mapping "x,y,heading" -> action name for free interior poses, plus the
// embedded layout. Poses outside the serialized domain load as TurnLeft.

inline Json policy_to_json(const PolicyTable& policy) {
  Json actions = Json::object();
  const GridLayout& g = policy.layout;
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const Cell c{x, y};
      if (g.blocked(c)) continue;
      for (int h = 0; h < kHeadingCount; ++h) {
        const Heading heading = static_cast<Heading>(h);
        const std::string key = std::to_string(x) + "," + std::to_string(y) + "," +
                                heading_name(heading);
        actions[key] = action_name(policy.action_of[pose_index(g, c, heading)]);
      }
    }
  }
  Json j;
  j["layout"] = layout_to_json(policy.layout);
  j["actions"] = std::move(actions);
  return j;
}

inline PolicyTable policy_from_json(const Json& j) {
  PolicyTable table;
  table.layout = layout_from_json(j.at("layout"));
  const int n_poses = table.layout.width * table.layout.height * kHeadingCount;
  table.action_of.assign(n_poses, Action::TurnLeft);
  table.values.assign(n_poses, 0.0);
  for (const auto& [key, value] : j.at("actions").items()) {
    const auto c1 = key.find(',');
    const auto c2 = key.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) {
      throw DataError("policy_from_json: bad pose key: " + key);
    }
    const int x = std::stoi(key.substr(0, c1));
    const int y = std::stoi(key.substr(c1 + 1, c2 - c1 - 1));
    const Heading h = heading_from_name(key.substr(c2 + 1));
    table.action_of[pose_index(table.layout, {x, y}, h)] =
        action_from_name(value.get<std::string>());
  }
  return table;
}

}  // namespace cfdt
