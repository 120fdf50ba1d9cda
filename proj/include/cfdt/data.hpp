#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfdt/grid.hpp"
#include "cfdt/policy.hpp"

// Factual / counterfactual rollout collection, the ATE estimator and the
// weighted trajectory sampler that feeds the sequence model.

namespace cfdt {

enum class Provenance { Factual, Counterfactual };

inline const char* provenance_name(Provenance p) {
  return p == Provenance::Factual ? "factual" : "counterfactual";
}

inline Provenance provenance_from_name(const std::string& s) {
  if (s == "factual") return Provenance::Factual;
  if (s == "counterfactual") return Provenance::Counterfactual;
  throw DataError("unknown provenance: " + s);
}

// One recorded step: the pose observed before acting, the action and the
// reward paid by the transition. Observations are a pure function of
// (layout, pose) and are materialized on demand.
struct TrajStep {
  Cell pos;
  Heading heading = Heading::East;
  Action action = Action::Forward;
  double reward = 0.0;

  friend bool operator==(const TrajStep&, const TrajStep&) = default;
};

struct Trajectory {
  uint64_t layout_id = 0;
  Provenance provenance = Provenance::Factual;
  std::vector<TrajStep> steps;
  std::vector<double> returns_to_go;
  double total_return = 0.0;

  int episode_length() const { return static_cast<int>(steps.size()); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

// Backward suffix sum; written exactly as the recurrence R_t = r_t + R_{t+1},
// R_{T+1} = 0, so the stored values satisfy it bit for bit.
inline void compute_returns_to_go(Trajectory& t) {
  const int n = t.episode_length();
  t.returns_to_go.assign(n, 0.0);
  for (int i = n - 1; i >= 0; --i) {
    t.returns_to_go[i] = t.steps[i].reward + (i + 1 < n ? t.returns_to_go[i + 1] : 0.0);
  }
  t.total_return = n > 0 ? t.returns_to_go[0] : 0.0;
}

// Per-rollout seeds inside a collection run.
inline uint64_t rollout_seed(uint64_t collection_seed, uint64_t index) {
  return mix_seed(collection_seed, index);
}

// Simulates one episode to termination. The policy is any callable
// EnvState -> Action; with a fail-safe config present it is wrapped in the
// bump-triggered exploration rule.
template <typename PolicyFn>
Trajectory rollout(const GridLayout& layout, PolicyFn&& policy, const RewardSpec& spec,
                   const std::optional<FailSafeConfig>& failsafe, uint64_t seed,
                   Provenance provenance = Provenance::Factual) {
  spec.validate();
  Trajectory traj;
  traj.layout_id = layout_hash(layout);
  traj.provenance = provenance;

  std::optional<FailSafeState> fs_state;
  if (failsafe) fs_state.emplace(*failsafe, seed);

  EnvState state = reset(layout);
  bool bumped_last = false;
  while (!is_terminal(state, spec)) {
    const Action action =
        failsafe ? fs_state->select(policy, state, bumped_last, *failsafe) : policy(state);
    const StepResult r = step(state, action, spec);
    traj.steps.push_back({state.pos, state.heading, action, r.reward});
    bumped_last = r.bumped;
    state = r.state;
    if (r.done) break;
  }
  compute_returns_to_go(traj);
  return traj;
}

inline Trajectory rollout(const GridLayout& layout, const PolicyTable& policy,
                          const RewardSpec& spec, const std::optional<FailSafeConfig>& failsafe,
                          uint64_t seed, Provenance provenance = Provenance::Factual) {
  return rollout(
      layout, [&policy](const EnvState& s) { return act(policy, s); }, spec, failsafe, seed,
      provenance);
}

inline std::vector<Trajectory> collect_factual(const GridLayout& source_layout,
                                               const PolicyTable& policy, const RewardSpec& spec,
                                               int n, const std::optional<FailSafeConfig>& failsafe,
                                               uint64_t seed) {
  if (n < 0) throw ConfigError("collect_factual: negative count");
  std::vector<Trajectory> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    out.push_back(rollout(source_layout, policy, spec, failsafe, rollout_seed(seed, i),
                          Provenance::Factual));
  }
  return out;
}

// rollouts_per_env fail-safe rollouts on each given layout. Shared by
// collect_counterfactual and the pipeline (which draws layouts separately).
inline std::vector<Trajectory> collect_rollouts(const std::vector<GridLayout>& layouts,
                                                const PolicyTable& policy, const RewardSpec& spec,
                                                int rollouts_per_env,
                                                const std::optional<FailSafeConfig>& failsafe,
                                                uint64_t seed, Provenance provenance) {
  std::vector<Trajectory> out;
  out.reserve(layouts.size() * rollouts_per_env);
  for (size_t e = 0; e < layouts.size(); ++e) {
    for (int r = 0; r < rollouts_per_env; ++r) {
      out.push_back(rollout(layouts[e], policy, spec, failsafe,
                            rollout_seed(seed, e * static_cast<uint64_t>(rollouts_per_env) + r),
                            provenance));
    }
  }
  return out;
}

// Draws n_envs counterfactual layouts by intervening on the base layout and
// rolls the (fail-safe wrapped) policy on each.
inline std::pair<std::vector<Trajectory>, std::vector<GridLayout>> collect_counterfactual(
    const GridLayout& base, const PolicyTable& policy, const RewardSpec& spec, int n_envs,
    int rollouts_per_env, int n_obstacles, const FailSafeConfig& failsafe, uint64_t seed) {
  if (n_envs < 1) throw ConfigError("collect_counterfactual: n_envs must be >= 1");
  std::vector<GridLayout> layouts;
  layouts.reserve(n_envs);
  for (int e = 0; e < n_envs; ++e) {
    layouts.push_back(intervene(base, derive_seed(seed, seed_stream::kCfLayout, e), n_obstacles));
  }
  auto trajectories = collect_rollouts(layouts, policy, spec, rollouts_per_env, failsafe,
                                       derive_seed(seed, seed_stream::kCfRollout),
                                       Provenance::Counterfactual);
  return {std::move(trajectories), std::move(layouts)};
}

// Monte-Carlo treatment effect of one counterfactual layout on the policy:
// mean total return under the intervention minus mean total return on the
// source, same policy on both sides.
struct AteEstimate {
  uint64_t layout_id = 0;
  double ate = 0.0;
  int n_cf_rollouts = 0;
  int n_source_rollouts = 0;
  double cf_mean_return = 0.0;
  double source_mean_return = 0.0;
  double std_error = 0.0;
};

namespace detail {

struct MeanVar {
  double mean = 0.0;
  double var = 0.0;  // unbiased; 0 when n < 2
};

inline MeanVar mean_var(const std::vector<double>& xs) {
  MeanVar mv;
  const size_t n = xs.size();
  if (n == 0) return mv;
  double sum = 0.0;
  for (double x : xs) sum += x;
  mv.mean = sum / static_cast<double>(n);
  if (n >= 2) {
    double ss = 0.0;
    for (double x : xs) ss += (x - mv.mean) * (x - mv.mean);
    mv.var = ss / static_cast<double>(n - 1);
  }
  return mv;
}

}  // namespace detail

inline AteEstimate estimate_ate(const GridLayout& cf_layout, const GridLayout& source_layout,
                                const PolicyTable& policy, const RewardSpec& spec, int m,
                                const std::optional<FailSafeConfig>& failsafe, uint64_t seed) {
  if (m < 1) throw ConfigError("estimate_ate: m must be >= 1");
  std::vector<double> cf_returns, source_returns;
  cf_returns.reserve(m);
  source_returns.reserve(m);
  const uint64_t cf_seed = mix_seed(seed, 0);
  const uint64_t src_seed = mix_seed(seed, 1);
  for (int i = 0; i < m; ++i) {
    cf_returns.push_back(
        rollout(cf_layout, policy, spec, failsafe, rollout_seed(cf_seed, i)).total_return);
    source_returns.push_back(
        rollout(source_layout, policy, spec, failsafe, rollout_seed(src_seed, i)).total_return);
  }
  const auto cf = detail::mean_var(cf_returns);
  const auto src = detail::mean_var(source_returns);
  AteEstimate est;
  est.layout_id = layout_hash(cf_layout);
  est.ate = cf.mean - src.mean;
  est.n_cf_rollouts = m;
  est.n_source_rollouts = m;
  est.cf_mean_return = cf.mean;
  est.source_mean_return = src.mean;
  est.std_error = std::sqrt(cf.var / m + src.var / m);
  return est;
}

// Trajectories plus normalized sampling weights. Weights are shared by all
// trajectories from the same layout: the treatment effect is a property of
// the environment, not of one rollout.
struct WeightedDataset {
  std::vector<Trajectory> trajectories;
  std::vector<double> weights;             // non-negative, sum to 1
  double beta = 0.0;
  std::unordered_map<uint64_t, GridLayout> layouts;  // id -> layout, for observations
  Json manifest;

  std::vector<double> cumulative;  // prefix sums of weights, for inverse-CDF draws

  bool empty() const { return trajectories.empty(); }
};

// Softmax over per-environment ATE at temperature beta, max-shifted for
// stability; beta = 0 degenerates to uniform. Every trajectory's layout must
// have an ATE entry (factual layouts carry 0 by definition).
inline WeightedDataset build_weights(std::vector<Trajectory> trajectories,
                                     const std::unordered_map<uint64_t, double>& ate_by_layout,
                                     double beta,
                                     std::unordered_map<uint64_t, GridLayout> layouts = {}) {
  if (beta < 0.0) throw ConfigError("build_weights: beta must be >= 0");
  WeightedDataset ds;
  ds.beta = beta;
  ds.layouts = std::move(layouts);
  ds.trajectories = std::move(trajectories);
  const size_t n = ds.trajectories.size();
  ds.weights.assign(n, 0.0);
  if (n == 0) return ds;

  std::vector<double> ates(n);
  double max_ate = -1e300;
  for (size_t i = 0; i < n; ++i) {
    const auto it = ate_by_layout.find(ds.trajectories[i].layout_id);
    if (it == ate_by_layout.end()) {
      throw DataError("build_weights: no ATE entry for layout " +
                      layout_id_hex(ds.trajectories[i].layout_id));
    }
    ates[i] = it->second;
    max_ate = std::max(max_ate, ates[i]);
  }
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ds.weights[i] = std::exp(beta * (ates[i] - max_ate));
    total += ds.weights[i];
  }
  ds.cumulative.resize(n);
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ds.weights[i] /= total;
    acc += ds.weights[i];
    ds.cumulative[i] = acc;
  }
  ds.cumulative.back() = 1.0;
  return ds;
}

// A batch of fixed-length windows, padded on the left and masked. Row-major:
// returns/actions/timesteps/mask are (B, K), obs is (B, K, obs_dim).
struct Batch {
  int batch_size = 0;
  int context = 0;
  int obs_dim = 0;
  std::vector<float> returns;
  std::vector<float> obs;
  std::vector<int> actions;
  std::vector<int> timesteps;
  std::vector<uint8_t> mask;  // 1 = real step, 0 = pad

  void resize(int b, int k, int od) {
    batch_size = b;
    context = k;
    obs_dim = od;
    returns.assign(static_cast<size_t>(b) * k, 0.0f);
    obs.assign(static_cast<size_t>(b) * k * od, 0.0f);
    actions.assign(static_cast<size_t>(b) * k, 0);
    timesteps.assign(static_cast<size_t>(b) * k, 0);
    mask.assign(static_cast<size_t>(b) * k, 0);
  }
};

// Writes one trajectory window into batch row b: steps [start, start+len)
// right-aligned, left-padded to K. Timesteps are absolute episode indices.
inline void fill_window(Batch& batch, int b, const Trajectory& traj, const GridLayout& layout,
                        int start, int len) {
  const int k = batch.context;
  const int pad = k - len;
  for (int i = 0; i < len; ++i) {
    const int t = start + i;
    const size_t at = static_cast<size_t>(b) * k + pad + i;
    batch.returns[at] = static_cast<float>(traj.returns_to_go[t]);
    batch.actions[at] = static_cast<int>(traj.steps[t].action);
    batch.timesteps[at] = t;
    batch.mask[at] = 1;
    write_observation(layout, traj.steps[t].pos, traj.steps[t].heading,
                      batch.obs.data() + at * batch.obs_dim);
  }
}

// Draws trajectories with probability proportional to their weights (with
// replacement), then a uniform window of K steps from each; shorter episodes
// are left-padded and masked.
inline Batch sample_batch(const WeightedDataset& ds, int batch_size, int context, Rng& rng) {
  if (context < 1) throw UsageError("sample_batch: context must be >= 1");
  if (batch_size < 1) throw UsageError("sample_batch: batch size must be >= 1");
  if (ds.empty()) throw UsageError("sample_batch: dataset is empty");

  const GridLayout* any_layout = nullptr;
  for (const auto& [id, layout] : ds.layouts) {
    any_layout = &layout;
    break;
  }
  if (any_layout == nullptr) throw DataError("sample_batch: dataset has no layout table");
  const int od = observation_dim(any_layout->width, any_layout->height);

  Batch batch;
  batch.resize(batch_size, context, od);
  for (int b = 0; b < batch_size; ++b) {
    const double u = rng.uniform();
    const size_t idx = std::upper_bound(ds.cumulative.begin(), ds.cumulative.end(), u) -
                       ds.cumulative.begin();
    const Trajectory& traj = ds.trajectories[std::min(idx, ds.trajectories.size() - 1)];
    const auto lit = ds.layouts.find(traj.layout_id);
    if (lit == ds.layouts.end()) {
      throw DataError("sample_batch: no layout for id " + layout_id_hex(traj.layout_id));
    }
    const int len = traj.episode_length();
    if (len >= context) {
      const int start = rng.below(len - context + 1);
      fill_window(batch, b, traj, lit->second, start, context);
    } else {
      fill_window(batch, b, traj, lit->second, 0, len);
    }
  }
  return batch;
}

// --- serialization ---------------------------------------------------------

inline Json trajectory_to_json(const Trajectory& t) {
  Json steps = Json::array();
  for (const TrajStep& s : t.steps) {
    steps.push_back({{"x", s.pos.x},
                     {"y", s.pos.y},
                     {"heading", heading_name(s.heading)},
                     {"action", action_name(s.action)},
                     {"reward", s.reward}});
  }
  Json j;
  j["layout_id"] = layout_id_hex(t.layout_id);
  j["provenance"] = provenance_name(t.provenance);
  j["steps"] = std::move(steps);
  j["returns_to_go"] = t.returns_to_go;
  j["total_return"] = t.total_return;
  return j;
}

inline Trajectory trajectory_from_json(const Json& j) {
  Trajectory t;
  t.layout_id = layout_id_from_hex(j.at("layout_id").get<std::string>());
  t.provenance = provenance_from_name(j.at("provenance").get<std::string>());
  for (const auto& s : j.at("steps")) {
    t.steps.push_back({{s.at("x").get<int>(), s.at("y").get<int>()},
                       heading_from_name(s.at("heading").get<std::string>()),
                       action_from_name(s.at("action").get<std::string>()),
                       s.at("reward").get<double>()});
  }
  t.returns_to_go = j.at("returns_to_go").get<std::vector<double>>();
  t.total_return = j.at("total_return").get<double>();
  return t;
}

inline void save_trajectories_jsonl(const std::string& path,
                                    const std::vector<Trajectory>& trajectories) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  for (const Trajectory& t : trajectories) {
    out << trajectory_to_json(t).dump() << "\n";
  }
}

inline std::vector<Trajectory> load_trajectories_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open for read: " + path);
  std::vector<Trajectory> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(trajectory_from_json(Json::parse(line)));
  }
  return out;
}

inline Json ate_to_json(const AteEstimate& e) {
  Json j;
  j["layout_id"] = layout_id_hex(e.layout_id);
  j["ate"] = e.ate;
  j["n_cf_rollouts"] = e.n_cf_rollouts;
  j["n_source_rollouts"] = e.n_source_rollouts;
  j["cf_mean_return"] = e.cf_mean_return;
  j["source_mean_return"] = e.source_mean_return;
  j["std_error"] = e.std_error;
  return j;
}

inline AteEstimate ate_from_json(const Json& j) {
  AteEstimate e;
  e.layout_id = layout_id_from_hex(j.at("layout_id").get<std::string>());
  e.ate = j.at("ate").get<double>();
  e.n_cf_rollouts = j.at("n_cf_rollouts").get<int>();
  e.n_source_rollouts = j.at("n_source_rollouts").get<int>();
  e.cf_mean_return = j.at("cf_mean_return").get<double>();
  e.source_mean_return = j.at("source_mean_return").get<double>();
  e.std_error = j.at("std_error").get<double>();
  return e;
}

}  // namespace cfdt
