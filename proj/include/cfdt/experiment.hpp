#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cfdt/data.hpp"
#include "cfdt/dt.hpp"
#include "cfdt/grid.hpp"
#include "cfdt/policy.hpp"

// Configuration-driven orchestration of the whole pipeline: layout
// generation with disjoint seed streams, data collection + ATE table,
// per-variant training, target evaluation and the consolidated report.

namespace cfdt {

namespace fs = std::filesystem;

enum class Variant : int { Source = 0, DtF, DtCf, DtFcf, DtCfAte, DtFcfAte };

constexpr std::array<Variant, 6> kAllVariants = {Variant::Source,  Variant::DtF,
                                                 Variant::DtCf,    Variant::DtFcf,
                                                 Variant::DtCfAte, Variant::DtFcfAte};
constexpr std::array<Variant, 5> kDtVariants = {Variant::DtF, Variant::DtCf, Variant::DtFcf,
                                                Variant::DtCfAte, Variant::DtFcfAte};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Source: return "source";
    case Variant::DtF: return "dt-f";
    case Variant::DtCf: return "dt-cf";
    case Variant::DtFcf: return "dt-fcf";
    case Variant::DtCfAte: return "dt-cf-ate";
    case Variant::DtFcfAte: return "dt-fcf-ate";
  }
  throw UsageError("invalid variant");
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : kAllVariants) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant: " + s);
}

inline bool variant_uses_factual(Variant v) {
  return v == Variant::DtF || v == Variant::DtFcf || v == Variant::DtFcfAte;
}
inline bool variant_uses_counterfactual(Variant v) {
  return v == Variant::DtCf || v == Variant::DtFcf || v == Variant::DtCfAte ||
         v == Variant::DtFcfAte;
}
inline bool variant_uses_ate_weights(Variant v) {
  return v == Variant::DtCfAte || v == Variant::DtFcfAte;
}

struct FailSafeFlags {
  bool collect = true;        // fail-safe for factual collection and ATE rollouts
  bool baseline_eval = false; // fail-safe for the source agent on targets
};

struct ExperimentConfig {
  int width = 8;
  int height = 8;
  int n_obstacles_source = 6;
  std::string scenario = "easy";  // easy: targets match source count; hard: +1
  int n_cf_envs = 200;
  int n_target_envs = 100;
  int n_factual_rollouts = 100;
  int rollouts_per_env = 3;
  int ate_rollouts = 5;  // m rollouts per side
  double beta = 5.0;
  RewardSpec reward;
  FailSafeConfig failsafe;
  FailSafeFlags failsafe_flags;
  DTConfig dt;
  uint64_t master_seed = 1;
  int eval_episodes_per_layout = 1;
  bool deterministic = false;  // forces sequential execution of variants

  int n_obstacles_target() const {
    return scenario == "hard" ? n_obstacles_source + 1 : n_obstacles_source;
  }

  // Fills the fields derived from the grid and checks consistency.
  void normalize() {
    dt.obs_dim = observation_dim(width, height);
    dt.max_timestep = reward.horizon;
    dt.action_count = kActionCount;
  }

  void validate() const {
    if (scenario != "easy" && scenario != "hard") {
      throw ConfigError("scenario must be easy or hard");
    }
    if (n_cf_envs < 1 || n_target_envs < 1) throw ConfigError("counts must be >= 1");
    if (n_factual_rollouts < 0 || rollouts_per_env < 1 || ate_rollouts < 1) {
      throw ConfigError("bad rollout counts");
    }
    if (beta < 0.0) throw ConfigError("beta must be >= 0");
    if (eval_episodes_per_layout < 1) throw ConfigError("eval_episodes_per_layout must be >= 1");
    reward.validate();
    failsafe.validate();
    dt.validate();
  }
};

inline Json experiment_config_to_json(const ExperimentConfig& c) {
  Json j;
  j["width"] = c.width;
  j["height"] = c.height;
  j["n_obstacles_source"] = c.n_obstacles_source;
  j["scenario"] = c.scenario;
  j["n_cf_envs"] = c.n_cf_envs;
  j["n_target_envs"] = c.n_target_envs;
  j["n_factual_rollouts"] = c.n_factual_rollouts;
  j["rollouts_per_env"] = c.rollouts_per_env;
  j["ate_rollouts"] = c.ate_rollouts;
  j["beta"] = c.beta;
  j["reward"] = {{"horizon", c.reward.horizon},
                 {"success_scale", c.reward.success_scale},
                 {"failure_reward", c.reward.failure_reward},
                 {"discount", c.reward.discount}};
  j["failsafe"] = {{"explore_steps", c.failsafe.explore_steps},
                   {"rng_seed", c.failsafe.rng_seed},
                   {"collect", c.failsafe_flags.collect},
                   {"baseline_eval", c.failsafe_flags.baseline_eval}};
  j["dt"] = dtconfig_to_json(c.dt);
  j["master_seed"] = c.master_seed;
  j["eval_episodes_per_layout"] = c.eval_episodes_per_layout;
  j["deterministic"] = c.deterministic;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const Json& j) {
  ExperimentConfig c;
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.n_obstacles_source = j.value("n_obstacles_source", c.n_obstacles_source);
  c.scenario = j.value("scenario", c.scenario);
  c.n_cf_envs = j.value("n_cf_envs", c.n_cf_envs);
  c.n_target_envs = j.value("n_target_envs", c.n_target_envs);
  c.n_factual_rollouts = j.value("n_factual_rollouts", c.n_factual_rollouts);
  c.rollouts_per_env = j.value("rollouts_per_env", c.rollouts_per_env);
  c.ate_rollouts = j.value("ate_rollouts", c.ate_rollouts);
  c.beta = j.value("beta", c.beta);
  if (j.contains("reward")) {
    const Json& r = j.at("reward");
    c.reward.horizon = r.value("horizon", c.reward.horizon);
    c.reward.success_scale = r.value("success_scale", c.reward.success_scale);
    c.reward.failure_reward = r.value("failure_reward", c.reward.failure_reward);
    c.reward.discount = r.value("discount", c.reward.discount);
  }
  if (j.contains("failsafe")) {
    const Json& f = j.at("failsafe");
    c.failsafe.explore_steps = f.value("explore_steps", c.failsafe.explore_steps);
    c.failsafe.rng_seed = f.value("rng_seed", c.failsafe.rng_seed);
    c.failsafe_flags.collect = f.value("collect", c.failsafe_flags.collect);
    c.failsafe_flags.baseline_eval = f.value("baseline_eval", c.failsafe_flags.baseline_eval);
  }
  if (j.contains("dt")) c.dt = dtconfig_from_json(j.at("dt"));
  c.master_seed = j.value("master_seed", c.master_seed);
  c.eval_episodes_per_layout = j.value("eval_episodes_per_layout", c.eval_episodes_per_layout);
  c.deterministic = j.value("deterministic", c.deterministic);
  c.normalize();
  return c;
}

// Accepts either a JSON document or TOML-like `key=value` lines with dotted
// keys (dt.embed_dim=32, reward.horizon=100, ...).
inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    return experiment_config_from_json(Json::parse(text));
  }
  // key=value lines are applied on top of the defaults via the JSON path
  Json j = Json::object();
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t\r\n");
      const size_t b = s.find_last_not_of(" \t\r\n");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) continue;
    Json* slot = &j;
    std::string rest = key;
    size_t dot;
    while ((dot = rest.find('.')) != std::string::npos) {
      slot = &(*slot)[rest.substr(0, dot)];
      rest = rest.substr(dot + 1);
    }
    // value typing: bool, number or string
    if (value == "true" || value == "false") {
      (*slot)[rest] = (value == "true");
    } else {
      try {
        size_t used = 0;
        if (value.find('.') == std::string::npos && value.find('e') == std::string::npos) {
          const long long v = std::stoll(value, &used);
          if (used == value.size()) {
            (*slot)[rest] = v;
            continue;
          }
        }
        const double v = std::stod(value, &used);
        if (used == value.size()) {
          (*slot)[rest] = v;
          continue;
        }
        (*slot)[rest] = value;
      } catch (const std::exception&) {
        (*slot)[rest] = value;
      }
    }
  }
  return experiment_config_from_json(j);
}

// --- run directory layout ---------------------------------------------------

struct RunPaths {
  fs::path root;

  explicit RunPaths(const std::string& dir) : root(dir) {}

  fs::path manifest() const { return root / "manifest.json"; }
  fs::path layouts_dir() const { return root / "layouts"; }
  fs::path source_layout() const { return layouts_dir() / "source.json"; }
  fs::path cf_layouts() const { return layouts_dir() / "counterfactual.jsonl"; }
  fs::path target_layouts() const { return layouts_dir() / "target.jsonl"; }
  fs::path data_dir() const { return root / "data"; }
  fs::path factual_data() const { return data_dir() / "factual.jsonl"; }
  fs::path cf_data() const { return data_dir() / "counterfactual.jsonl"; }
  fs::path ate_table() const { return data_dir() / "ate.json"; }
  fs::path data_manifest() const { return data_dir() / "manifest.json"; }
  fs::path checkpoints_dir() const { return root / "checkpoints"; }
  fs::path checkpoint(Variant v) const {
    return checkpoints_dir() / (std::string(variant_name(v)) + ".ckpt");
  }
  fs::path loss_trace(Variant v) const {
    return checkpoints_dir() / (std::string(variant_name(v)) + "_loss.csv");
  }
  fs::path eval_dir() const { return root / "eval"; }
  fs::path eval_json(Variant v) const {
    return eval_dir() / (std::string(variant_name(v)) + ".json");
  }
  fs::path eval_csv(Variant v) const {
    return eval_dir() / (std::string(variant_name(v)) + ".csv");
  }
  fs::path timings_dir() const { return root / "timings"; }
  fs::path timing(Variant v) const {
    return timings_dir() / (std::string(variant_name(v)) + ".json");
  }
  fs::path report_json() const { return root / "report.json"; }
  fs::path report_csv() const { return root / "report.csv"; }
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path.string());
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open for read: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline Json read_json(const fs::path& path) { return Json::parse(read_text(path)); }

inline void write_json(const fs::path& path, const Json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// --- gen --------------------------------------------------------------------

struct GeneratedLayouts {
  GridLayout source;
  std::vector<GridLayout> cf;
  std::vector<GridLayout> target;
  int target_rejected = 0;  // draws discarded to keep target hashes disjoint
};

// Draws the source layout, n_cf_envs unique counterfactual layouts and
// n_target_envs unique target layouts. Target draws that collide with the
// counterfactual set (or the source) are rejected so the leakage check holds
// by construction; the intersection is still verified afterwards.
inline GeneratedLayouts generate_all_layouts(const ExperimentConfig& cfg) {
  GeneratedLayouts out;
  out.source = generate_layout(derive_seed(cfg.master_seed, seed_stream::kSourceLayout),
                               cfg.width, cfg.height, cfg.n_obstacles_source);

  std::unordered_set<uint64_t> cf_hashes;
  uint64_t i = 0;
  while (static_cast<int>(out.cf.size()) < cfg.n_cf_envs) {
    GridLayout l = intervene(out.source, derive_seed(cfg.master_seed, seed_stream::kCfLayout, i++),
                             cfg.n_obstacles_source);
    if (cf_hashes.insert(layout_hash(l)).second) out.cf.push_back(std::move(l));
  }

  std::unordered_set<uint64_t> excluded = cf_hashes;
  excluded.insert(layout_hash(out.source));
  i = 0;
  while (static_cast<int>(out.target.size()) < cfg.n_target_envs) {
    GridLayout l =
        generate_layout(derive_seed(cfg.master_seed, seed_stream::kTargetLayout, i++),
                        cfg.width, cfg.height, cfg.n_obstacles_target());
    const uint64_t h = layout_hash(l);
    if (excluded.count(h)) {
      ++out.target_rejected;
      continue;
    }
    excluded.insert(h);
    out.target.push_back(std::move(l));
  }
  return out;
}

inline void cmd_gen(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const RunPaths paths(out_dir);
  const GeneratedLayouts gen = generate_all_layouts(cfg);

  fs::create_directories(paths.layouts_dir());
  detail::write_json(paths.source_layout(), layout_to_json(gen.source));
  {
    std::ofstream out(paths.cf_layouts(), std::ios::binary);
    for (const GridLayout& l : gen.cf) out << layout_to_json(l).dump() << "\n";
  }
  {
    std::ofstream out(paths.target_layouts(), std::ios::binary);
    for (const GridLayout& l : gen.target) out << layout_to_json(l).dump() << "\n";
  }

  // leakage proof: recompute the hash intersection instead of trusting the
  // rejection loop
  std::unordered_set<uint64_t> cf_hashes;
  for (const GridLayout& l : gen.cf) cf_hashes.insert(layout_hash(l));
  int intersection = 0;
  Json target_ids = Json::array();
  for (const GridLayout& l : gen.target) {
    const uint64_t h = layout_hash(l);
    if (cf_hashes.count(h)) ++intersection;
    target_ids.push_back(layout_id_hex(h));
  }
  if (intersection != 0) throw GenerationError("cmd_gen: cf/target hash sets intersect");
  Json cf_ids = Json::array();
  for (const GridLayout& l : gen.cf) cf_ids.push_back(layout_id_hex(layout_hash(l)));

  Json manifest;
  manifest["config"] = experiment_config_to_json(cfg);
  manifest["master_seed"] = cfg.master_seed;
  manifest["seeds"] = {
      {"source_layout", derive_seed(cfg.master_seed, seed_stream::kSourceLayout)},
      {"cf_layout_stream", derive_seed(cfg.master_seed, seed_stream::kCfLayout)},
      {"target_layout_stream", derive_seed(cfg.master_seed, seed_stream::kTargetLayout)},
      {"factual_rollouts", derive_seed(cfg.master_seed, seed_stream::kFactualRollout)},
      {"cf_rollouts", derive_seed(cfg.master_seed, seed_stream::kCfRollout)},
      {"ate", derive_seed(cfg.master_seed, seed_stream::kAte)}};
  manifest["gen"] = {{"source_id", layout_id_hex(layout_hash(gen.source))},
                     {"n_cf_envs", static_cast<int>(gen.cf.size())},
                     {"n_target_envs", static_cast<int>(gen.target.size())},
                     {"n_obstacles_source", cfg.n_obstacles_source},
                     {"n_obstacles_target", cfg.n_obstacles_target()},
                     {"cf_target_hash_intersection_size", intersection},
                     {"target_draws_rejected", gen.target_rejected},
                     {"cf_ids", std::move(cf_ids)},
                     {"target_ids", std::move(target_ids)}};
  detail::write_json(paths.manifest(), manifest);
}

// --- collect -----------------------------------------------------------------

struct CollectedData {
  GridLayout source;
  std::vector<GridLayout> cf_layouts;
  std::vector<Trajectory> factual;
  std::vector<Trajectory> counterfactual;
  std::vector<AteEstimate> ate;
  std::unordered_map<uint64_t, GridLayout> layout_map;  // source + cf
};

inline std::vector<GridLayout> load_layouts_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open for read: " + path.string());
  std::vector<GridLayout> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(layout_from_json(Json::parse(line)));
  }
  return out;
}

inline CollectedData collect_data(const ExperimentConfig& cfg, const GridLayout& source,
                                  const std::vector<GridLayout>& cf_layouts) {
  CollectedData data;
  data.source = source;
  data.cf_layouts = cf_layouts;

  const PolicyTable policy = solve_policy(source, cfg.reward);
  const std::optional<FailSafeConfig> collect_fs =
      cfg.failsafe_flags.collect ? std::optional<FailSafeConfig>(cfg.failsafe) : std::nullopt;

  data.factual =
      collect_factual(source, policy, cfg.reward, cfg.n_factual_rollouts, collect_fs,
                      derive_seed(cfg.master_seed, seed_stream::kFactualRollout));
  // counterfactual rollouts always run with the fail-safe on: without it a
  // blocked deterministic policy would bump in place until the horizon
  data.counterfactual =
      collect_rollouts(cf_layouts, policy, cfg.reward, cfg.rollouts_per_env, cfg.failsafe,
                       derive_seed(cfg.master_seed, seed_stream::kCfRollout),
                       Provenance::Counterfactual);
  data.ate.reserve(cf_layouts.size());
  for (size_t i = 0; i < cf_layouts.size(); ++i) {
    data.ate.push_back(estimate_ate(cf_layouts[i], source, policy, cfg.reward, cfg.ate_rollouts,
                                    collect_fs,
                                    derive_seed(cfg.master_seed, seed_stream::kAte, i)));
  }

  data.layout_map.emplace(layout_hash(source), source);
  for (const GridLayout& l : cf_layouts) data.layout_map.emplace(layout_hash(l), l);
  return data;
}

inline void cmd_collect(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const RunPaths paths(out_dir);
  const GridLayout source = layout_from_json(detail::read_json(paths.source_layout()));
  const std::vector<GridLayout> cf_layouts = load_layouts_jsonl(paths.cf_layouts());

  const CollectedData data = collect_data(cfg, source, cf_layouts);

  fs::create_directories(paths.data_dir());
  save_trajectories_jsonl(paths.factual_data().string(), data.factual);
  save_trajectories_jsonl(paths.cf_data().string(), data.counterfactual);

  Json ate_rows = Json::array();
  for (const AteEstimate& e : data.ate) ate_rows.push_back(ate_to_json(e));
  detail::write_json(paths.ate_table(), Json{{"entries", ate_rows}});

  Json layouts = Json::object();
  layouts[layout_id_hex(layout_hash(source))] = layout_to_json(source);
  for (const GridLayout& l : cf_layouts) {
    layouts[layout_id_hex(layout_hash(l))] = layout_to_json(l);
  }
  Json manifest;
  manifest["master_seed"] = cfg.master_seed;
  manifest["seeds"] = {
      {"factual_rollouts", derive_seed(cfg.master_seed, seed_stream::kFactualRollout)},
      {"cf_rollouts", derive_seed(cfg.master_seed, seed_stream::kCfRollout)},
      {"ate", derive_seed(cfg.master_seed, seed_stream::kAte)}};
  manifest["counts"] = {{"factual", static_cast<int>(data.factual.size())},
                        {"counterfactual", static_cast<int>(data.counterfactual.size())},
                        {"cf_envs", static_cast<int>(cf_layouts.size())},
                        {"ate_rollouts_per_side", cfg.ate_rollouts}};
  manifest["beta"] = cfg.beta;
  manifest["failsafe"] = {{"collect", cfg.failsafe_flags.collect},
                          {"explore_steps", cfg.failsafe.explore_steps}};
  manifest["ate"] = std::move(ate_rows);
  manifest["layouts"] = std::move(layouts);
  detail::write_json(paths.data_manifest(), manifest);
}

inline CollectedData load_collected(const std::string& out_dir) {
  const RunPaths paths(out_dir);
  CollectedData data;
  data.source = layout_from_json(detail::read_json(paths.source_layout()));
  data.cf_layouts = load_layouts_jsonl(paths.cf_layouts());
  data.factual = load_trajectories_jsonl(paths.factual_data().string());
  data.counterfactual = load_trajectories_jsonl(paths.cf_data().string());
  const Json ate_json = detail::read_json(paths.ate_table());
  for (const auto& row : ate_json.at("entries")) {
    data.ate.push_back(ate_from_json(row));
  }
  data.layout_map.emplace(layout_hash(data.source), data.source);
  for (const GridLayout& l : data.cf_layouts) data.layout_map.emplace(layout_hash(l), l);
  return data;
}

// --- train -------------------------------------------------------------------

// Variant selects the dataset composition and the weighting temperature:
// the ate variants use cfg.beta, the rest use beta = 0 (uniform).
inline WeightedDataset dataset_for_variant(const ExperimentConfig& cfg, const CollectedData& data,
                                           Variant v) {
  if (v == Variant::Source) throw UsageError("dataset_for_variant: source is not trained");
  std::vector<Trajectory> trajectories;
  if (variant_uses_factual(v)) {
    trajectories.insert(trajectories.end(), data.factual.begin(), data.factual.end());
  }
  if (variant_uses_counterfactual(v)) {
    trajectories.insert(trajectories.end(), data.counterfactual.begin(),
                        data.counterfactual.end());
  }
  std::unordered_map<uint64_t, double> ate_map;
  ate_map.emplace(layout_hash(data.source), 0.0);  // the source is its own baseline
  for (const AteEstimate& e : data.ate) ate_map.emplace(e.layout_id, e.ate);

  const double beta = variant_uses_ate_weights(v) ? cfg.beta : 0.0;
  WeightedDataset ds = build_weights(std::move(trajectories), ate_map, beta, data.layout_map);
  ds.manifest["variant"] = variant_name(v);
  ds.manifest["beta"] = beta;
  ds.manifest["n_trajectories"] = static_cast<int>(ds.trajectories.size());
  ds.manifest["uses_factual"] = variant_uses_factual(v);
  ds.manifest["uses_counterfactual"] = variant_uses_counterfactual(v);
  return ds;
}

struct TrainedVariant {
  DTModel<float> model;
  TrainResult result;
};

inline TrainedVariant train_variant(const ExperimentConfig& cfg, const CollectedData& data,
                                    Variant v) {
  WeightedDataset ds = dataset_for_variant(cfg, data, v);
  DTConfig dt_cfg = cfg.dt;
  dt_cfg.seed = derive_seed(cfg.master_seed, seed_stream::kTrainInit,
                            static_cast<uint64_t>(static_cast<int>(v)));
  TrainedVariant out{init_model<float>(dt_cfg), {}};
  out.result = train_dt(out.model, ds, dt_cfg);
  return out;
}

inline void save_loss_trace(const fs::path& path, const TrainResult& result) {
  std::string csv = "step,loss\n";
  for (const auto& [step, loss] : result.loss_trace) {
    csv += std::to_string(step) + "," + detail::format_double(loss) + "\n";
  }
  detail::write_text(path, csv);
}

inline void cmd_train(const ExperimentConfig& cfg, const std::string& out_dir, Variant v) {
  cfg.validate();
  if (v == Variant::Source) throw UsageError("cmd_train: the source agent is not trained");
  const RunPaths paths(out_dir);
  const CollectedData data = load_collected(out_dir);
  TrainedVariant trained = train_variant(cfg, data, v);
  fs::create_directories(paths.checkpoints_dir());
  save_checkpoint(paths.checkpoint(v).string(), trained.model);
  save_loss_trace(paths.loss_trace(v), trained.result);
}

// --- eval --------------------------------------------------------------------

struct RunReport {
  std::string agent;
  int n_episodes = 0;
  double mean_total_return = 0.0;
  double mean_episode_length = 0.0;
  double goal_rate = 0.0;
  std::vector<int> histogram_counts;  // 20 bins over (0, 1]
  int failure_count = 0;              // returns <= 0 (the failure spike)
  double wall_clock_seconds = 0.0;    // reported separately to keep reports byte-stable
};

inline constexpr int kHistogramBins = 20;

inline RunReport summarize_episodes(const std::string& agent,
                                    const std::vector<EpisodeResult>& episodes) {
  RunReport r;
  r.agent = agent;
  r.n_episodes = static_cast<int>(episodes.size());
  r.histogram_counts.assign(kHistogramBins, 0);
  if (episodes.empty()) return r;
  double sum_ret = 0.0, sum_len = 0.0;
  int goals = 0;
  for (const EpisodeResult& e : episodes) {
    sum_ret += e.total_return;
    sum_len += e.length;
    goals += e.reached_goal ? 1 : 0;
    if (e.total_return <= 0.0) {
      r.failure_count += 1;
    } else {
      // bins are (i/20, (i+1)/20]
      int bin = static_cast<int>(std::ceil(e.total_return * kHistogramBins)) - 1;
      bin = std::min(std::max(bin, 0), kHistogramBins - 1);
      r.histogram_counts[bin] += 1;
    }
  }
  r.mean_total_return = sum_ret / r.n_episodes;
  r.mean_episode_length = sum_len / r.n_episodes;
  r.goal_rate = static_cast<double>(goals) / r.n_episodes;
  return r;
}

// Source baseline on one layout; fail-safe only if configured for baselines.
inline EpisodeResult eval_policy_episode(const PolicyTable& policy, const GridLayout& layout,
                                         const RewardSpec& spec,
                                         const std::optional<FailSafeConfig>& failsafe,
                                         uint64_t seed) {
  EpisodeResult out;
  out.layout_id = layout_hash(layout);
  std::optional<FailSafeState> fs_state;
  if (failsafe) fs_state.emplace(*failsafe, seed);
  EnvState state = reset(layout);
  bool bumped_last = false;
  while (!is_terminal(state, spec)) {
    const Action a =
        failsafe
            ? fs_state->select([&](const EnvState& s) { return act(policy, s); }, state,
                               bumped_last, *failsafe)
            : act(policy, state);
    const StepResult r = step(state, a, spec);
    out.total_return += r.reward;
    out.length += 1;
    bumped_last = r.bumped;
    state = r.state;
    if (r.done) break;
  }
  out.reached_goal = state.pos == layout.goal;
  return out;
}

inline Json report_to_json(const RunReport& r) {
  Json edges = Json::array();
  for (int i = 0; i <= kHistogramBins; ++i) {
    edges.push_back(static_cast<double>(i) / kHistogramBins);
  }
  Json j;
  j["agent"] = r.agent;
  j["n_episodes"] = r.n_episodes;
  j["mean_total_return"] = r.mean_total_return;
  j["mean_episode_length"] = r.mean_episode_length;
  j["goal_rate"] = r.goal_rate;
  j["histogram"] = {{"failure_count", r.failure_count},
                    {"bin_edges", std::move(edges)},
                    {"counts", r.histogram_counts}};
  return j;
}

inline Json cmd_eval(const ExperimentConfig& cfg, const std::string& out_dir, Variant v) {
  cfg.validate();
  const RunPaths paths(out_dir);
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<GridLayout> targets = load_layouts_jsonl(paths.target_layouts());
  std::vector<EpisodeResult> episodes;
  if (v == Variant::Source) {
    const GridLayout source = layout_from_json(detail::read_json(paths.source_layout()));
    const PolicyTable policy = solve_policy(source, cfg.reward);
    const std::optional<FailSafeConfig> fs =
        cfg.failsafe_flags.baseline_eval ? std::optional<FailSafeConfig>(cfg.failsafe)
                                         : std::nullopt;
    for (int rep = 0; rep < cfg.eval_episodes_per_layout; ++rep) {
      for (size_t i = 0; i < targets.size(); ++i) {
        episodes.push_back(eval_policy_episode(
            policy, targets[i], cfg.reward, fs,
            derive_seed(cfg.master_seed, seed_stream::kEval,
                        static_cast<uint64_t>(rep) * targets.size() + i)));
      }
    }
  } else {
    DTModel<float> model = load_checkpoint<float>(paths.checkpoint(v).string());
    for (int rep = 0; rep < cfg.eval_episodes_per_layout; ++rep) {
      auto batch_results = evaluate_dt(model, targets, cfg.reward, model.config);
      episodes.insert(episodes.end(), batch_results.begin(), batch_results.end());
    }
  }
  const RunReport report = summarize_episodes(variant_name(v), episodes);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // CSV fragment: one row per episode with provenance
  std::string csv = "layout_id,total_return,length,reached_goal,agent_variant,seed\n";
  for (const EpisodeResult& e : episodes) {
    csv += layout_id_hex(e.layout_id) + "," + detail::format_double(e.total_return) + "," +
           std::to_string(e.length) + "," + (e.reached_goal ? "1" : "0") + "," +
           variant_name(v) + "," + std::to_string(cfg.master_seed) + "\n";
  }
  fs::create_directories(paths.eval_dir());
  detail::write_text(paths.eval_csv(v), csv);

  Json j = report_to_json(report);
  j["seed"] = cfg.master_seed;
  j["scenario"] = cfg.scenario;
  j["provenance"] = {{"variant", variant_name(v)},
                     {"beta", v != Variant::Source && variant_uses_ate_weights(v) ? cfg.beta : 0.0},
                     {"uses_factual", v != Variant::Source && variant_uses_factual(v)},
                     {"uses_counterfactual",
                      v != Variant::Source && variant_uses_counterfactual(v)},
                     {"failsafe_enabled", v == Variant::Source && cfg.failsafe_flags.baseline_eval}};
  detail::write_json(paths.eval_json(v), j);
  detail::write_json(paths.timing(v), Json{{"agent", variant_name(v)},
                                           {"wall_clock_seconds", wall}});
  return j;
}

// --- report ------------------------------------------------------------------

inline Json cmd_report(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const RunPaths paths(out_dir);
  Json agents = Json::object();
  for (Variant v : kAllVariants) {
    if (!fs::exists(paths.eval_json(v))) {
      throw DataError(std::string("cmd_report: missing eval fragment for ") + variant_name(v));
    }
    agents[variant_name(v)] = detail::read_json(paths.eval_json(v));
  }
  auto goal_rate = [&agents](Variant v) {
    return agents.at(variant_name(v)).at("goal_rate").get<double>();
  };
  const double source = goal_rate(Variant::Source);
  const double dt_f = goal_rate(Variant::DtF);
  const double dt_fcf = goal_rate(Variant::DtFcf);
  const double dt_fcf_ate = goal_rate(Variant::DtFcfAte);

  Json orderings;
  orderings["goal_rate_gap_fcf_ate_minus_fcf"] = dt_fcf_ate - dt_fcf;
  orderings["goal_rate_gap_fcf_minus_f"] = dt_fcf - dt_f;
  orderings["goal_rate_gap_fcf_ate_minus_source"] = dt_fcf_ate - source;
  orderings["goal_rate_gap_fcf_ate_minus_f"] = dt_fcf_ate - dt_f;
  orderings["fcf_ate_ge_fcf_plus_10pts"] = dt_fcf_ate >= dt_fcf + 0.10;
  orderings["fcf_ge_f_plus_10pts"] = dt_fcf >= dt_f + 0.10;
  orderings["fcf_ate_ge_source_plus_20pts"] = dt_fcf_ate >= source + 0.20;
  orderings["fcf_ate_ge_f_plus_10pts"] = dt_fcf_ate >= dt_f + 0.10;

  Json report;
  report["config"] = experiment_config_to_json(cfg);
  report["master_seed"] = cfg.master_seed;
  report["scenario"] = cfg.scenario;
  report["agents"] = std::move(agents);
  report["orderings"] = std::move(orderings);
  detail::write_json(paths.report_json(), report);

  std::string csv = "agent,mean_total_return,mean_episode_length,goal_rate,n_episodes\n";
  for (Variant v : kAllVariants) {
    const Json& a = report.at("agents").at(variant_name(v));
    csv += std::string(variant_name(v)) + "," +
           detail::format_double(a.at("mean_total_return").get<double>()) + "," +
           detail::format_double(a.at("mean_episode_length").get<double>()) + "," +
           detail::format_double(a.at("goal_rate").get<double>()) + "," +
           std::to_string(a.at("n_episodes").get<int>()) + "\n";
  }
  detail::write_text(paths.report_csv(), csv);
  return report;
}

// --- pipeline ----------------------------------------------------------------

// gen + collect + train/eval each requested DT variant + source eval; report
// only when every agent was evaluated. Training and evaluation of distinct
// variants are independent; they run concurrently unless cfg.deterministic.
inline void run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir,
                         const std::vector<Variant>& dt_variants = {kDtVariants.begin(),
                                                                    kDtVariants.end()}) {
  cfg.validate();
  cmd_gen(cfg, out_dir);
  cmd_collect(cfg, out_dir);

  const RunPaths paths(out_dir);
  const CollectedData data = load_collected(out_dir);
  auto train_and_save = [&cfg, &data, &paths](Variant v) {
    TrainedVariant trained = train_variant(cfg, data, v);
    fs::create_directories(paths.checkpoints_dir());
    save_checkpoint(paths.checkpoint(v).string(), trained.model);
    save_loss_trace(paths.loss_trace(v), trained.result);
  };

  if (cfg.deterministic) {
    for (Variant v : dt_variants) train_and_save(v);
  } else {
    std::vector<std::future<void>> jobs;
    for (Variant v : dt_variants) {
      jobs.push_back(std::async(std::launch::async, train_and_save, v));
    }
    for (auto& j : jobs) j.get();
  }

  cmd_eval(cfg, out_dir, Variant::Source);
  for (Variant v : dt_variants) cmd_eval(cfg, out_dir, v);

  const bool all_present = [&paths]() {
    for (Variant v : kAllVariants) {
      if (!fs::exists(paths.eval_json(v))) return false;
    }
    return true;
  }();
  if (all_present) cmd_report(cfg, out_dir);
}

}  // namespace cfdt
