#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <unordered_set>

#include "cfdt/experiment.hpp"

using namespace cfdt;
namespace fsys = std::filesystem;

namespace {

ExperimentConfig tiny_config(uint64_t seed = 1, const std::string& scenario = "easy") {
  ExperimentConfig cfg;
  cfg.width = 8;
  cfg.height = 8;
  cfg.n_obstacles_source = 6;
  cfg.scenario = scenario;
  cfg.n_cf_envs = 15;
  cfg.n_target_envs = 10;
  cfg.n_factual_rollouts = 10;
  cfg.rollouts_per_env = 2;
  cfg.ate_rollouts = 2;
  cfg.reward.horizon = 40;
  cfg.dt.context_k = 8;
  cfg.dt.embed_dim = 16;
  cfg.dt.layers = 1;
  cfg.dt.heads = 2;
  cfg.dt.batch_size = 8;
  cfg.dt.training_steps = 60;
  cfg.dt.learning_rate = 1e-3;
  cfg.master_seed = seed;
  cfg.normalize();
  return cfg;
}

std::string slurp(const fsys::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempDir {
  fsys::path path;
  explicit TempDir(const std::string& name)
      : path(fsys::temp_directory_path() / ("cfdt_test_" + name)) {
    fsys::remove_all(path);
    fsys::create_directories(path);
  }
  ~TempDir() { fsys::remove_all(path); }
};

}  // namespace

TEST_CASE("gen writes layouts with disjoint hash sets") {
  TempDir dir("gen");
  const ExperimentConfig cfg = tiny_config(7);
  cmd_gen(cfg, dir.path.string());
  const RunPaths paths(dir.path.string());

  const GridLayout source = layout_from_json(detail::read_json(paths.source_layout()));
  const auto cf = load_layouts_jsonl(paths.cf_layouts());
  const auto target = load_layouts_jsonl(paths.target_layouts());
  CHECK(source.obstacles.size() == 6);
  REQUIRE(static_cast<int>(cf.size()) == cfg.n_cf_envs);
  REQUIRE(static_cast<int>(target.size()) == cfg.n_target_envs);

  std::unordered_set<uint64_t> cf_ids, target_ids;
  for (const auto& l : cf) cf_ids.insert(layout_hash(l));
  for (const auto& l : target) target_ids.insert(layout_hash(l));
  CHECK(cf_ids.size() == cf.size());          // unique within the set
  CHECK(target_ids.size() == target.size());
  for (uint64_t id : target_ids) CHECK_FALSE(cf_ids.count(id));
  CHECK_FALSE(target_ids.count(layout_hash(source)));

  const Json manifest = detail::read_json(paths.manifest());
  CHECK(manifest.at("gen").at("cf_target_hash_intersection_size").get<int>() == 0);
  CHECK(manifest.at("gen").at("n_cf_envs").get<int>() == cfg.n_cf_envs);

  SECTION("same master seed reproduces the manifest byte for byte") {
    TempDir dir2("gen_repeat");
    cmd_gen(cfg, dir2.path.string());
    CHECK(slurp(paths.manifest()) == slurp(RunPaths(dir2.path.string()).manifest()));
    CHECK(slurp(paths.cf_layouts()) == slurp(RunPaths(dir2.path.string()).cf_layouts()));
  }
}

TEST_CASE("gen scenario controls the target obstacle count") {
  TempDir easy_dir("gen_easy");
  TempDir hard_dir("gen_hard");
  cmd_gen(tiny_config(3, "easy"), easy_dir.path.string());
  cmd_gen(tiny_config(3, "hard"), hard_dir.path.string());

  const auto easy_targets = load_layouts_jsonl(RunPaths(easy_dir.path.string()).target_layouts());
  const auto hard_targets = load_layouts_jsonl(RunPaths(hard_dir.path.string()).target_layouts());
  const auto easy_cf = load_layouts_jsonl(RunPaths(easy_dir.path.string()).cf_layouts());
  const auto hard_cf = load_layouts_jsonl(RunPaths(hard_dir.path.string()).cf_layouts());

  for (const auto& l : easy_targets) CHECK(l.obstacles.size() == 6);
  for (const auto& l : hard_targets) CHECK(l.obstacles.size() == 7);
  // counterfactuals keep the source count in both scenarios
  for (const auto& l : easy_cf) CHECK(l.obstacles.size() == 6);
  for (const auto& l : hard_cf) CHECK(l.obstacles.size() == 7 - 1);
}

TEST_CASE("paper-scale draw: 2000 cf vs 1000 target layouts never collide") {
  ExperimentConfig cfg = tiny_config(11);
  cfg.n_cf_envs = 2000;
  cfg.n_target_envs = 1000;
  const GeneratedLayouts gen = generate_all_layouts(cfg);
  std::unordered_set<uint64_t> cf_ids;
  for (const auto& l : gen.cf) cf_ids.insert(layout_hash(l));
  REQUIRE(cf_ids.size() == 2000);
  int collisions = 0;
  for (const auto& l : gen.target) collisions += cf_ids.count(layout_hash(l)) ? 1 : 0;
  CHECK(collisions == 0);
}

TEST_CASE("collect writes datasets, ATE table and manifest") {
  TempDir dir("collect");
  const ExperimentConfig cfg = tiny_config(5);
  cmd_gen(cfg, dir.path.string());
  cmd_collect(cfg, dir.path.string());
  const RunPaths paths(dir.path.string());

  const CollectedData data = load_collected(dir.path.string());
  const uint64_t source_id = layout_hash(data.source);

  REQUIRE(static_cast<int>(data.factual.size()) == cfg.n_factual_rollouts);
  for (const auto& t : data.factual) {
    CHECK(t.layout_id == source_id);
    CHECK(t.provenance == Provenance::Factual);
  }
  REQUIRE(static_cast<int>(data.counterfactual.size()) == cfg.n_cf_envs * cfg.rollouts_per_env);
  for (const auto& t : data.counterfactual) CHECK(t.provenance == Provenance::Counterfactual);

  SECTION("one ATE row per counterfactual layout, in draw order") {
    REQUIRE(data.ate.size() == data.cf_layouts.size());
    for (size_t i = 0; i < data.ate.size(); ++i) {
      CHECK(data.ate[i].layout_id == layout_hash(data.cf_layouts[i]));
      CHECK(data.ate[i].ate ==
            Catch::Approx(data.ate[i].cf_mean_return - data.ate[i].source_mean_return)
                .margin(1e-15));
    }
  }

  SECTION("manifest records counts, seeds and the layout sidecar") {
    const Json m = detail::read_json(paths.data_manifest());
    CHECK(m.at("counts").at("factual").get<int>() == cfg.n_factual_rollouts);
    CHECK(m.at("layouts").size() == data.cf_layouts.size() + 1);
    CHECK(m.at("beta").get<double>() == cfg.beta);
    CHECK(m.contains("seeds"));
  }
}

TEST_CASE("dataset composition per variant") {
  TempDir dir("variants");
  const ExperimentConfig cfg = tiny_config(6);
  cmd_gen(cfg, dir.path.string());
  cmd_collect(cfg, dir.path.string());
  const CollectedData data = load_collected(dir.path.string());
  const uint64_t source_id = layout_hash(data.source);

  SECTION("dt-f trains on factual trajectories only") {
    const auto ds = dataset_for_variant(cfg, data, Variant::DtF);
    REQUIRE(ds.trajectories.size() == data.factual.size());
    for (const auto& t : ds.trajectories) CHECK(t.layout_id == source_id);
    CHECK(ds.beta == 0.0);
  }
  SECTION("dt-cf trains on counterfactual trajectories only") {
    const auto ds = dataset_for_variant(cfg, data, Variant::DtCf);
    REQUIRE(ds.trajectories.size() == data.counterfactual.size());
    CHECK(ds.beta == 0.0);
  }
  SECTION("dt-fcf unions both with uniform weights") {
    const auto ds = dataset_for_variant(cfg, data, Variant::DtFcf);
    REQUIRE(ds.trajectories.size() == data.factual.size() + data.counterfactual.size());
    for (double w : ds.weights) {
      CHECK(w == Catch::Approx(1.0 / ds.trajectories.size()).epsilon(1e-12));
    }
  }
  SECTION("dt-fcf-ate applies the softmax weighting at cfg.beta") {
    const auto ds = dataset_for_variant(cfg, data, Variant::DtFcfAte);
    CHECK(ds.beta == cfg.beta);
    double sum = 0.0;
    for (double w : ds.weights) sum += w;
    CHECK(sum == Catch::Approx(1.0).margin(1e-9));
    // factual trajectories carry ATE 0, the maximum is >= 0, so successful
    // layouts dominate blocked ones
    double min_w = 1.0, max_w = 0.0;
    for (double w : ds.weights) {
      min_w = std::min(min_w, w);
      max_w = std::max(max_w, w);
    }
    CHECK(max_w > min_w);
  }
  SECTION("the source agent has no training dataset") {
    CHECK_THROWS_AS(dataset_for_variant(cfg, data, Variant::Source), UsageError);
  }
}

TEST_CASE("full tiny pipeline: eval fragments, report and determinism") {
  TempDir dir("pipeline_a");
  ExperimentConfig cfg = tiny_config(8);
  cfg.deterministic = true;
  run_pipeline(cfg, dir.path.string());
  const RunPaths paths(dir.path.string());

  SECTION("eval fragments are complete and consistent") {
    for (Variant v : kAllVariants) {
      REQUIRE(fsys::exists(paths.eval_json(v)));
      const Json j = detail::read_json(paths.eval_json(v));
      const double goal_rate = j.at("goal_rate").get<double>();
      CHECK(goal_rate >= 0.0);
      CHECK(goal_rate <= 1.0);
      CHECK(j.at("n_episodes").get<int>() == cfg.n_target_envs);
      int hist_sum = j.at("histogram").at("failure_count").get<int>();
      for (const auto& c : j.at("histogram").at("counts")) hist_sum += c.get<int>();
      CHECK(hist_sum == cfg.n_target_envs);
      // csv fragment: header + one row per episode
      const std::string csv = slurp(paths.eval_csv(v));
      CHECK(static_cast<int>(std::count(csv.begin(), csv.end(), '\n')) ==
            cfg.n_target_envs + 1);
      CHECK(csv.rfind("layout_id,total_return,length,reached_goal,agent_variant,seed", 0) == 0);
    }
  }

  SECTION("report embeds the config and all six agents") {
    const Json report = detail::read_json(paths.report_json());
    CHECK(report.at("agents").size() == 6);
    CHECK(report.at("config").at("master_seed").get<uint64_t>() == cfg.master_seed);
    CHECK(report.at("orderings").contains("fcf_ate_ge_fcf_plus_10pts"));
    const std::string csv = slurp(paths.report_csv());
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);  // header + six agents
  }

  SECTION("loss traces are recorded") {
    const std::string trace = slurp(paths.loss_trace(Variant::DtF));
    CHECK(trace.rfind("step,loss", 0) == 0);
  }

  SECTION("identical config and seed reproduce the run byte for byte") {
    TempDir dir2("pipeline_b");
    run_pipeline(cfg, dir2.path.string());
    const RunPaths paths2(dir2.path.string());
    CHECK(slurp(paths.report_json()) == slurp(paths2.report_json()));
    CHECK(slurp(paths.report_csv()) == slurp(paths2.report_csv()));
    for (Variant v : kAllVariants) {
      CHECK(slurp(paths.eval_json(v)) == slurp(paths2.eval_json(v)));
      CHECK(slurp(paths.eval_csv(v)) == slurp(paths2.eval_csv(v)));
    }
    for (Variant v : kDtVariants) {
      CHECK(slurp(paths.checkpoint(v)) == slurp(paths2.checkpoint(v)));
    }
  }
}

TEST_CASE("report requires every eval fragment") {
  TempDir dir("report_missing");
  const ExperimentConfig cfg = tiny_config(9);
  cmd_gen(cfg, dir.path.string());
  cmd_collect(cfg, dir.path.string());
  cmd_eval(cfg, dir.path.string(), Variant::Source);
  CHECK_THROWS_AS(cmd_report(cfg, dir.path.string()), DataError);
}

TEST_CASE("experiment config loading") {
  TempDir dir("config");

  SECTION("json config") {
    ExperimentConfig cfg = tiny_config(4);
    const auto path = dir.path / "cfg.json";
    detail::write_json(path, experiment_config_to_json(cfg));
    const ExperimentConfig loaded = load_experiment_config(path.string());
    CHECK(experiment_config_to_json(loaded) == experiment_config_to_json(cfg));
  }

  SECTION("key=value config with dotted keys") {
    const auto path = dir.path / "cfg.txt";
    detail::write_text(path,
                       "# comment\n"
                       "scenario = hard\n"
                       "n_cf_envs = 25\n"
                       "beta = 2.5\n"
                       "dt.embed_dim = 24\n"
                       "dt.heads = 3\n"
                       "reward.horizon = 60\n"
                       "failsafe.baseline_eval = true\n"
                       "master_seed = 42\n");
    const ExperimentConfig loaded = load_experiment_config(path.string());
    CHECK(loaded.scenario == "hard");
    CHECK(loaded.n_cf_envs == 25);
    CHECK(loaded.beta == 2.5);
    CHECK(loaded.dt.embed_dim == 24);
    CHECK(loaded.dt.heads == 3);
    CHECK(loaded.reward.horizon == 60);
    CHECK(loaded.failsafe_flags.baseline_eval);
    CHECK(loaded.master_seed == 42);
    CHECK(loaded.n_obstacles_target() == loaded.n_obstacles_source + 1);
    CHECK(loaded.dt.max_timestep == 60);  // normalized from the horizon
  }

  SECTION("invalid scenario is rejected") {
    ExperimentConfig cfg = tiny_config(4);
    cfg.scenario = "medium";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
