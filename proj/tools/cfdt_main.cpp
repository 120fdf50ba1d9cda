#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cfdt/experiment.hpp"

// Pipeline driver. Subcommands communicate through files in the run
// directory, so each stage can run as its own process:
//
//   cfdt gen     --config cfg.json --out run/
//   cfdt collect --config cfg.json --out run/
//   cfdt train   --config cfg.json --out run/ --variant dt-fcf-ate
//   cfdt eval    --config cfg.json --out run/ --variant source
//   cfdt report  --config cfg.json --out run/
//   cfdt pipeline --config cfg.json --out run/
//
// --seed, --scenario and --deterministic override the config file.

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::string scenario;
  uint64_t seed = 0;
  bool seed_set = false;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "experiment config (JSON or key=value lines)");
  cmd->add_option("--out", opts.out_dir, "run directory")->required();
  cmd->add_option("--scenario", opts.scenario, "easy or hard (overrides config)");
  cmd->add_option("--seed", opts.seed, "master seed (overrides config)")
      ->each([&opts](const std::string&) { opts.seed_set = true; });
  cmd->add_flag("--deterministic", opts.deterministic,
                "run variants sequentially in a single thread");
}

cfdt::ExperimentConfig resolve_config(const CommonOpts& opts) {
  cfdt::ExperimentConfig cfg;
  if (!opts.config_path.empty()) {
    cfg = cfdt::load_experiment_config(opts.config_path);
  } else {
    cfg.normalize();
  }
  if (opts.seed_set) cfg.master_seed = opts.seed;
  if (!opts.scenario.empty()) cfg.scenario = opts.scenario;
  if (opts.deterministic) cfg.deterministic = true;
  cfg.normalize();
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"counterfactual-rollout transfer pipeline for obstacle gridworlds"};
  app.require_subcommand(1);

  CommonOpts gen_o, collect_o, train_o, eval_o, report_o, pipe_o;
  std::string train_variant, eval_variant, pipe_variants;

  CLI::App* gen = app.add_subcommand("gen", "generate source/counterfactual/target layouts");
  add_common(gen, gen_o);
  CLI::App* collect = app.add_subcommand("collect", "collect rollouts and the ATE table");
  add_common(collect, collect_o);
  CLI::App* train = app.add_subcommand("train", "train one DT variant");
  add_common(train, train_o);
  train->add_option("--variant", train_variant, "dt-f|dt-cf|dt-fcf|dt-cf-ate|dt-fcf-ate")
      ->required();
  CLI::App* eval = app.add_subcommand("eval", "evaluate one agent on the target layouts");
  add_common(eval, eval_o);
  eval->add_option("--variant", eval_variant, "source|dt-f|dt-cf|dt-fcf|dt-cf-ate|dt-fcf-ate")
      ->required();
  CLI::App* report = app.add_subcommand("report", "consolidate eval fragments");
  add_common(report, report_o);
  CLI::App* pipe = app.add_subcommand("pipeline", "run gen, collect, train, eval and report");
  add_common(pipe, pipe_o);
  pipe->add_option("--variants", pipe_variants,
                   "comma-separated DT variants (default: all five)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      cfdt::cmd_gen(resolve_config(gen_o), gen_o.out_dir);
      std::printf("gen: wrote layouts under %s\n", gen_o.out_dir.c_str());
    } else if (collect->parsed()) {
      cfdt::cmd_collect(resolve_config(collect_o), collect_o.out_dir);
      std::printf("collect: wrote datasets under %s\n", collect_o.out_dir.c_str());
    } else if (train->parsed()) {
      const auto v = cfdt::variant_from_name(train_variant);
      cfdt::cmd_train(resolve_config(train_o), train_o.out_dir, v);
      std::printf("train: wrote checkpoint for %s\n", train_variant.c_str());
    } else if (eval->parsed()) {
      const auto v = cfdt::variant_from_name(eval_variant);
      const cfdt::Json j = cfdt::cmd_eval(resolve_config(eval_o), eval_o.out_dir, v);
      std::printf("eval %s: goal_rate=%.3f mean_return=%.4f mean_length=%.2f\n",
                  eval_variant.c_str(), j.at("goal_rate").get<double>(),
                  j.at("mean_total_return").get<double>(),
                  j.at("mean_episode_length").get<double>());
    } else if (report->parsed()) {
      const cfdt::Json j = cfdt::cmd_report(resolve_config(report_o), report_o.out_dir);
      std::printf("report: wrote %s\n",
                  (cfdt::RunPaths(report_o.out_dir).report_json()).string().c_str());
      for (const auto& [agent, metrics] : j.at("agents").items()) {
        std::printf("  %-12s goal_rate=%.3f mean_return=%+.4f mean_length=%.2f\n", agent.c_str(),
                    metrics.at("goal_rate").get<double>(),
                    metrics.at("mean_total_return").get<double>(),
                    metrics.at("mean_episode_length").get<double>());
      }
    } else if (pipe->parsed()) {
      std::vector<cfdt::Variant> variants(cfdt::kDtVariants.begin(), cfdt::kDtVariants.end());
      if (!pipe_variants.empty()) {
        variants.clear();
        std::string rest = pipe_variants;
        size_t pos;
        while ((pos = rest.find(',')) != std::string::npos) {
          variants.push_back(cfdt::variant_from_name(rest.substr(0, pos)));
          rest = rest.substr(pos + 1);
        }
        if (!rest.empty()) variants.push_back(cfdt::variant_from_name(rest));
      }
      cfdt::run_pipeline(resolve_config(pipe_o), pipe_o.out_dir, variants);
      std::printf("pipeline: finished under %s\n", pipe_o.out_dir.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
