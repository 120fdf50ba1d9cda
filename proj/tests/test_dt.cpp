#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "cfdt/dt.hpp"
#include "cfdt/policy.hpp"

using namespace cfdt;

namespace {

DTConfig tiny_config(int obs_dim, uint64_t seed = 1) {
  DTConfig cfg;
  cfg.context_k = 3;
  cfg.embed_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.dropout = 0.0;
  cfg.obs_dim = obs_dim;
  cfg.max_timestep = 10;
  cfg.batch_size = 2;
  cfg.seed = seed;
  return cfg;
}

DTConfig small_config(int obs_dim, uint64_t seed = 1) {
  DTConfig cfg;
  cfg.context_k = 10;
  cfg.embed_dim = 32;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.dropout = 0.1;
  cfg.obs_dim = obs_dim;
  cfg.max_timestep = 100;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;
  cfg.seed = seed;
  return cfg;
}

// Random-but-valid window batch over a real layout.
Batch random_batch(const GridLayout& g, int b_n, int k_n, uint64_t seed, int min_real = 1) {
  Batch batch;
  batch.resize(b_n, k_n, observation_dim(g.width, g.height));
  Rng rng(seed);
  for (int b = 0; b < b_n; ++b) {
    const int n_real = min_real + rng.below(k_n - min_real + 1);
    const int pad = k_n - n_real;
    for (int i = 0; i < n_real; ++i) {
      const size_t at = static_cast<size_t>(b) * k_n + pad + i;
      batch.returns[at] = static_cast<float>(rng.uniform() * 2.0 - 1.0);
      batch.actions[at] = rng.below(3);
      batch.timesteps[at] = i;
      batch.mask[at] = 1;
      const Cell pos{1 + rng.below(g.width - 2), 1 + rng.below(g.height - 2)};
      write_observation(g, pos, static_cast<Heading>(rng.below(4)),
                        batch.obs.data() + at * batch.obs_dim);
    }
  }
  return batch;
}

WeightedDataset single_trajectory_dataset(const GridLayout& g, const PolicyTable& policy,
                                          const RewardSpec& spec) {
  std::vector<Trajectory> trajs = {rollout(g, policy, spec, std::nullopt, 0)};
  std::unordered_map<uint64_t, GridLayout> layouts{{layout_hash(g), g}};
  return build_weights(std::move(trajs), {{layout_hash(g), 0.0}}, 0.0, layouts);
}

}  // namespace

TEST_CASE("forward shapes and batch independence") {
  const GridLayout g = generate_layout(3, 6, 6, 3);
  DTConfig cfg = tiny_config(observation_dim(6, 6));
  cfg.context_k = 20;
  auto model = init_model<float>(cfg);

  const Batch batch = random_batch(g, 2, 20, 9);
  nn::Tape<float> tape;
  auto logits = dt_forward(tape, model, batch);
  CHECK(logits->shape == std::vector<int>{2, 20, 3});

  SECTION("permuting the batch permutes the outputs") {
    Batch swapped = batch;
    const int k_n = batch.context;
    auto swap_rows = [&](auto& vec, int stride) {
      for (int i = 0; i < stride; ++i) std::swap(vec[i], vec[stride + i]);
    };
    swap_rows(swapped.returns, k_n);
    swap_rows(swapped.actions, k_n);
    swap_rows(swapped.timesteps, k_n);
    swap_rows(swapped.mask, k_n);
    swap_rows(swapped.obs, k_n * batch.obs_dim);
    nn::Tape<float> tape2;
    auto logits2 = dt_forward(tape2, model, swapped);
    const int64_t row = static_cast<int64_t>(k_n) * 3;
    for (int64_t i = 0; i < row; ++i) {
      REQUIRE(logits2->value[i] == logits->value[row + i]);
      REQUIRE(logits2->value[row + i] == logits->value[i]);
    }
  }

  SECTION("context mismatch throws") {
    Batch bad = random_batch(g, 1, 5, 2);
    nn::Tape<float> t;
    CHECK_THROWS_AS(dt_forward(t, model, bad), UsageError);
  }
}

TEST_CASE("padded positions contribute zero loss") {
  const GridLayout g = generate_layout(3, 6, 6, 3);
  DTConfig cfg = tiny_config(observation_dim(6, 6));
  cfg.context_k = 8;
  auto model = init_model<float>(cfg);

  Batch batch = random_batch(g, 3, 8, 11, 2);  // at least 2 real steps per row
  nn::Tape<float> t1;
  const float loss1 = dt_loss(t1, model, batch)->value[0];

  // scribble over every padded slot; the loss must not move at all
  Batch scribbled = batch;
  for (int b = 0; b < batch.batch_size; ++b) {
    for (int k = 0; k < batch.context; ++k) {
      const size_t at = static_cast<size_t>(b) * batch.context + k;
      if (scribbled.mask[at]) continue;
      scribbled.returns[at] = 123.0f;
      scribbled.actions[at] = 2;
      scribbled.timesteps[at] = 7;
      for (int d = 0; d < batch.obs_dim; ++d) scribbled.obs[at * batch.obs_dim + d] = -3.0f;
    }
  }
  nn::Tape<float> t2;
  const float loss2 = dt_loss(t2, model, scribbled)->value[0];
  CHECK(loss1 == loss2);
}

TEST_CASE("causality: future tokens never change past logits") {
  const GridLayout g = generate_layout(5, 6, 6, 3);
  DTConfig cfg = tiny_config(observation_dim(6, 6), 3);
  cfg.context_k = 6;
  auto model = init_model<float>(cfg);
  Rng rng(31);

  for (int probe = 0; probe < 25; ++probe) {
    Batch batch = random_batch(g, 2, 6, 1000 + probe, 6);  // fully real windows
    nn::Tape<float> t1;
    auto before = dt_forward(t1, model, batch);

    const int b = rng.below(2);
    const int j = 1 + rng.below(5);  // perturbed triplet
    const int what = rng.below(3);
    Batch perturbed = batch;
    const size_t at = static_cast<size_t>(b) * 6 + j;
    if (what == 0) perturbed.returns[at] += 1.5f;
    if (what == 1) perturbed.obs[at * batch.obs_dim + 5] += 2.0f;
    if (what == 2) perturbed.actions[at] = (perturbed.actions[at] + 1) % 3;
    nn::Tape<float> t2;
    auto after = dt_forward(t2, model, perturbed);

    // positions strictly before the perturbed triplet are bit-identical;
    // an action perturbation at j cannot even reach the state logit at j
    const int unchanged_until = what == 2 ? j + 1 : j;
    for (int bb = 0; bb < 2; ++bb) {
      const int limit = bb == b ? unchanged_until : 6;
      for (int k = 0; k < limit; ++k) {
        for (int a = 0; a < 3; ++a) {
          REQUIRE(before->value[(static_cast<int64_t>(bb) * 6 + k) * 3 + a] ==
                  after->value[(static_cast<int64_t>(bb) * 6 + k) * 3 + a]);
        }
      }
    }
  }
}

TEST_CASE("composed tiny-DT loss passes finite differences") {
  const GridLayout g = generate_layout(7, 4, 4, 1);
  DTConfig cfg = tiny_config(observation_dim(4, 4), 5);
  auto model = init_model<double>(cfg);
  const Batch batch = random_batch(g, 2, 3, 77, 1);

  auto params = model.parameters();
  for (const auto& p : params) p->zero_grad();
  nn::Tape<double> tape;
  auto loss = dt_loss(tape, model, batch);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p->grad);

  const double h = 1e-5;
  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (int64_t i = 0; i < params[pi]->size(); ++i) {
      const double orig = params[pi]->value[i];
      params[pi]->value[i] = orig + h;
      nn::Tape<double> tp;
      const double lp = dt_loss(tp, model, batch)->value[0];
      params[pi]->value[i] = orig - h;
      nn::Tape<double> tm;
      const double lm = dt_loss(tm, model, batch)->value[0];
      params[pi]->value[i] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[pi][i];
      max_err = std::max(max_err,
                         std::abs(an - fd) / std::max({1e-6, std::abs(an), std::abs(fd)}));
    }
  }
  CHECK(max_err < 1e-3);
}

TEST_CASE("loss at initialization is about ln 3") {
  const GridLayout g = generate_layout(3, 8, 8, 6);
  RewardSpec spec;
  const PolicyTable policy = solve_policy(g, spec);
  auto ds = single_trajectory_dataset(g, policy, spec);

  DTConfig cfg = small_config(observation_dim(8, 8), 2);
  auto model = init_model<float>(cfg);
  Rng rng(4);
  const Batch batch = sample_batch(ds, 16, cfg.context_k, rng);
  nn::Tape<float> tape;
  const double loss = dt_loss(tape, model, batch)->value[0];
  CHECK(loss == Catch::Approx(std::log(3.0)).margin(0.1));
}

TEST_CASE("single-trajectory overfit reaches 99 percent accuracy") {
  const GridLayout g = generate_layout(3, 8, 8, 6);
  RewardSpec spec;
  const PolicyTable policy = solve_policy(g, spec);
  auto ds = single_trajectory_dataset(g, policy, spec);
  const Trajectory& traj = ds.trajectories.front();

  DTConfig cfg = small_config(observation_dim(8, 8), 3);
  cfg.training_steps = 2000;
  auto model = init_model<float>(cfg);
  train_dt(model, ds, cfg);
  CHECK(action_accuracy(model, traj, g) >= 0.99);
}

TEST_CASE("training is reproducible and beta=0 matches uniform weighting") {
  const GridLayout g = generate_layout(3, 8, 8, 6);
  RewardSpec spec;
  const PolicyTable policy = solve_policy(g, spec);
  auto ds = single_trajectory_dataset(g, policy, spec);

  DTConfig cfg = small_config(observation_dim(8, 8), 9);
  cfg.training_steps = 30;

  auto m1 = init_model<float>(cfg);
  auto m2 = init_model<float>(cfg);
  const auto r1 = train_dt(m1, ds, cfg);
  const auto r2 = train_dt(m2, ds, cfg);
  CHECK(r1.loss_trace == r2.loss_trace);
  const auto p1 = m1.parameters();
  const auto p2 = m2.parameters();
  for (size_t i = 0; i < p1.size(); ++i) {
    REQUIRE(p1[i]->value == p2[i]->value);  // bitwise
  }

  SECTION("loss trace records step 1 and every hundredth step") {
    DTConfig longer = cfg;
    longer.training_steps = 250;
    auto m = init_model<float>(longer);
    const auto r = train_dt(m, ds, longer);
    std::vector<int> steps;
    for (const auto& [s, l] : r.loss_trace) steps.push_back(s);
    CHECK(steps == std::vector<int>{1, 100, 200});
  }
}

TEST_CASE("act_dt") {
  const GridLayout g = generate_layout(3, 8, 8, 6);
  DTConfig cfg = small_config(observation_dim(8, 8), 10);
  auto model = init_model<float>(cfg);
  const auto obs = make_observation(g, {2, 2}, Heading::East);

  SECTION("empty history is handled and deterministic") {
    const Action a1 = act_dt(model, {}, obs, 1.0);
    const Action a2 = act_dt(model, {}, obs, 1.0);
    CHECK(a1 == a2);
  }

  SECTION("only the last K-1 history steps matter") {
    std::vector<HistoryStep> hist;
    Rng rng(6);
    for (int i = 0; i < 30; ++i) {
      hist.push_back({rng.uniform(),
                      make_observation(g, {1 + rng.below(6), 1 + rng.below(6)},
                                       static_cast<Heading>(rng.below(4))),
                      static_cast<Action>(rng.below(3))});
    }
    // same suffix, different prefix: identical action
    std::vector<HistoryStep> prefix_changed = hist;
    prefix_changed[0].rtg = -5.0;
    prefix_changed[2].action = Action::TurnLeft;
    CHECK(act_dt(model, hist, obs, 0.5) == act_dt(model, prefix_changed, obs, 0.5));
  }

  SECTION("greedy action is invariant to a constant logit shift") {
    std::vector<HistoryStep> hist = {{0.9, obs, Action::Forward}};
    const Action before = act_dt(model, hist, obs, 0.9);
    for (auto& v : model.head_b->value) v += 7.5f;
    const Action after = act_dt(model, hist, obs, 0.9);
    CHECK(before == after);
  }
}

TEST_CASE("batched evaluation matches single-state acting") {
  const GridLayout g = generate_layout(3, 8, 8, 6);
  RewardSpec spec;
  const PolicyTable policy = solve_policy(g, spec);
  auto ds = single_trajectory_dataset(g, policy, spec);

  DTConfig cfg = small_config(observation_dim(8, 8), 11);
  cfg.training_steps = 200;
  auto model = init_model<float>(cfg);
  train_dt(model, ds, cfg);

  std::vector<GridLayout> layouts;
  for (int i = 0; i < 5; ++i) layouts.push_back(intervene(g, 9000 + i, 6));
  const auto batched = evaluate_dt(model, layouts, spec, cfg);

  for (size_t i = 0; i < layouts.size(); ++i) {
    // replay the same episode with act_dt one state at a time
    EnvState s = reset(layouts[i]);
    std::vector<HistoryStep> hist;
    double rtg = cfg.eval_target_return;
    double total = 0.0;
    int length = 0;
    bool reached = false;
    while (!is_terminal(s, spec)) {
      const auto obs = observe(s);
      const Action a = act_dt(model, hist, obs, rtg);
      const StepResult r = step(s, a, spec);
      hist.push_back({rtg, obs, a});
      total += r.reward;
      length += 1;
      rtg -= r.reward;
      s = r.state;
      if (r.done) {
        reached = s.pos == layouts[i].goal;
        break;
      }
    }
    CHECK(batched[i].total_return == total);
    CHECK(batched[i].length == length);
    CHECK(batched[i].reached_goal == reached);
  }
}

TEST_CASE("overfit model reaches the goal on its own layout") {
  const GridLayout g = generate_layout(3, 8, 8, 6);
  RewardSpec spec;
  const PolicyTable policy = solve_policy(g, spec);
  auto ds = single_trajectory_dataset(g, policy, spec);

  DTConfig cfg = small_config(observation_dim(8, 8), 12);
  cfg.training_steps = 600;
  auto model = init_model<float>(cfg);
  train_dt(model, ds, cfg);
  REQUIRE(action_accuracy(model, ds.trajectories.front(), g) >= 0.99);

  const auto results = evaluate_dt(model, {g}, spec, cfg);
  REQUIRE(results.size() == 1);
  CHECK(results[0].reached_goal);
  CHECK(results[0].total_return > 0.0);
  CHECK(results[0].length == ds.trajectories.front().episode_length());
}

TEST_CASE("checkpoint round trip is byte-exact") {
  const GridLayout g = generate_layout(3, 8, 8, 6);
  DTConfig cfg = small_config(observation_dim(8, 8), 13);
  auto model = init_model<float>(cfg);

  namespace fsys = std::filesystem;
  const auto dir = fsys::temp_directory_path() / "cfdt_ckpt_test";
  fsys::create_directories(dir);
  const auto p1 = dir / "a.ckpt";
  const auto p2 = dir / "b.ckpt";
  save_checkpoint(p1.string(), model);
  auto loaded = load_checkpoint<float>(p1.string());
  save_checkpoint(p2.string(), loaded);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);
  CHECK(loaded.config.embed_dim == cfg.embed_dim);

  // the loaded model acts identically
  const auto obs = make_observation(g, {3, 3}, Heading::North);
  CHECK(act_dt(model, {}, obs, 1.0) == act_dt(loaded, {}, obs, 1.0));

  SECTION("double-precision load of a float checkpoint is rejected") {
    CHECK_THROWS_AS(load_checkpoint<double>(p1.string()), DataError);
  }
  fsys::remove_all(dir);
}
