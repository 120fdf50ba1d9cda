#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "cfdt/data.hpp"
#include "cfdt/grid.hpp"
#include "cfdt/nn.hpp"
#include "cfdt/rng.hpp"

// Return-conditioned sequence policy: (returns-to-go, observation, action)
// triplets are interleaved into a 3K-token causal stream, action logits are
// read at the state-token positions, and rollout conditions on a target
// return that is decremented by observed rewards.

namespace cfdt {

struct DTConfig {
  int context_k = 20;  // triplets per window
  int embed_dim = 64;
  int layers = 3;
  int heads = 4;
  double dropout = 0.1;
  int action_count = 3;
  int obs_dim = 0;  // width*height*4 + 4, filled from the grid
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 64;
  int training_steps = 10000;
  double eval_target_return = 1.0;
  uint64_t seed = 0;
  int max_timestep = 100;  // timestep embedding covers [0, max_timestep]

  void validate() const {
    if (context_k < 1) throw ConfigError("DTConfig: context_k must be >= 1");
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
      throw ConfigError("DTConfig: embed_dim must be divisible by heads");
    }
    if (layers < 1) throw ConfigError("DTConfig: layers must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("DTConfig: dropout in [0, 1)");
    if (obs_dim < 1) throw ConfigError("DTConfig: obs_dim not set");
    if (action_count < 2) throw ConfigError("DTConfig: action_count must be >= 2");
    if (batch_size < 1 || training_steps < 0) throw ConfigError("DTConfig: bad training sizes");
    if (max_timestep < 1) throw ConfigError("DTConfig: max_timestep must be >= 1");
  }
};

inline Json dtconfig_to_json(const DTConfig& c) {
  Json j;
  j["context_k"] = c.context_k;
  j["embed_dim"] = c.embed_dim;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["dropout"] = c.dropout;
  j["action_count"] = c.action_count;
  j["obs_dim"] = c.obs_dim;
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["training_steps"] = c.training_steps;
  j["eval_target_return"] = c.eval_target_return;
  j["seed"] = c.seed;
  j["max_timestep"] = c.max_timestep;
  return j;
}

inline DTConfig dtconfig_from_json(const Json& j) {
  DTConfig c;
  c.context_k = j.value("context_k", c.context_k);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.dropout = j.value("dropout", c.dropout);
  c.action_count = j.value("action_count", c.action_count);
  c.obs_dim = j.value("obs_dim", c.obs_dim);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.training_steps = j.value("training_steps", c.training_steps);
  c.eval_target_return = j.value("eval_target_return", c.eval_target_return);
  c.seed = j.value("seed", c.seed);
  c.max_timestep = j.value("max_timestep", c.max_timestep);
  return c;
}

template <typename Real>
struct DTModel {
  DTConfig config;

  nn::TensorPtr<Real> ret_w, ret_b;      // (1, C), (C)
  nn::TensorPtr<Real> obs_w, obs_b;      // (obs_dim, C), (C)
  nn::TensorPtr<Real> act_emb;           // (A, C)
  nn::TensorPtr<Real> time_emb;          // (max_timestep + 1, C)
  struct Block {
    nn::TensorPtr<Real> ln1_g, ln1_b;
    nn::TensorPtr<Real> qkv_w, qkv_b;    // (C, 3C), (3C)
    nn::TensorPtr<Real> proj_w, proj_b;  // (C, C), (C)
    nn::TensorPtr<Real> ln2_g, ln2_b;
    nn::TensorPtr<Real> fc_w, fc_b;      // (C, 4C), (4C)
    nn::TensorPtr<Real> out_w, out_b;    // (4C, C), (C)
  };
  std::vector<Block> blocks;
  nn::TensorPtr<Real> lnf_g, lnf_b;
  nn::TensorPtr<Real> head_w, head_b;    // (C, A), (A)

  std::vector<std::pair<std::string, nn::TensorPtr<Real>>> named_parameters() const {
    std::vector<std::pair<std::string, nn::TensorPtr<Real>>> out = {
        {"ret_w", ret_w},     {"ret_b", ret_b},   {"obs_w", obs_w},
        {"obs_b", obs_b},     {"act_emb", act_emb}, {"time_emb", time_emb}};
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      const Block& b = blocks[i];
      out.emplace_back(p + "ln1_g", b.ln1_g);
      out.emplace_back(p + "ln1_b", b.ln1_b);
      out.emplace_back(p + "qkv_w", b.qkv_w);
      out.emplace_back(p + "qkv_b", b.qkv_b);
      out.emplace_back(p + "proj_w", b.proj_w);
      out.emplace_back(p + "proj_b", b.proj_b);
      out.emplace_back(p + "ln2_g", b.ln2_g);
      out.emplace_back(p + "ln2_b", b.ln2_b);
      out.emplace_back(p + "fc_w", b.fc_w);
      out.emplace_back(p + "fc_b", b.fc_b);
      out.emplace_back(p + "out_w", b.out_w);
      out.emplace_back(p + "out_b", b.out_b);
    }
    out.emplace_back("lnf_g", lnf_g);
    out.emplace_back("lnf_b", lnf_b);
    out.emplace_back("head_w", head_w);
    out.emplace_back("head_b", head_b);
    return out;
  }

  std::vector<nn::TensorPtr<Real>> parameters() const {
    std::vector<nn::TensorPtr<Real>> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : parameters()) n += p->size();
    return n;
  }
};

template <typename Real>
DTModel<Real> init_model(const DTConfig& cfg) {
  cfg.validate();
  DTModel<Real> m;
  m.config = cfg;
  const int c = cfg.embed_dim;
  Rng rng(derive_seed(cfg.seed, seed_stream::kTrainInit));

  auto normal_param = [&rng](std::vector<int> shape) {
    auto t = nn::make_param<Real>(std::move(shape));
    for (auto& v : t->value) v = static_cast<Real>(rng.normal(0.0, 0.02));
    return t;
  };
  auto zeros_param = [](std::vector<int> shape) { return nn::make_param<Real>(std::move(shape)); };
  auto ones_param = [](std::vector<int> shape) {
    auto t = nn::make_param<Real>(std::move(shape));
    std::fill(t->value.begin(), t->value.end(), Real(1));
    return t;
  };

  m.ret_w = normal_param({1, c});
  m.ret_b = zeros_param({c});
  m.obs_w = normal_param({cfg.obs_dim, c});
  m.obs_b = zeros_param({c});
  m.act_emb = normal_param({cfg.action_count, c});
  m.time_emb = normal_param({cfg.max_timestep + 1, c});
  m.blocks.resize(cfg.layers);
  for (auto& b : m.blocks) {
    b.ln1_g = ones_param({c});
    b.ln1_b = zeros_param({c});
    b.qkv_w = normal_param({c, 3 * c});
    b.qkv_b = zeros_param({3 * c});
    b.proj_w = normal_param({c, c});
    b.proj_b = zeros_param({c});
    b.ln2_g = ones_param({c});
    b.ln2_b = zeros_param({c});
    b.fc_w = normal_param({c, 4 * c});
    b.fc_b = zeros_param({4 * c});
    b.out_w = normal_param({4 * c, c});
    b.out_b = zeros_param({c});
  }
  m.lnf_g = ones_param({c});
  m.lnf_b = zeros_param({c});
  m.head_w = normal_param({c, cfg.action_count});
  m.head_b = zeros_param({cfg.action_count});
  return m;
}

namespace detail {

// tok[b, 3k+0] = ret[b, k] + time[b, k]; 3k+1 obs; 3k+2 action. One fused op
// so the interleave has an exact backward without extra copies.
template <typename Real>
nn::TensorPtr<Real> assemble_tokens(nn::Tape<Real>& tape, const nn::TensorPtr<Real>& ret_e,
                                    const nn::TensorPtr<Real>& obs_e,
                                    const nn::TensorPtr<Real>& act_e,
                                    const nn::TensorPtr<Real>& time_e) {
  const int b_n = ret_e->shape[0], k_n = ret_e->shape[1], c_n = ret_e->shape[2];
  auto tok = tape.make({b_n, 3 * k_n, c_n}, ret_e->requires_grad || obs_e->requires_grad ||
                                                act_e->requires_grad || time_e->requires_grad);
  const nn::TensorPtr<Real> comps[3] = {ret_e, obs_e, act_e};
  for (int b = 0; b < b_n; ++b) {
    for (int k = 0; k < k_n; ++k) {
      const int64_t src = (static_cast<int64_t>(b) * k_n + k) * c_n;
      for (int j = 0; j < 3; ++j) {
        Real* dst = tok->value.data() + (static_cast<int64_t>(b) * 3 * k_n + 3 * k + j) * c_n;
        const Real* cv = comps[j]->value.data() + src;
        const Real* tv = time_e->value.data() + src;
        for (int d = 0; d < c_n; ++d) dst[d] = cv[d] + tv[d];
      }
    }
  }
  if (tok->requires_grad) {
    tape.record([ret_e, obs_e, act_e, time_e, tok, b_n, k_n, c_n]() {
      const nn::TensorPtr<Real> comps[3] = {ret_e, obs_e, act_e};
      for (int b = 0; b < b_n; ++b) {
        for (int k = 0; k < k_n; ++k) {
          const int64_t src = (static_cast<int64_t>(b) * k_n + k) * c_n;
          for (int j = 0; j < 3; ++j) {
            const Real* g =
                tok->grad.data() + (static_cast<int64_t>(b) * 3 * k_n + 3 * k + j) * c_n;
            if (comps[j]->requires_grad) {
              Real* gc = comps[j]->grad.data() + src;
              for (int d = 0; d < c_n; ++d) gc[d] += g[d];
            }
            if (time_e->requires_grad) {
              Real* gt = time_e->grad.data() + src;
              for (int d = 0; d < c_n; ++d) gt[d] += g[d];
            }
          }
        }
      }
    });
  }
  return tok;
}

// Picks the state-token rows (positions 3k+1) back out of the stream.
template <typename Real>
nn::TensorPtr<Real> select_state_positions(nn::Tape<Real>& tape, const nn::TensorPtr<Real>& x) {
  const int b_n = x->shape[0], t_n = x->shape[1], c_n = x->shape[2];
  const int k_n = t_n / 3;
  auto y = tape.make({b_n, k_n, c_n}, x->requires_grad);
  for (int b = 0; b < b_n; ++b) {
    for (int k = 0; k < k_n; ++k) {
      const Real* src = x->value.data() + (static_cast<int64_t>(b) * t_n + 3 * k + 1) * c_n;
      Real* dst = y->value.data() + (static_cast<int64_t>(b) * k_n + k) * c_n;
      std::copy(src, src + c_n, dst);
    }
  }
  if (y->requires_grad) {
    tape.record([x, y, b_n, k_n, t_n, c_n]() {
      for (int b = 0; b < b_n; ++b) {
        for (int k = 0; k < k_n; ++k) {
          Real* gx = x->grad.data() + (static_cast<int64_t>(b) * t_n + 3 * k + 1) * c_n;
          const Real* gy = y->grad.data() + (static_cast<int64_t>(b) * k_n + k) * c_n;
          for (int d = 0; d < c_n; ++d) gx[d] += gy[d];
        }
      }
    });
  }
  return y;
}

}  // namespace detail

// Forward pass over a padded window batch; returns action logits (B, K, A).
// Teacher forcing comes from the batch layout: the causal mask stops state
// token t from seeing action token t.
template <typename Real>
nn::TensorPtr<Real> dt_forward(nn::Tape<Real>& tape, DTModel<Real>& model, const Batch& batch,
                               bool train_mode = false, Rng* dropout_rng = nullptr) {
  const DTConfig& cfg = model.config;
  if (batch.context != cfg.context_k) throw UsageError("dt_forward: context mismatch");
  if (batch.obs_dim != cfg.obs_dim) throw UsageError("dt_forward: obs_dim mismatch");
  const int b_n = batch.batch_size, k_n = batch.context, c_n = cfg.embed_dim;
  const double rate = train_mode ? cfg.dropout : 0.0;
  if (rate > 0.0 && dropout_rng == nullptr) {
    throw UsageError("dt_forward: dropout requires an rng in train mode");
  }

  // inputs
  auto ret_in = tape.make({b_n, k_n, 1}, false);
  for (int64_t i = 0; i < ret_in->size(); ++i) ret_in->value[i] = Real(batch.returns[i]);
  auto obs_in = tape.make({b_n, k_n, cfg.obs_dim}, false);
  for (int64_t i = 0; i < obs_in->size(); ++i) obs_in->value[i] = Real(batch.obs[i]);
  std::vector<int> time_ids(batch.timesteps.size());
  for (size_t i = 0; i < time_ids.size(); ++i) {
    time_ids[i] = std::min(batch.timesteps[i], cfg.max_timestep);
  }

  // token embeddings
  auto ret_e = tape.add(tape.matmul(ret_in, model.ret_w), model.ret_b);
  auto obs_e = tape.add(tape.matmul(obs_in, model.obs_w), model.obs_b);
  auto act_e = tape.embedding_lookup(model.act_emb, batch.actions, {b_n, k_n});
  auto time_e = tape.embedding_lookup(model.time_emb, time_ids, {b_n, k_n});
  auto x = detail::assemble_tokens(tape, ret_e, obs_e, act_e, time_e);
  if (rate > 0.0) x = tape.dropout(x, rate, *dropout_rng);

  // key mask at token granularity: pad triplets are invisible to attention
  std::vector<uint8_t> token_mask(static_cast<size_t>(b_n) * 3 * k_n);
  for (int b = 0; b < b_n; ++b) {
    for (int k = 0; k < k_n; ++k) {
      const uint8_t mv = batch.mask[static_cast<size_t>(b) * k_n + k];
      for (int j = 0; j < 3; ++j) token_mask[(static_cast<size_t>(b) * 3 * k_n) + 3 * k + j] = mv;
    }
  }

  for (auto& blk : model.blocks) {
    auto h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b);
    auto qkv = tape.add(tape.matmul(h, blk.qkv_w), blk.qkv_b);
    auto q = tape.slice_last(qkv, 0, c_n);
    auto k = tape.slice_last(qkv, c_n, c_n);
    auto v = tape.slice_last(qkv, 2 * c_n, c_n);
    auto att = tape.causal_attention(q, k, v, cfg.heads, token_mask);
    att = tape.add(tape.matmul(att, blk.proj_w), blk.proj_b);
    if (rate > 0.0) att = tape.dropout(att, rate, *dropout_rng);
    x = tape.add(x, att);

    auto h2 = tape.layer_norm(x, blk.ln2_g, blk.ln2_b);
    auto mlp = tape.gelu(tape.add(tape.matmul(h2, blk.fc_w), blk.fc_b));
    mlp = tape.add(tape.matmul(mlp, blk.out_w), blk.out_b);
    if (rate > 0.0) mlp = tape.dropout(mlp, rate, *dropout_rng);
    x = tape.add(x, mlp);
  }

  x = tape.layer_norm(x, model.lnf_g, model.lnf_b);
  auto states = detail::select_state_positions(tape, x);
  return tape.add(tape.matmul(states, model.head_w), model.head_b);
}

// Masked action cross-entropy for one batch.
template <typename Real>
nn::TensorPtr<Real> dt_loss(nn::Tape<Real>& tape, DTModel<Real>& model, const Batch& batch,
                            bool train_mode = false, Rng* dropout_rng = nullptr) {
  auto logits = dt_forward(tape, model, batch, train_mode, dropout_rng);
  return tape.cross_entropy(logits, batch.actions, batch.mask);
}

struct TrainResult {
  std::vector<std::pair<int, double>> loss_trace;  // (step, loss) at step 1 and every 100
  double final_loss = 0.0;
};

template <typename Real>
TrainResult train_dt(DTModel<Real>& model, const WeightedDataset& ds, const DTConfig& cfg) {
  cfg.validate();
  if (ds.empty()) throw DataError("train_dt: dataset is empty");
  Rng sampler_rng(derive_seed(cfg.seed, seed_stream::kSampler));
  Rng dropout_rng(derive_seed(cfg.seed, seed_stream::kDropout));

  auto params = model.parameters();
  nn::OptimizerState<Real> opt;
  opt.init(params);
  nn::AdamConfig<Real> adam;
  adam.lr = static_cast<Real>(cfg.learning_rate);
  adam.weight_decay = static_cast<Real>(cfg.weight_decay);

  TrainResult result;
  for (int s = 1; s <= cfg.training_steps; ++s) {
    Batch batch = sample_batch(ds, cfg.batch_size, cfg.context_k, sampler_rng);
    nn::Tape<Real> tape;
    auto loss = dt_loss(tape, model, batch, true, &dropout_rng);
    const double loss_v = static_cast<double>(loss->value[0]);
    if (!std::isfinite(loss_v)) {
      throw TrainingError("train_dt: non-finite loss at step " + std::to_string(s));
    }
    if (s == 1 || s % 100 == 0) result.loss_trace.emplace_back(s, loss_v);
    tape.backward(loss);
    nn::adam_step(params, opt, adam);
    nn::zero_grads(params);
    result.final_loss = loss_v;
  }
  return result;
}

// --- acting -----------------------------------------------------------------

struct HistoryStep {
  double rtg = 0.0;
  std::vector<float> obs;
  Action action = Action::Forward;
};

namespace detail {

// Window = last (K-1) completed triplets plus the current (rtg, obs, <pending>)
// triplet, right-aligned. The pending action slot is zero; causality keeps it
// invisible to the readout position.
inline void fill_action_window(Batch& batch, int row, const std::vector<HistoryStep>& history,
                               const std::vector<float>& current_obs, double current_rtg,
                               int current_t) {
  const int k = batch.context;
  const int n_hist = std::min<int>(k - 1, static_cast<int>(history.size()));
  const int n_real = n_hist + 1;
  const int pad = k - n_real;
  const size_t base = static_cast<size_t>(row) * k;
  for (int i = 0; i < n_hist; ++i) {
    const HistoryStep& h = history[history.size() - n_hist + i];
    const size_t at = base + pad + i;
    batch.returns[at] = static_cast<float>(h.rtg);
    batch.actions[at] = static_cast<int>(h.action);
    batch.timesteps[at] = current_t - n_hist + i;
    batch.mask[at] = 1;
    std::copy(h.obs.begin(), h.obs.end(), batch.obs.begin() + at * batch.obs_dim);
  }
  const size_t at = base + k - 1;
  batch.returns[at] = static_cast<float>(current_rtg);
  batch.actions[at] = 0;  // pending
  batch.timesteps[at] = current_t;
  batch.mask[at] = 1;
  std::copy(current_obs.begin(), current_obs.end(), batch.obs.begin() + at * batch.obs_dim);
}

template <typename Real>
std::vector<Action> greedy_actions(DTModel<Real>& model, const Batch& batch) {
  nn::Tape<Real> tape;
  auto logits = dt_forward(tape, model, batch, false, nullptr);
  const int k_n = batch.context, a_n = model.config.action_count;
  std::vector<Action> out(batch.batch_size);
  for (int b = 0; b < batch.batch_size; ++b) {
    const Real* row = logits->value.data() + (static_cast<int64_t>(b) * k_n + (k_n - 1)) * a_n;
    int best = 0;
    for (int j = 1; j < a_n; ++j) {
      if (row[j] > row[best]) best = j;  // ties keep the lowest index
    }
    out[b] = static_cast<Action>(best);
  }
  return out;
}

}  // namespace detail

// Greedy action for a single state given the episode history so far.
template <typename Real>
Action act_dt(DTModel<Real>& model, const std::vector<HistoryStep>& history,
              const std::vector<float>& current_obs, double current_rtg) {
  Batch batch;
  batch.resize(1, model.config.context_k, model.config.obs_dim);
  detail::fill_action_window(batch, 0, history, current_obs, current_rtg,
                             static_cast<int>(history.size()));
  return detail::greedy_actions(model, batch)[0];
}

struct EpisodeResult {
  uint64_t layout_id = 0;
  double total_return = 0.0;
  int length = 0;
  bool reached_goal = false;
};

// Rolls the model greedily on each layout, conditioning on
// cfg.eval_target_return and decrementing by observed rewards. Episodes are
// batched into shared forward passes; every row is computed independently, so
// results match one-at-a-time evaluation exactly.
template <typename Real>
std::vector<EpisodeResult> evaluate_dt(DTModel<Real>& model, const std::vector<GridLayout>& layouts,
                                       const RewardSpec& spec, const DTConfig& cfg) {
  spec.validate();
  struct Episode {
    const GridLayout* layout;
    EnvState state;
    std::vector<HistoryStep> history;
    double rtg;
    bool done = false;
    EpisodeResult result;
  };
  std::vector<Episode> eps;
  eps.reserve(layouts.size());
  for (const GridLayout& l : layouts) {
    Episode e;
    e.layout = &l;
    e.state = reset(l);
    e.rtg = cfg.eval_target_return;
    e.result.layout_id = layout_hash(l);
    eps.push_back(std::move(e));
  }

  std::vector<int> active;
  for (size_t i = 0; i < eps.size(); ++i) active.push_back(static_cast<int>(i));
  Batch batch;
  while (!active.empty()) {
    batch.resize(static_cast<int>(active.size()), cfg.context_k, cfg.obs_dim);
    std::vector<std::vector<float>> observations(active.size());
    for (size_t row = 0; row < active.size(); ++row) {
      Episode& e = eps[active[row]];
      observations[row] = observe(e.state);
      detail::fill_action_window(batch, static_cast<int>(row), e.history, observations[row],
                                 e.rtg, e.state.step_count);
    }
    const std::vector<Action> actions = detail::greedy_actions(model, batch);
    std::vector<int> still_active;
    for (size_t row = 0; row < active.size(); ++row) {
      Episode& e = eps[active[row]];
      const StepResult r = step(e.state, actions[row], spec);
      e.history.push_back({e.rtg, std::move(observations[row]), actions[row]});
      e.result.total_return += r.reward;
      e.result.length += 1;
      e.rtg -= r.reward;
      e.state = r.state;
      if (r.done) {
        e.done = true;
        e.result.reached_goal = e.state.pos == e.layout->goal;
      } else {
        still_active.push_back(active[row]);
      }
    }
    active.swap(still_active);
  }

  std::vector<EpisodeResult> out;
  out.reserve(eps.size());
  for (Episode& e : eps) out.push_back(e.result);
  return out;
}

// Teacher-forced greedy accuracy of the model on one trajectory: at every
// step the window carries the true history.
template <typename Real>
double action_accuracy(DTModel<Real>& model, const Trajectory& traj, const GridLayout& layout) {
  const int len = traj.episode_length();
  if (len == 0) return 1.0;
  Batch batch;
  batch.resize(len, model.config.context_k, model.config.obs_dim);
  std::vector<HistoryStep> history;
  for (int t = 0; t < len; ++t) {
    const auto obs = make_observation(layout, traj.steps[t].pos, traj.steps[t].heading);
    detail::fill_action_window(batch, t, history, obs, traj.returns_to_go[t], t);
    history.push_back({traj.returns_to_go[t], obs, traj.steps[t].action});
  }
  const std::vector<Action> predicted = detail::greedy_actions(model, batch);
  int correct = 0;
  for (int t = 0; t < len; ++t) {
    if (predicted[t] == traj.steps[t].action) ++correct;
  }
  return static_cast<double>(correct) / len;
}

// --- checkpoints -------------------------------------------------------------
// Flat binary: magic, scalar width, config JSON, then named parameter blobs.

namespace detail {

constexpr char kCkptMagic[8] = {'C', 'F', 'D', 'T', 'C', 'K', 'P', '1'};

inline void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const std::string& path, const DTModel<Real>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_checkpoint: cannot open " + path);
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_u32(out, static_cast<uint32_t>(sizeof(Real)));
  const std::string cfg = dtconfig_to_json(model.config).dump();
  detail::write_u32(out, static_cast<uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto named = model.named_parameters();
  detail::write_u32(out, static_cast<uint32_t>(named.size()));
  for (const auto& [name, p] : named) {
    detail::write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(out, static_cast<uint32_t>(p->shape.size()));
    for (int d : p->shape) detail::write_u32(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(Real)));
  }
  if (!out) throw DataError("save_checkpoint: write failed for " + path);
}

template <typename Real>
DTModel<Real> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0) {
    throw DataError("load_checkpoint: bad magic in " + path);
  }
  const uint32_t real_size = detail::read_u32(in);
  if (real_size != sizeof(Real)) {
    throw DataError("load_checkpoint: scalar width mismatch in " + path);
  }
  const uint32_t cfg_len = detail::read_u32(in);
  std::string cfg_str(cfg_len, '\0');
  in.read(cfg_str.data(), cfg_len);
  DTModel<Real> model = init_model<Real>(dtconfig_from_json(Json::parse(cfg_str)));
  const uint32_t n_params = detail::read_u32(in);
  auto named = model.named_parameters();
  if (n_params != named.size()) throw DataError("load_checkpoint: parameter count mismatch");
  for (auto& [name, p] : named) {
    const uint32_t name_len = detail::read_u32(in);
    std::string got(name_len, '\0');
    in.read(got.data(), name_len);
    if (got != name) throw DataError("load_checkpoint: parameter order mismatch at " + got);
    const uint32_t ndims = detail::read_u32(in);
    std::vector<int> dims(ndims);
    for (auto& d : dims) d = static_cast<int>(detail::read_u32(in));
    if (dims != p->shape) throw DataError("load_checkpoint: shape mismatch at " + name);
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(Real)));
  }
  if (!in) throw DataError("load_checkpoint: truncated file " + path);
  return model;
}

}  // namespace cfdt
