#pragma once

// Three-stage training orchestration: per-stage trainable sets and loss
// modes, AdamW with cosine annealing, gradient accumulation, the lambda
// ramp, deterministic checkpoint/resume, and gradient checking.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "pointlm/checkpoint.hpp"
#include "pointlm/dataset.hpp"
#include "pointlm/errors.hpp"
#include "pointlm/model.hpp"
#include "pointlm/objective.hpp"

namespace pointlm {

enum class LossMode { nll_only, nll_plus_or, nll_plus_pr };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::nll_only: return "nll_only";
    case LossMode::nll_plus_or: return "nll_plus_or";
    case LossMode::nll_plus_pr: return "nll_plus_pr";
  }
  throw NumericError("to_string: bad LossMode");
}

struct StageConfig {
  int stage = 1;
  double learning_rate = 2e-3;
  int max_steps = 200;
  int batch_size = 4;
  int accumulation = 2;
  double weight_decay = 5e-2;
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-8;
  LossMode loss_mode = LossMode::nll_only;
  double lambda_max = 0.0;
  std::set<std::string> trainable;
  uint64_t seed = 0;

  void validate() const {
    if (stage < 1 || stage > 3) throw DataError("StageConfig: stage must be 1-3");
    if (stage < 3 && loss_mode != LossMode::nll_only)
      throw DataError("StageConfig: stages 1-2 train with NLL only");
    if (stage < 3 && trainable.count("lm"))
      throw DataError("StageConfig: the language model is frozen before stage 3");
    if (max_steps < 1 || batch_size < 1 || accumulation < 1)
      throw DataError("StageConfig: counts must be positive");
  }
};

// Desk-scale defaults; learning rates and optimizer constants follow the
// staged-tuning recipe, step counts are CI-sized and overridable.
inline StageConfig default_stage_config(int stage) {
  StageConfig c;
  c.stage = stage;
  c.trainable = {"spatial_transformer", "connector", "special_embeddings"};
  switch (stage) {
    case 1:
      c.learning_rate = 2e-3;
      break;
    case 2:
      c.learning_rate = 1e-4;
      break;
    case 3:
      c.learning_rate = 5e-6;
      c.loss_mode = LossMode::nll_plus_or;
      c.lambda_max = 0.3;
      c.trainable.insert("lm");
      break;
    default:
      throw DataError("default_stage_config: stage must be 1-3");
  }
  return c;
}

inline double cosine_lr(double base_lr, int step, int max_steps) {
  if (step < 0 || step > max_steps)
    throw NumericError("cosine_lr: step out of range");
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * step / max_steps));
}

// Zeroes gradients of every parameter group outside the trainable set.
inline void apply_trainable_mask(ParamStore& store,
                                 const std::set<std::string>& trainable) {
  for (const auto& p : store.all())
    if (!trainable.count(p.group)) p.t->zero_grad();
}

struct AdamW {
  std::map<std::string, std::vector<double>> m, v;
  int64_t t = 0;
};

// Decoupled weight decay; only parameters in trainable groups move.
inline void adamw_step(ParamStore& store, AdamW& adam,
                       const std::set<std::string>& trainable,
                       const StageConfig& cfg, double lr) {
  ++adam.t;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam.t));
  for (const auto& p : store.all()) {
    if (!trainable.count(p.group)) continue;
    auto& m = adam.m[p.name];
    auto& v = adam.v[p.name];
    if (m.empty()) m.assign(p.t->size(), 0.0);
    if (v.empty()) v.assign(p.t->size(), 0.0);
    for (size_t i = 0; i < p.t->size(); ++i) {
      const double g = p.t->g[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.t->v[i] -=
          lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                cfg.weight_decay * p.t->v[i]);
    }
  }
}

struct PairExample {
  Scene scene;
  PairSample sample;
};

struct TripletExample {
  Scene scene;
  TripletSample sample;
};

struct TrainDataset {
  std::vector<PairExample> pairs;        // stages 1-2
  std::vector<TripletExample> triplets;  // stage 3
  size_t size() const { return pairs.empty() ? triplets.size() : pairs.size(); }
};

namespace detail {

struct SampleLoss {
  Tensor total;  // graph node
  LossBreakdown breakdown;
};

inline SampleLoss pair_loss(Graph& g, const SceneLM& model, const Vocab& vocab,
                            const PairExample& ex) {
  const auto scene_tokens = model.encode_scene_tokens(g, ex.scene);
  const TokenSequence seq =
      model.assemble(vocab, ex.scene, ex.sample.instruction, ex.sample.response);
  Tensor lp = model.response_logprob(g, seq, scene_tokens);
  SampleLoss out;
  out.total = g.scale(lp, -1.0);
  out.breakdown = combined_loss(nll_loss(std::min(lp->v[0], 0.0)), 0.0, 0.0);
  return out;
}

inline SampleLoss triplet_loss(Graph& g, const SceneLM& model,
                               const Vocab& vocab, const TripletExample& ex,
                               LossMode mode, double lambda) {
  // One scene encoding shared by both passes.
  const auto scene_tokens = model.encode_scene_tokens(g, ex.scene);
  const TokenSequence pos_seq =
      model.assemble(vocab, ex.scene, ex.sample.instruction, ex.sample.positive);
  Tensor lp_pos = model.response_logprob(g, pos_seq, scene_tokens);

  SampleLoss out;
  Tensor nll = g.scale(lp_pos, -1.0);
  // lambda = 0 keeps the contrastive branch out of the graph entirely, so
  // the trajectory is bitwise identical to plain SFT.
  if (mode == LossMode::nll_only || lambda == 0.0) {
    const TokenSequence neg_seq = model.assemble(vocab, ex.scene,
                                                 ex.sample.instruction,
                                                 ex.sample.negative);
    Graph no_grad(false);
    Tensor lp_neg_v =
        model.response_logprob(no_grad, neg_seq, scene_tokens);
    out.total = nll;
    out.breakdown = combined_loss(nll_loss(std::min(lp_pos->v[0], 0.0)), 0.0, 0.0);
    const Diagnostics d = diagnostics(std::min(lp_pos->v[0], -1e-300),
                                      std::min(lp_neg_v->v[0], -1e-300));
    out.breakdown.log_odds_ratio = d.log_odds_ratio;
    out.breakdown.reward_margin = d.reward_margin;
    return out;
  }

  const TokenSequence neg_seq =
      model.assemble(vocab, ex.scene, ex.sample.instruction, ex.sample.negative);
  Tensor lp_neg = model.response_logprob(g, neg_seq, scene_tokens);
  Tensor contrast = mode == LossMode::nll_plus_or
                        ? odds_ratio_loss_node(g, lp_pos, lp_neg)
                        : probability_ratio_loss_node(g, lp_pos, lp_neg);
  out.total = g.add(nll, g.scale(contrast, lambda));
  out.breakdown =
      combined_loss(nll_loss(std::min(lp_pos->v[0], 0.0)), contrast->v[0], lambda);
  const Diagnostics d = diagnostics(std::min(lp_pos->v[0], -1e-300),
                                    std::min(lp_neg->v[0], -1e-300));
  out.breakdown.log_odds_ratio = d.log_odds_ratio;
  out.breakdown.reward_margin = d.reward_margin;
  return out;
}

}  // namespace detail

// One optimizer step over batch_size x accumulation samples starting at
// `cursor` in the (cyclic) ordered dataset. Gradients accumulate across
// micro-batches; the update is the mean-gradient AdamW step.
inline LossBreakdown train_step(SceneLM& model, const Vocab& vocab,
                                const TrainDataset& data,
                                const std::vector<size_t>& order,
                                size_t cursor, const StageConfig& cfg,
                                AdamW& adam, int step) {
  const bool triplet_mode = cfg.loss_mode != LossMode::nll_only;
  if (triplet_mode && data.triplets.empty())
    throw DataError("train_step: pair batch under triplet loss mode");
  if (!triplet_mode && data.pairs.empty() && !data.triplets.empty()) {
    // NLL-only over triplets is legal: SFT trains on the positives.
  } else if (!triplet_mode && data.pairs.empty()) {
    throw DataError("train_step: empty dataset");
  }

  const LambdaSchedule schedule{cfg.lambda_max, cfg.max_steps};
  const double lambda =
      cfg.loss_mode == LossMode::nll_only ? 0.0 : lambda_at(schedule, step);
  const int n_total = cfg.batch_size * cfg.accumulation;
  const double weight = 1.0 / n_total;

  model.store().zero_grads();
  LossBreakdown mean{};
  for (int i = 0; i < n_total; ++i) {
    const size_t idx = order[(cursor + i) % order.size()];
    Graph g;
    detail::SampleLoss s =
        data.triplets.empty()
            ? detail::pair_loss(g, model, vocab, data.pairs[idx])
            : detail::triplet_loss(g, model, vocab, data.triplets[idx],
                                   cfg.loss_mode, lambda);
    g.backward(g.scale(s.total, weight));
    mean.nll += weight * s.breakdown.nll;
    mean.or_loss += weight * s.breakdown.or_loss;
    mean.log_odds_ratio += weight * s.breakdown.log_odds_ratio;
    mean.reward_margin += weight * s.breakdown.reward_margin;
  }
  mean.lambda = lambda;
  mean.total = lambda == 0.0 ? mean.nll : mean.nll + lambda * mean.or_loss;
  if (!std::isfinite(mean.total))
    throw NumericError("non-finite loss at step " + std::to_string(step));

  apply_trainable_mask(model.store(), cfg.trainable);
  adamw_step(model.store(), adam, cfg.trainable, cfg,
             cosine_lr(cfg.learning_rate, step, cfg.max_steps));
  return mean;
}

// ---------------------------------------------------------------------------
// Full training state (float64) for bit-identical resume
// ---------------------------------------------------------------------------

inline void save_train_state(const SceneLM& model, const AdamW& adam, int step,
                             const std::string& path) {
  std::vector<CheckpointEntry> entries;
  entries.push_back(
      {"meta/progress", 1, 2, true,
       {static_cast<double>(step), static_cast<double>(adam.t)}});
  for (const auto& p : model.store().all())
    entries.push_back({"param/" + p.name, p.t->rows, p.t->cols, true, p.t->v});
  for (const auto& [name, m] : adam.m)
    entries.push_back({"adam_m/" + name, 1, static_cast<int>(m.size()), true, m});
  for (const auto& [name, v] : adam.v)
    entries.push_back({"adam_v/" + name, 1, static_cast<int>(v.size()), true, v});
  save_checkpoint(entries, path);
}

inline int load_train_state(SceneLM& model, AdamW& adam,
                            const std::string& path) {
  const auto entries = load_checkpoint(path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto need = [&](const std::string& n) -> const CheckpointEntry& {
    auto it = by_name.find(n);
    if (it == by_name.end())
      throw DataError("train state missing entry " + n + ": " + path);
    return *it->second;
  };
  for (const auto& p : model.store().all()) {
    const CheckpointEntry& e = need("param/" + p.name);
    if (e.rows != p.t->rows || e.cols != p.t->cols)
      throw DataError("train state shape mismatch for " + p.name);
    p.t->v = e.data;
  }
  adam.m.clear();
  adam.v.clear();
  for (const auto& e : entries) {
    if (e.name.rfind("adam_m/", 0) == 0) adam.m[e.name.substr(7)] = e.data;
    if (e.name.rfind("adam_v/", 0) == 0) adam.v[e.name.substr(7)] = e.data;
  }
  const CheckpointEntry& meta = need("meta/progress");
  adam.t = static_cast<int64_t>(meta.data[1]);
  return static_cast<int>(meta.data[0]);
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

struct StageResult {
  std::string state_path;    // float64 full train state
  std::string params_path;   // float32 exported parameters
  std::string metrics_path;  // per-step diagnostics CSV
  int final_step = 0;
};

// Iterates train_step to max_steps with a single seeded shuffle fixed at
// stage start; the data cursor is a pure function of the step index, so a
// resumed run replays the uninterrupted trajectory exactly.
// stop_step < max_steps pauses after that many steps and checkpoints; a later
// call with resume_state picks the trajectory back up.
inline StageResult run_stage(SceneLM& model, const Vocab& vocab,
                             const TrainDataset& data, const StageConfig& cfg,
                             const std::string& out_dir,
                             const std::optional<std::string>& resume_state = {},
                             int stop_step = -1) {
  cfg.validate();
  if (data.size() == 0) throw DataError("run_stage: empty dataset");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), rng);

  AdamW adam;
  int start_step = 0;
  if (resume_state) start_step = load_train_state(model, adam, *resume_state);

  StageResult result;
  result.state_path = out_dir + "/state.bin";
  result.params_path = out_dir + "/params.bin";
  result.metrics_path = out_dir + "/metrics.csv";

  std::ofstream metrics(result.metrics_path,
                        start_step > 0 ? std::ios::app : std::ios::out);
  if (!metrics) throw DataError("cannot write metrics: " + result.metrics_path);
  if (start_step == 0)
    metrics << "step,nll,or_loss,lambda,total,log_odds_ratio,reward_margin\n";

  const int end_step =
      stop_step < 0 ? cfg.max_steps : std::min(stop_step, cfg.max_steps);
  const size_t per_step =
      static_cast<size_t>(cfg.batch_size) * cfg.accumulation;
  for (int step = start_step; step < end_step; ++step) {
    const size_t cursor = (static_cast<size_t>(step) * per_step) % order.size();
    const LossBreakdown b =
        train_step(model, vocab, data, order, cursor, cfg, adam, step);
    metrics << step << ',' << b.nll << ',' << b.or_loss << ',' << b.lambda
            << ',' << b.total << ',' << b.log_odds_ratio << ','
            << b.reward_margin << "\n";
  }
  metrics.flush();
  result.final_step = end_step;
  save_train_state(model, adam, end_step, result.state_path);
  save_params(model.store(), result.params_path, /*f64=*/false);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

// Central finite differences (default h=1e-4) over a random subsample of
// trainable parameters against the analytic gradient of the full stage-3
// loss. Returns the worst relative error.
inline double grad_check(SceneLM& model, const Vocab& vocab,
                         const TripletExample& fixture, double lambda,
                         size_t n_samples = 200, uint64_t seed = 1,
                         double h = 1e-4) {
  const LossMode mode =
      lambda == 0.0 ? LossMode::nll_only : LossMode::nll_plus_or;
  auto eval = [&](bool record) {
    Graph g(record);
    detail::SampleLoss s =
        detail::triplet_loss(g, model, vocab, fixture, mode, lambda);
    if (record) g.backward(s.total);
    return s.total->v[0];
  };

  model.store().zero_grads();
  eval(true);

  std::vector<std::pair<Tensor, size_t>> coords;
  for (const auto& p : model.store().all())
    for (size_t i = 0; i < p.t->size(); ++i) coords.emplace_back(p.t, i);
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (coords.size() > n_samples) coords.resize(n_samples);

  double worst = 0;
  for (auto& [t, i] : coords) {
    const double keep = t->v[i];
    t->v[i] = keep + h;
    const double fp = eval(false);
    t->v[i] = keep - h;
    const double fm = eval(false);
    t->v[i] = keep;
    const double num = (fp - fm) / (2 * h);
    const double ana = t->g[i];
    const double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
    worst = std::max(worst, std::abs(num - ana) / denom);
  }
  return worst;
}

}  // namespace pointlm
