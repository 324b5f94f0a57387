#pragma once
// Supervised fine-tuning at desk scale. Three-phase learning-rate schedule
// (constant peak, linear decay, cosine tail), adaptive-moment optimizer
// with decoupled weight decay and an optional parameter-scale step
// multiplier, and a batched teacher-forced training loop with per-example
// random chunk sampling.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "docfuse/chunker.hpp"
#include "docfuse/common.hpp"
#include "docfuse/model.hpp"
#include "docfuse/tensor.hpp"

namespace docfuse {

struct TrainConfig {
  int64_t total_steps = 1000;
  int64_t batch_size = 4;
  double peak_lr = 1e-3;
  double mid_lr = 2e-4;
  double final_lr = 5e-5;
  double warmup_frac = 0.01;
  double linear_frac = 0.89;
  double weight_decay = 1e-5;
  int64_t max_chunks = 0;  // 0 disables random chunk sampling
  uint64_t seed = 0;
  bool scaled_updates = true;  // multiply each step by max(rms(param), 1e-3)
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(peak_lr > 0 && mid_lr > 0 && final_lr > 0))
      throw ConfigError("learning rates must be positive");
    if (!(peak_lr >= mid_lr && mid_lr >= final_lr))
      throw ConfigError("learning rates must be ordered peak >= mid >= final");
    if (!(warmup_frac >= 0 && linear_frac >= 0 && warmup_frac + linear_frac <= 1.0))
      throw ConfigError("warmup_frac + linear_frac must be <= 1");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (max_chunks < 0) throw ConfigError("max_chunks must be >= 0");
  }
};

// Piecewise schedule over [0, total_steps): constant peak_lr for the warmup
// fraction, linear decay to mid_lr over the linear fraction, then a cosine
// from mid_lr to final_lr across the remaining steps. Continuous at both
// joints; the last step lands exactly on final_lr.
inline double lr_schedule(int64_t step, const TrainConfig& cfg) {
  cfg.validate();
  const int64_t S = cfg.total_steps;
  if (step < 0 || step >= S)
    throw ValidationError("schedule step " + std::to_string(step) + " outside [0, " +
                          std::to_string(S) + ")");
  const int64_t w = std::llround(cfg.warmup_frac * static_cast<double>(S));
  const int64_t b = w + std::llround(cfg.linear_frac * static_cast<double>(S));
  if (step == S - 1) return cfg.final_lr;
  if (step < w) return cfg.peak_lr;
  if (step < b)
    return cfg.peak_lr + (cfg.mid_lr - cfg.peak_lr) * static_cast<double>(step - w) /
                             static_cast<double>(b - w);
  if (step == b) return cfg.mid_lr;
  const double phase = static_cast<double>(step - b) / static_cast<double>(S - 1 - b);
  return cfg.final_lr + (cfg.mid_lr - cfg.final_lr) * (1.0 + std::cos(M_PI * phase)) / 2.0;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename S>
struct OptState {
  std::vector<std::vector<double>> m, v;  // aligned with ModelParams::named()
  int64_t t = 0;

  static OptState init(const ModelParams<S>& params) {
    OptState st;
    for (const auto& [name, p] : params.named()) {
      st.m.emplace_back(p->data.size(), 0.0);
      st.v.emplace_back(p->data.size(), 0.0);
    }
    return st;
  }
};

// One decoupled-weight-decay adaptive-moment update from the gradients
// currently held in the parameters. With scaled_updates the step is
// multiplied by max(rms(param), 1e-3), a parameter-scale heuristic; without
// it this is the plain decoupled-decay optimizer.
template <typename S>
void optimizer_step(ModelParams<S>& params, OptState<S>& st, const TrainConfig& cfg,
                    double lr) {
  auto named = params.named();
  if (named.size() != st.m.size())
    throw ValidationError("optimizer state does not match parameter set");
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (size_t pi = 0; pi < named.size(); ++pi) {
    auto& p = named[pi].second;
    // A parameter absent from the step's graph (e.g. the visual projection
    // on grid-free documents) simply has zero gradient.
    const bool has_grad = !p->grad.empty();
    double scale_mult = 1.0;
    if (cfg.scaled_updates) {
      double sq = 0.0;
      for (const S x : p->data) sq += static_cast<double>(x) * static_cast<double>(x);
      scale_mult = std::max(std::sqrt(sq / static_cast<double>(p->data.size())), 1e-3);
    }
    auto& m = st.m[pi];
    auto& v = st.v[pi];
    for (size_t i = 0; i < p->data.size(); ++i) {
      const double g = has_grad ? static_cast<double>(p->grad[i]) : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
      double x = static_cast<double>(p->data[i]);
      x -= lr * cfg.weight_decay * x;
      x -= lr * scale_mult * update;
      p->data[i] = static_cast<S>(x);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainExample {
  int64_t id = 0;
  LayoutDocument doc;
  std::vector<int32_t> question;  // encoder prefix, replicated per chunk
  std::vector<int32_t> answer;    // end token excluded; appended as target
};

template <typename S>
double train_step(ModelParams<S>& params, OptState<S>& st,
                  const std::vector<const TrainExample*>& batch, const TrainConfig& cfg,
                  int64_t step, Rng& rng) {
  if (batch.empty()) throw ValidationError("empty training batch");
  const double lr = lr_schedule(step, cfg);
  Tape<S> tape;
  TensorPtr<S> loss_sum;
  int64_t token_count = 0;
  for (const TrainExample* ex : batch) {
    ChunkPlan plan = plan_chunks(static_cast<int64_t>(ex->doc.tokens.size()), params.cfg.c,
                                 params.cfg.o, static_cast<int64_t>(ex->question.size()));
    if (cfg.max_chunks > 0) {
      plan = sample_training_chunks(plan, cfg.max_chunks, rng);
      if (plan.chunks.empty() || plan.chunks.front().index != 0)
        throw ValidationError("chunk sampling dropped the first chunk");
    }
    std::vector<int32_t> dec_in{kPadId};
    dec_in.insert(dec_in.end(), ex->answer.begin(), ex->answer.end());
    std::vector<int32_t> targets = ex->answer;
    targets.push_back(kEosId);
    TensorPtr<S> ex_loss;
    try {
      auto enc = encode(tape, ex->doc, ex->question, params, true, &rng, &plan);
      auto logits = decoder_forward(tape, enc.states, dec_in, params, true, &rng);
      ex_loss = cross_entropy(tape, logits, targets, false);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " on example " + std::to_string(ex->id));
    }
    if (!std::isfinite(static_cast<double>(ex_loss->data[0])))
      throw NumericError("non-finite loss on example " + std::to_string(ex->id));
    token_count += static_cast<int64_t>(targets.size());
    loss_sum = loss_sum ? add(tape, loss_sum, ex_loss) : ex_loss;
  }
  auto loss = scale(tape, loss_sum, 1.0 / static_cast<double>(token_count));
  const double loss_value = static_cast<double>(loss->data[0]);
  tape.backward(loss);
  optimizer_step(params, st, cfg, lr);
  for (auto& [name, p] : params.named()) p->zero_grad();
  return loss_value;
}

struct MetricsRow {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

// Runs the remaining steps of the schedule with seeded shuffled batching.
// Resuming with steps_done == total_steps performs no updates.
template <typename S>
std::vector<MetricsRow> fit(ModelParams<S>& params, OptState<S>& st,
                            const std::vector<TrainExample>& dataset, const TrainConfig& cfg,
                            int64_t steps_done = 0) {
  cfg.validate();
  if (dataset.empty()) throw ValidationError("training dataset is empty");
  if (steps_done < 0 || steps_done > cfg.total_steps)
    throw ValidationError("steps_done outside [0, total_steps]");
  Rng rng(cfg.seed);
  Rng order_rng = rng.derive(0xb0de);
  std::vector<MetricsRow> metrics;
  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();  // forces a shuffle before the first batch
  for (int64_t step = steps_done; step < cfg.total_steps; ++step) {
    std::vector<const TrainExample*> batch;
    for (int64_t k = 0; k < cfg.batch_size; ++k) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&dataset[order[cursor++]]);
    }
    Rng step_rng = rng.derive(0x57e9 + static_cast<uint64_t>(step));
    const double loss = train_step(params, st, batch, cfg, step, step_rng);
    metrics.push_back({step, loss, lr_schedule(step, cfg)});
  }
  return metrics;
}

}  // namespace docfuse
