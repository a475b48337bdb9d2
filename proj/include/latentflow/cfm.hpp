#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "latentflow/conditioning.hpp"
#include "latentflow/errors.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/tensor.hpp"
#include "latentflow/vectorfield.hpp"

namespace latentflow {

// One point on the straight path between a noise draw and a data sample:
// y_t = t*y_plus + (1-t)*y_minus, with constant target velocity
// u_t = y_plus - y_minus.
struct PathSample {
  Tensor y_minus;
  Tensor y_plus;
  double t = 0.0;
  Tensor y_t;
  Tensor u_t;
};

inline PathSample sample_path_point(const Tensor& y_minus, const Tensor& y_plus, double t) {
  require_same_shape(y_minus, y_plus, "sample_path_point");
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("sample_path_point: t outside [0,1]");
  PathSample ps;
  ps.y_minus = y_minus;
  ps.y_plus = y_plus;
  ps.t = t;
  ps.y_t = Tensor(y_minus.dims());
  ps.u_t = Tensor(y_minus.dims());
  for (std::size_t i = 0; i < y_minus.size(); ++i) {
    ps.y_t[i] = t * y_plus[i] + (1.0 - t) * y_minus[i];
    ps.u_t[i] = y_plus[i] - y_minus[i];
  }
  return ps;
}

// A training example: data draw plus its conditioning before dropout.
struct CfmExample {
  Tensor y_plus;         // {L, D}
  ConditionBundle cond;  // style + per-frame lyrics
};

// An example with its (t, y-) draw and dropout already applied. Tests inject
// these directly to pin t, the noise, or the target velocity.
struct PreparedCfmItem {
  PathSample path;
  ConditionBundle cond;
};

// Draws (t, y-) and applies condition dropout for every example. Per-example
// streams are derived from (seed, index), so batch evaluation order cannot
// change the draws.
inline std::vector<PreparedCfmItem> prepare_cfm_batch(const std::vector<CfmExample>& batch,
                                                      double dropout_p, std::uint64_t seed) {
  std::vector<PreparedCfmItem> items;
  items.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const CfmExample& ex = batch[i];
    Rng path_rng(seed_mix(seed, i, kStreamPath));
    const double t = path_rng.uniform();
    Tensor y_minus(ex.y_plus.dims());
    path_rng.fill_normal(y_minus.data(), y_minus.size());
    PreparedCfmItem item;
    item.path = sample_path_point(y_minus, ex.y_plus, t);
    item.cond = apply_condition_dropout(ex.cond, dropout_p, seed_mix(seed, i, kStreamDropout));
    items.push_back(std::move(item));
  }
  return items;
}

struct BatchEval {
  double loss = 0.0;
  std::vector<double> per_item;  // per-example mean squared residual
  ModelParams grads;             // valid when gradients were requested
};

// Mean over items of the per-entry mean squared residual
// |v(t, y_t, c) - u_t|^2, with exact analytic gradients on request.
inline BatchEval cfm_eval(const ModelParams& params, const std::vector<PreparedCfmItem>& items,
                          bool want_grads) {
  if (items.empty()) throw InputError("cfm_eval: empty batch");
  BatchEval ev;
  ev.per_item.reserve(items.size());
  if (want_grads) ev.grads = ModelParams::zeros_like(params);
  const double batch_n = static_cast<double>(items.size());

  for (std::size_t i = 0; i < items.size(); ++i) {
    const PreparedCfmItem& item = items[i];
    ForwardCache cache;
    const Tensor v = forward(params, item.path.t, item.path.y_t, item.cond,
                             want_grads ? &cache : nullptr);
    const std::size_t entries = v.size();
    Tensor resid(v.dims());
    double sq = 0.0;
    for (std::size_t j = 0; j < entries; ++j) {
      resid[j] = v[j] - item.path.u_t[j];
      sq += resid[j] * resid[j];
    }
    const double item_loss = sq / static_cast<double>(entries);
    if (!std::isfinite(item_loss))
      throw NumericError("non-finite CFM loss at batch index " + std::to_string(i));
    ev.per_item.push_back(item_loss);
    if (want_grads) {
      const double scale = 2.0 / (static_cast<double>(entries) * batch_n);
      Tensor d_velocity(v.dims());
      for (std::size_t j = 0; j < entries; ++j) d_velocity[j] = scale * resid[j];
      backprop(params, cache, d_velocity, ev.grads);
    }
  }
  for (double l : ev.per_item) ev.loss += l;
  ev.loss /= batch_n;
  return ev;
}

inline double cfm_loss(const ModelParams& params, const std::vector<CfmExample>& batch,
                       double dropout_p, std::uint64_t seed) {
  return cfm_eval(params, prepare_cfm_batch(batch, dropout_p, seed), false).loss;
}

inline BatchEval cfm_loss_and_grad(const ModelParams& params,
                                   const std::vector<CfmExample>& batch, double dropout_p,
                                   std::uint64_t seed) {
  return cfm_eval(params, prepare_cfm_batch(batch, dropout_p, seed), true);
}

// ---------------------------------------------------------------------------
// Staged training loop (pretraining and SFT share it; only the data and the
// stage constants differ).
// ---------------------------------------------------------------------------

enum class TrainStage { Pretrain, Sft };

inline const char* stage_name(TrainStage s) {
  return s == TrainStage::Pretrain ? "pretrain" : "sft";
}

struct TrainConfig {
  TrainStage stage = TrainStage::Pretrain;
  double lr = 1e-4;  // pretrain default; SFT default is 1e-5
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double dropout_p = 0.2;
  std::uint64_t seed = 0;
  std::size_t l_max = 2048;  // sequences are truncated to this many frames
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double ema_decay = 0.99;
  std::uint64_t ema_interval = 100;
};

struct TrainResult {
  ModelParams params;
  EmaState ema;
  OptimState opt;
  std::vector<double> epoch_losses;
};

// Supplies the example at `index` for `epoch`; the pipeline re-perturbs lyric
// alignments here so each epoch sees fresh jitter.
using ExampleFn = std::function<CfmExample(std::size_t epoch, std::size_t index)>;

inline CfmExample truncate_example(CfmExample ex, std::size_t l_max) {
  const std::size_t L = ex.y_plus.rows();
  if (L <= l_max) return ex;
  Tensor y = Tensor::matrix(l_max, ex.y_plus.cols());
  Tensor lyr = Tensor::matrix(l_max, ex.cond.lyric_frames.cols());
  for (std::size_t r = 0; r < l_max; ++r) {
    for (std::size_t d = 0; d < y.cols(); ++d) y.at(r, d) = ex.y_plus.at(r, d);
    for (std::size_t e = 0; e < lyr.cols(); ++e) lyr.at(r, e) = ex.cond.lyric_frames.at(r, e);
  }
  ex.y_plus = std::move(y);
  ex.cond.lyric_frames = std::move(lyr);
  return ex;
}

// Shuffled minibatch AdamW on the CFM loss with condition dropout and an EMA
// shadow. Writes one tab-separated line per epoch:
// epoch, stage, mean loss, wall-clock seconds.
inline TrainResult train(const TrainConfig& cfg, std::size_t n_examples,
                         const ExampleFn& example_at, const ModelParams& init,
                         std::ostream* log = nullptr) {
  if (n_examples == 0) throw InputError("train: dataset is empty");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) throw ConfigError("train: lr must be positive");

  TrainResult res;
  res.params = init;
  res.ema = EmaState::init(init, cfg.ema_decay, cfg.ema_interval);
  res.opt = OptimState::init(init, AdamWConfig{cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                                               cfg.adam_eps, cfg.weight_decay});

  std::vector<std::size_t> order(n_examples);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(seed_mix(cfg.seed, kStreamShuffle, epoch));
    for (std::size_t i = n_examples; i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.bounded(i)]);

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < n_examples; start += cfg.batch_size, ++step) {
      const std::size_t stop = std::min(start + cfg.batch_size, n_examples);
      std::vector<CfmExample> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i)
        batch.push_back(truncate_example(example_at(epoch, order[i]), cfg.l_max));

      const std::uint64_t batch_seed = seed_mix(cfg.seed, kStreamPath, epoch, step);
      BatchEval ev;
      try {
        ev = cfm_loss_and_grad(res.params, batch, cfg.dropout_p, batch_seed);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step) + ", batch seed " +
                           std::to_string(batch_seed) + ")");
      }
      adamw_step(res.opt, res.params, ev.grads);
      ema_update(res.ema, res.params);
      loss_sum += ev.loss * static_cast<double>(batch.size());
      loss_count += batch.size();
    }

    const double mean_loss = loss_sum / static_cast<double>(loss_count);
    res.epoch_losses.push_back(mean_loss);
    if (log) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      (*log) << epoch << '\t' << stage_name(cfg.stage) << '\t' << mean_loss << '\t' << secs
             << '\n';
    }
  }
  return res;
}

inline TrainResult train(const TrainConfig& cfg, const std::vector<CfmExample>& dataset,
                         const ModelParams& init, std::ostream* log = nullptr) {
  return train(
      cfg, dataset.size(),
      [&dataset](std::size_t, std::size_t index) { return dataset[index]; }, init, log);
}

}  // namespace latentflow
