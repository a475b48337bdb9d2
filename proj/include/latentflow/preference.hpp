#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/cfm.hpp"
#include "latentflow/conditioning.hpp"
#include "latentflow/errors.hpp"
#include "latentflow/io.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/synth_data.hpp"
#include "latentflow/vectorfield.hpp"

namespace latentflow {

enum class ScoreSource : std::uint8_t { SongLike = 0, InstrumentalLike = 1 };

// Aesthetic score on the common 1-5 scale. InstrumentalLike scorers report
// raw 1-10 values and are normalized by map_score_10_to_5.
struct AestheticScore {
  double value = 1.0;
  ScoreSource source = ScoreSource::SongLike;
};

// Affine 1-10 -> 1-5 map; endpoints map to endpoints. Evaluated as
// (s-1)*4/9 + 1 with the multiply first so grid midpoints stay exact.
inline double map_score_10_to_5(double s) {
  if (!(s >= 1.0 && s <= 10.0))
    throw InputError("map_score_10_to_5: score outside [1,10]");
  return 1.0 + ((s - 1.0) * 4.0) / 9.0;
}

// Optional prompt context handed to scorers; built-in scorers ignore it.
struct PromptContext {
  const StylePrompt* style = nullptr;
  const LyricAlignment* lyrics = nullptr;
};

class Scorer {
 public:
  virtual ~Scorer() = default;
  // Raw score in the source's native scale.
  virtual AestheticScore raw_score(const LatentSeq& x, const PromptContext& ctx) const = 0;
};

// Normalizes a scorer's output onto the 1-5 scale and validates the result.
inline AestheticScore score_sample(const Scorer& scorer, const LatentSeq& x,
                                   const PromptContext& ctx = {}) {
  AestheticScore s = scorer.raw_score(x, ctx);
  if (!std::isfinite(s.value)) throw ScoringError("scorer produced a non-finite value");
  if (s.source == ScoreSource::InstrumentalLike) {
    if (!(s.value >= 1.0 && s.value <= 10.0))
      throw ScoringError("instrumental-style score outside [1,10]");
    s.value = map_score_10_to_5(s.value);
  } else if (!(s.value >= 1.0 && s.value <= 5.0)) {
    throw ScoringError("song-style score outside [1,5]");
  }
  return s;
}

// Scores the affinity of a sample's mean frame to the closest of a set of
// target points: score = 1 + 4*exp(-d^2 / (2 sigma^2)). A single target is
// the preference-shaping scorer; all mixture means make a typicality filter.
class ModeAffinityScorer : public Scorer {
 public:
  ModeAffinityScorer(std::vector<std::vector<double>> targets, double sigma,
                     ScoreSource source = ScoreSource::SongLike)
      : targets_(std::move(targets)), sigma_(sigma), source_(source) {
    if (targets_.empty()) throw ConfigError("ModeAffinityScorer needs at least one target");
    if (!(sigma_ > 0.0)) throw ConfigError("ModeAffinityScorer sigma must be positive");
  }

  AestheticScore raw_score(const LatentSeq& x, const PromptContext&) const override {
    std::vector<double> mean(x.dim(), 0.0);
    for (std::size_t t = 0; t < x.len(); ++t)
      for (std::size_t d = 0; d < x.dim(); ++d) mean[d] += x.frames.at(t, d);
    for (auto& m : mean) m /= static_cast<double>(x.len());

    double best_d2 = std::numeric_limits<double>::infinity();
    for (const auto& target : targets_) {
      if (target.size() != mean.size())
        throw ScoringError("ModeAffinityScorer target dimension mismatch");
      double d2 = 0.0;
      for (std::size_t d = 0; d < mean.size(); ++d) {
        const double diff = mean[d] - target[d];
        d2 += diff * diff;
      }
      best_d2 = std::min(best_d2, d2);
    }
    const double affinity = std::exp(-best_d2 / (2.0 * sigma_ * sigma_));
    const double hi = source_ == ScoreSource::InstrumentalLike ? 9.0 : 4.0;
    return {1.0 + hi * affinity, source_};
  }

 private:
  std::vector<std::vector<double>> targets_;
  double sigma_;
  ScoreSource source_;
};

class ConstantScorer : public Scorer {
 public:
  explicit ConstantScorer(double value, ScoreSource source = ScoreSource::SongLike)
      : value_(value), source_(source) {}
  AestheticScore raw_score(const LatentSeq&, const PromptContext&) const override {
    return {value_, source_};
  }

 private:
  double value_;
  ScoreSource source_;
};

// ---------------------------------------------------------------------------
// Win-lose pair construction.
// ---------------------------------------------------------------------------

struct ScoredSample {
  LatentSeq sample;
  AestheticScore score;
};

struct PreferencePair {
  StylePrompt prompt_style;
  LyricAlignment prompt_lyrics;
  LatentSeq winner;
  LatentSeq loser;
  AestheticScore score_w;
  AestheticScore score_l;
};

struct DpoConfig {
  double beta = 2000.0;
  double gap = 0.4;
  double winner_floor = 3.0;
  std::size_t epochs = 8;
  double lr = 1e-6;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double ema_decay = 0.99;
  std::uint64_t ema_interval = 100;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("dpo beta must be positive");
    if (!(gap >= 0.0)) throw ConfigError("dpo gap must be non-negative");
    if (!(lr > 0.0)) throw ConfigError("dpo lr must be positive");
    if (batch_size < 1) throw ConfigError("dpo batch_size must be >= 1");
  }
};

// Winner = argmax score, loser = argmin score, ties broken by the lowest
// index. The pair survives only if score_w - score_l > gap and
// score_w > winner_floor.
inline std::optional<PreferencePair> build_pairs(const std::vector<ScoredSample>& batch,
                                                 const StylePrompt& prompt_style,
                                                 const LyricAlignment& prompt_lyrics,
                                                 const DpoConfig& cfg) {
  if (batch.size() < 2) throw InputError("build_pairs: need at least two candidates");
  std::size_t best = 0, worst = 0;
  for (std::size_t i = 1; i < batch.size(); ++i) {
    if (batch[i].score.value > batch[best].score.value) best = i;
    if (batch[i].score.value < batch[worst].score.value) worst = i;
  }
  const double w = batch[best].score.value;
  const double l = batch[worst].score.value;
  if (!(w - l > cfg.gap)) return std::nullopt;
  if (!(w > cfg.winner_floor)) return std::nullopt;
  PreferencePair pair;
  pair.prompt_style = prompt_style;
  pair.prompt_lyrics = prompt_lyrics;
  pair.winner = batch[best].sample;
  pair.loser = batch[worst].sample;
  pair.score_w = batch[best].score;
  pair.score_l = batch[worst].score;
  return pair;
}

// Keeps exactly the samples scoring at or above the threshold, in order.
inline Dataset filter_dataset(const Dataset& ds, const Scorer& scorer, double threshold) {
  Dataset out;
  out.frame_rate = ds.frame_rate;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const AestheticScore s = score_sample(scorer, ds.samples[i]);
    if (s.value >= threshold) {
      out.samples.push_back(ds.samples[i]);
      out.mode_labels.push_back(ds.mode_labels[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Diffusion-DPO loss adapted to the flow-matching field: the L2 noise
// estimation error is replaced by the per-entry mean velocity regression
// error e(params, x) = |v(t, y_t(x), c) - u_t(x)|^2 / (L*D), evaluated at one
// (t, y-) draw shared by {theta, theta_ref} x {winner, loser}.
// ---------------------------------------------------------------------------

// A pair with its conditioning already embedded.
struct DpoItem {
  ConditionBundle cond;
  Tensor winner;  // {L, D}
  Tensor loser;   // {L, D}
};

// -log sigma(-beta*h) with h = (e_tw - e_rw) - (e_tl - e_rl), computed as
// softplus(beta*h) for stability. h == 0 gives exactly ln 2.
inline double dpo_loss_from_errors(double e_theta_w, double e_ref_w, double e_theta_l,
                                   double e_ref_l, double beta) {
  const double h = (e_theta_w - e_ref_w) - (e_theta_l - e_ref_l);
  const double z = beta * h;
  const double loss = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
  if (!std::isfinite(loss)) throw NumericError("non-finite DPO loss");
  return loss;
}

namespace detail {

struct PairErrors {
  double e_theta_w, e_ref_w, e_theta_l, e_ref_l;
  // kept for the backward pass
  PathSample path_w, path_l;
  ForwardCache cache_w, cache_l;
  Tensor resid_w, resid_l;
};

inline double velocity_error(const ModelParams& params, const PathSample& path,
                             const ConditionBundle& cond, ForwardCache* cache,
                             Tensor* resid_out) {
  const Tensor v = forward(params, path.t, path.y_t, cond, cache);
  double sq = 0.0;
  Tensor resid(v.dims());
  for (std::size_t j = 0; j < v.size(); ++j) {
    resid[j] = v[j] - path.u_t[j];
    sq += resid[j] * resid[j];
  }
  if (resid_out) *resid_out = std::move(resid);
  return sq / static_cast<double>(v.size());
}

inline PairErrors pair_errors(const ModelParams& params, const ModelParams& ref,
                              const DpoItem& item, std::uint64_t seed, bool want_grads) {
  Rng rng(seed);
  const double t = rng.uniform();
  Tensor y_minus(item.winner.dims());
  rng.fill_normal(y_minus.data(), y_minus.size());

  PairErrors pe;
  pe.path_w = sample_path_point(y_minus, item.winner, t);
  pe.path_l = sample_path_point(y_minus, item.loser, t);
  pe.e_theta_w = velocity_error(params, pe.path_w, item.cond,
                                want_grads ? &pe.cache_w : nullptr,
                                want_grads ? &pe.resid_w : nullptr);
  pe.e_theta_l = velocity_error(params, pe.path_l, item.cond,
                                want_grads ? &pe.cache_l : nullptr,
                                want_grads ? &pe.resid_l : nullptr);
  pe.e_ref_w = velocity_error(ref, pe.path_w, item.cond, nullptr, nullptr);
  pe.e_ref_l = velocity_error(ref, pe.path_l, item.cond, nullptr, nullptr);
  return pe;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

inline double dpo_loss(const ModelParams& params, const ModelParams& ref, const DpoItem& item,
                       double beta, std::uint64_t seed) {
  const auto pe = detail::pair_errors(params, ref, item, seed, false);
  return dpo_loss_from_errors(pe.e_theta_w, pe.e_ref_w, pe.e_theta_l, pe.e_ref_l, beta);
}

struct DpoEval {
  double loss = 0.0;
  ModelParams grads;
};

// Mean DPO loss over a batch of pairs with exact gradients. Pair i draws its
// shared (t, y-) from seed_mix(seed, i).
inline DpoEval dpo_loss_and_grad(const ModelParams& params, const ModelParams& ref,
                                 const std::vector<DpoItem>& items, double beta,
                                 std::uint64_t seed) {
  if (items.empty()) throw InputError("dpo_loss_and_grad: empty batch");
  DpoEval ev;
  ev.grads = ModelParams::zeros_like(params);
  const double batch_n = static_cast<double>(items.size());

  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::uint64_t item_seed = seed_mix(seed, i, kStreamPairs);
    auto pe = detail::pair_errors(params, ref, items[i], item_seed, true);
    const double loss =
        dpo_loss_from_errors(pe.e_theta_w, pe.e_ref_w, pe.e_theta_l, pe.e_ref_l, beta);
    if (!std::isfinite(loss))
      throw NumericError("non-finite DPO loss at pair index " + std::to_string(i));
    ev.loss += loss;

    // dL/dh = beta * sigmoid(beta*h); h moves +1 with e_theta_w, -1 with e_theta_l
    const double h = (pe.e_theta_w - pe.e_ref_w) - (pe.e_theta_l - pe.e_ref_l);
    const double dh = beta * detail::sigmoid(beta * h) / batch_n;

    const double entries_w = static_cast<double>(pe.resid_w.size());
    Tensor dv_w(pe.resid_w.dims());
    for (std::size_t j = 0; j < pe.resid_w.size(); ++j)
      dv_w[j] = dh * 2.0 * pe.resid_w[j] / entries_w;
    backprop(params, pe.cache_w, dv_w, ev.grads);

    const double entries_l = static_cast<double>(pe.resid_l.size());
    Tensor dv_l(pe.resid_l.dims());
    for (std::size_t j = 0; j < pe.resid_l.size(); ++j)
      dv_l[j] = -dh * 2.0 * pe.resid_l[j] / entries_l;
    backprop(params, pe.cache_l, dv_l, ev.grads);
  }
  ev.loss /= batch_n;
  return ev;
}

struct DpoTrainResult {
  ModelParams params;
  EmaState ema;
  OptimState opt;
  std::vector<double> epoch_losses;
};

// AdamW on the mean pair loss against a frozen clone of the starting
// parameters. Deterministic in cfg.seed; logs one TSV line per epoch.
inline DpoTrainResult dpo_train(const DpoConfig& cfg, const std::vector<DpoItem>& items,
                                const ModelParams& start, std::ostream* log = nullptr) {
  cfg.validate();
  if (items.empty()) throw InputError("dpo_train: no preference pairs");

  const ModelParams ref = start;  // frozen reference
  DpoTrainResult res;
  res.params = start;
  res.ema = EmaState::init(start, cfg.ema_decay, cfg.ema_interval);
  res.opt = OptimState::init(start, AdamWConfig{cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                                                cfg.adam_eps, cfg.weight_decay});

  std::vector<std::size_t> order(items.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(seed_mix(cfg.seed, kStreamShuffle, epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.bounded(i)]);

    double loss_sum = 0.0;
    std::size_t count = 0;
    std::size_t step = 0;
    for (std::size_t start_i = 0; start_i < items.size(); start_i += cfg.batch_size, ++step) {
      const std::size_t stop = std::min(start_i + cfg.batch_size, items.size());
      std::vector<DpoItem> batch;
      batch.reserve(stop - start_i);
      for (std::size_t i = start_i; i < stop; ++i) batch.push_back(items[order[i]]);

      const std::uint64_t batch_seed = seed_mix(cfg.seed, kStreamPairs, epoch, step);
      DpoEval ev;
      try {
        ev = dpo_loss_and_grad(res.params, ref, batch, cfg.beta, batch_seed);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step) + ", batch seed " +
                           std::to_string(batch_seed) + ")");
      }
      adamw_step(res.opt, res.params, ev.grads);
      ema_update(res.ema, res.params);
      loss_sum += ev.loss * static_cast<double>(batch.size());
      count += batch.size();
    }

    const double mean_loss = loss_sum / static_cast<double>(count);
    res.epoch_losses.push_back(mean_loss);
    if (log) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      (*log) << epoch << '\t' << "dpo" << '\t' << mean_loss << '\t' << secs << '\n';
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Pair store file: magic "DRPP", u32 version=1, u32 count, then per pair:
//   prompt: u8 modality (0 audio, 1 text) + payload
//     audio payload: LatentSeq block
//     text payload:  u32 tag count, u32 tag ids
//   lyric alignment: u32 token count, (u32 token id, u32 start frame) each
//   winner LatentSeq block, loser LatentSeq block
//   f64 winner score, f64 loser score
// LatentSeq block: u32 L, u32 D, f64 frame_rate, L*D f64 row-major.
// ---------------------------------------------------------------------------

inline constexpr char kPairMagic[4] = {'D', 'R', 'P', 'P'};
inline constexpr std::uint32_t kPairVersion = 1;

namespace detail {

inline void write_latent(ByteWriter& w, const LatentSeq& s) {
  w.u32(static_cast<std::uint32_t>(s.len()));
  w.u32(static_cast<std::uint32_t>(s.dim()));
  w.f64(s.frame_rate);
  for (std::size_t i = 0; i < s.frames.size(); ++i) w.f64(s.frames[i]);
}

inline LatentSeq read_latent(ByteReader& r) {
  LatentSeq s;
  const std::uint32_t L = r.u32();
  const std::uint32_t D = r.u32();
  s.frame_rate = r.f64();
  s.frames = Tensor::matrix(L, D);
  for (std::size_t i = 0; i < s.frames.size(); ++i) s.frames[i] = r.f64();
  return s;
}

}  // namespace detail

inline void save_pairs(const std::vector<PreferencePair>& pairs, const std::string& path) {
  ByteWriter w;
  w.magic(kPairMagic);
  w.u32(kPairVersion);
  w.u32(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& p : pairs) {
    if (p.prompt_style.modality == StylePrompt::Modality::Audio) {
      w.u8(0);
      detail::write_latent(w, *p.prompt_style.audio_latent);
    } else {
      w.u8(1);
      w.u32(static_cast<std::uint32_t>(p.prompt_style.text_tags.size()));
      for (std::uint32_t tag : p.prompt_style.text_tags) w.u32(tag);
    }
    w.u32(static_cast<std::uint32_t>(p.prompt_lyrics.size()));
    for (std::size_t i = 0; i < p.prompt_lyrics.size(); ++i) {
      w.u32(p.prompt_lyrics.token_ids[i]);
      w.u32(p.prompt_lyrics.start_frames[i]);
    }
    detail::write_latent(w, p.winner);
    detail::write_latent(w, p.loser);
    w.f64(p.score_w.value);
    w.f64(p.score_l.value);
  }
  write_file(path, w.buffer());
}

inline std::vector<PreferencePair> load_pairs(const std::string& path) {
  const auto buf = read_file(path);
  ByteReader r(buf);
  r.expect_magic(kPairMagic, "pair store");
  const std::uint32_t version = r.u32();
  if (version != kPairVersion)
    throw PersistenceError("pair store: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<PreferencePair> pairs;
  pairs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PreferencePair p;
    const std::uint8_t modality = r.u8();
    if (modality == 0) {
      p.prompt_style = StylePrompt::audio(detail::read_latent(r));
    } else if (modality == 1) {
      const std::uint32_t n_tags = r.u32();
      std::vector<std::uint32_t> tags(n_tags);
      for (auto& tag : tags) tag = r.u32();
      p.prompt_style = StylePrompt::text(std::move(tags));
    } else {
      throw PersistenceError("pair store: unknown prompt modality byte");
    }
    const std::uint32_t n_tokens = r.u32();
    p.prompt_lyrics.token_ids.resize(n_tokens);
    p.prompt_lyrics.start_frames.resize(n_tokens);
    for (std::uint32_t j = 0; j < n_tokens; ++j) {
      p.prompt_lyrics.token_ids[j] = r.u32();
      p.prompt_lyrics.start_frames[j] = r.u32();
    }
    p.winner = detail::read_latent(r);
    p.loser = detail::read_latent(r);
    p.score_w.value = r.f64();
    p.score_l.value = r.f64();
    pairs.push_back(std::move(p));
  }
  if (!r.at_end()) throw PersistenceError("pair store: trailing bytes");
  return pairs;
}

}  // namespace latentflow
