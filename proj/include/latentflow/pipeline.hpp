#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/cfm.hpp"
#include "latentflow/checkpoint.hpp"
#include "latentflow/conditioning.hpp"
#include "latentflow/config.hpp"
#include "latentflow/errors.hpp"
#include "latentflow/metrics.hpp"
#include "latentflow/preference.hpp"
#include "latentflow/sampler.hpp"
#include "latentflow/synth_data.hpp"
#include "latentflow/vectorfield.hpp"

namespace latentflow {

// ---------------------------------------------------------------------------
// Logging. DRP_LOG in {quiet, info, debug}; default info.
// ---------------------------------------------------------------------------

enum class LogLevel : int { Quiet = 0, Info = 1, Debug = 2 };

inline LogLevel log_level() {
  static const LogLevel lvl = [] {
    const char* env = std::getenv("DRP_LOG");
    if (!env) return LogLevel::Info;
    const std::string s(env);
    if (s == "quiet") return LogLevel::Quiet;
    if (s == "debug") return LogLevel::Debug;
    return LogLevel::Info;
  }();
  return lvl;
}

inline void log_info(const std::string& msg) {
  if (static_cast<int>(log_level()) >= static_cast<int>(LogLevel::Info))
    std::cerr << "[info] " << msg << '\n';
}

inline void log_debug(const std::string& msg) {
  if (static_cast<int>(log_level()) >= static_cast<int>(LogLevel::Debug))
    std::cerr << "[debug] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Conditioning tables and synthetic prompts. Everything derives from the
// master seed so a rerun reproduces every prompt and alignment bit-exactly.
// ---------------------------------------------------------------------------

struct CondTables {
  ProjectionTable proj;
  TokenEmbeddingTable tok;
};

inline CondTables make_tables(const RunConfig& cfg) {
  return CondTables{
      ProjectionTable(cfg.style_dim, cfg.latent_dim, cfg.tag_vocab, cfg.seed),
      TokenEmbeddingTable(cfg.token_vocab, cfg.lyric_embed_dim, cfg.seed)};
}

inline CondTables tables_from_checkpoint(const Checkpoint& c) {
  return CondTables{c.projection_table(), c.token_table()};
}

// Random alignment: lyric_tokens distinct start frames, random token ids.
// Starts are drawn from [0, L - jitter - k + 1) so that temporal perturbation
// with the configured jitter can always resolve collisions inside the frame
// range (worst case: all k starts collapse and cascade k-1 slots forward).
inline LyricAlignment synth_alignment(const RunConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t jitter = std::min(cfg.jitter_frames, cfg.seq_len - 1);
  std::size_t k = std::min(cfg.lyric_tokens, cfg.seq_len);
  k = std::min(k, (cfg.seq_len - jitter + 1) / 2);
  const std::size_t pool = cfg.seq_len - jitter - (k > 0 ? k - 1 : 0);
  std::vector<std::uint32_t> frames(pool);
  for (std::size_t i = 0; i < frames.size(); ++i) frames[i] = static_cast<std::uint32_t>(i);
  for (std::size_t i = frames.size(); i > 1; --i)
    std::swap(frames[i - 1], frames[rng.bounded(i)]);
  frames.resize(k);
  std::sort(frames.begin(), frames.end());
  LyricAlignment a;
  a.start_frames = std::move(frames);
  a.token_ids.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    a.token_ids.push_back(static_cast<std::uint32_t>(rng.bounded(cfg.token_vocab)));
  return a;
}

struct PromptSpec {
  StylePrompt style;
  LyricAlignment lyrics;
  std::uint32_t mode = 0;
};

// Training prompt for sample `index`: the modality is drawn per example
// (audio prompts reference the sample's own latent, text prompts carry the
// mode tag), the alignment is synthesized per example.
inline PromptSpec make_train_prompt(const RunConfig& cfg, std::size_t index,
                                    std::uint32_t mode, const LatentSeq& sample) {
  PromptSpec p;
  p.mode = mode;
  Rng rng(seed_mix(cfg.seed, kStreamPrompt, index, 0));
  if (rng.bernoulli(cfg.prompt_audio_prob))
    p.style = StylePrompt::audio(sample);
  else
    p.style = StylePrompt::text({mode});
  p.lyrics = synth_alignment(cfg, seed_mix(cfg.seed, kStreamLyrics, index, 0));
  return p;
}

// Generation prompt `index`: text modality, modes round-robin.
inline PromptSpec make_gen_prompt(const RunConfig& cfg, std::size_t index) {
  PromptSpec p;
  p.mode = static_cast<std::uint32_t>(index % cfg.mode_count);
  p.style = StylePrompt::text({p.mode});
  p.lyrics = synth_alignment(cfg, seed_mix(cfg.seed, kStreamLyrics, index, 1));
  return p;
}

inline ConditionBundle make_bundle(const PromptSpec& prompt, std::size_t frame_count,
                                   const CondTables& tables) {
  ConditionBundle c;
  c.style = embed_style(prompt.style, tables.proj).vec;
  c.lyric_frames = embed_lyrics(prompt.lyrics, frame_count, tables.tok);
  return c;
}

// ---------------------------------------------------------------------------
// Stage: data generation.
// ---------------------------------------------------------------------------

inline void run_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const MixtureSpec spec = make_mixture_spec(cfg);
  const Dataset train = make_mixture_dataset(spec, cfg.n_train, seed_mix(cfg.seed, kStreamData, 0));
  const Dataset eval = make_mixture_dataset(spec, cfg.n_eval, seed_mix(cfg.seed, kStreamData, 1));
  save_dataset(train, out_dir + "/train.drpd");
  save_dataset(eval, out_dir + "/eval.drpd");
  log_info("wrote " + std::to_string(train.size()) + " train and " +
           std::to_string(eval.size()) + " eval sequences to " + out_dir);
}

// ---------------------------------------------------------------------------
// Stage: pretrain / SFT.
// ---------------------------------------------------------------------------

// Typicality scorer for SFT filtering: affinity to the nearest mixture mode.
inline ModeAffinityScorer make_filter_scorer(const RunConfig& cfg) {
  const MixtureSpec spec = make_mixture_spec(cfg);
  std::vector<std::vector<double>> targets;
  for (const auto& m : spec.modes) targets.push_back(m.mean);
  return ModeAffinityScorer(std::move(targets), cfg.score_sigma);
}

// Preference scorer for DPO: affinity to the configured target mode.
inline ModeAffinityScorer make_target_scorer(const RunConfig& cfg) {
  const MixtureSpec spec = make_mixture_spec(cfg);
  return ModeAffinityScorer({spec.modes[cfg.target_mode].mean}, cfg.score_sigma);
}

inline Checkpoint run_train_stage(const RunConfig& cfg, Stage stage, const Dataset& data,
                                  const Checkpoint* prev, std::ostream* train_log) {
  if (stage != Stage::Pretrain && stage != Stage::Sft)
    throw InputError("run_train_stage handles pretrain and sft only");

  const Dataset* active = &data;
  Dataset filtered;
  if (stage == Stage::Sft) {
    const auto scorer = make_filter_scorer(cfg);
    filtered = filter_dataset(data, scorer, cfg.sft_filter_threshold);
    if (filtered.size() == 0)
      throw InputError("sft filter retained no samples; lower sft_filter_threshold");
    log_info("sft filter kept " + std::to_string(filtered.size()) + " of " +
             std::to_string(data.size()) + " samples");
    active = &filtered;
  }

  const ModelConfig mc = make_model_config(cfg);
  CondTables tables = prev ? tables_from_checkpoint(*prev) : make_tables(cfg);
  const ModelParams init =
      prev ? prev->params : ModelParams::seeded_init(mc, cfg.seed);

  TrainConfig tc;
  tc.stage = stage == Stage::Pretrain ? TrainStage::Pretrain : TrainStage::Sft;
  tc.lr = stage == Stage::Pretrain ? cfg.lr_pretrain : cfg.lr_sft;
  tc.epochs = stage == Stage::Pretrain ? cfg.pretrain_epochs : cfg.sft_epochs;
  tc.batch_size = cfg.batch_size;
  tc.dropout_p = cfg.dropout;
  tc.seed = seed_mix(cfg.seed, static_cast<std::uint64_t>(stage), 0xA11);
  tc.l_max = stage == Stage::Pretrain ? cfg.l_max_pretrain : cfg.l_max_sft;
  tc.adam_beta1 = cfg.adam_beta1;
  tc.adam_beta2 = cfg.adam_beta2;
  tc.adam_eps = cfg.adam_eps;
  tc.weight_decay = cfg.weight_decay;
  tc.ema_decay = cfg.ema_decay;
  tc.ema_interval = cfg.ema_interval;

  const Dataset& ds = *active;
  auto example_at = [&cfg, &ds, &tables](std::size_t epoch, std::size_t index) {
    const LatentSeq& sample = ds.samples[index];
    const PromptSpec base = make_train_prompt(cfg, index, ds.mode_labels[index], sample);
    const LyricAlignment jittered =
        perturb_alignment(base.lyrics, static_cast<std::uint32_t>(cfg.jitter_frames),
                          sample.len(), seed_mix(cfg.seed, kStreamJitter, epoch, index));
    CfmExample ex;
    ex.y_plus = sample.frames;
    ex.cond = make_bundle(PromptSpec{base.style, jittered, base.mode}, sample.len(), tables);
    return ex;
  };

  const TrainResult result = train(tc, ds.size(), example_at, init, train_log);

  Checkpoint out;
  out.config = cfg;
  out.stage = stage;
  out.params = result.params;
  out.ema = result.ema;
  out.opt = result.opt;
  out.cond_audio_proj = tables.proj.audio_proj();
  out.cond_text_proj = tables.proj.text_proj();
  out.cond_token_emb = tables.tok.embeddings();
  {
    const auto& filler = tables.tok.filler();
    out.cond_filler = Tensor::vector(filler.size());
    for (std::size_t i = 0; i < filler.size(); ++i) out.cond_filler[i] = filler[i];
  }
  out.rng_seed = cfg.seed;
  return out;
}

// ---------------------------------------------------------------------------
// Stage: sampling.
// ---------------------------------------------------------------------------

inline const ModelParams& sampling_params(const RunConfig& cfg, const Checkpoint& ckpt) {
  return cfg.use_ema ? ckpt.ema.shadow : ckpt.params;
}

// Generates n sequences with round-robin text prompts; sample i draws its
// noise from (seed, kStreamSample, i).
inline Dataset generate_samples(const RunConfig& cfg, const Checkpoint& ckpt, std::size_t n) {
  const CondTables tables = tables_from_checkpoint(ckpt);
  const ModelParams& params = sampling_params(cfg, ckpt);
  Dataset out;
  out.frame_rate = cfg.frame_rate;
  out.samples.reserve(n);
  out.mode_labels.assign(n, kUnknownModeLabel);
  for (std::size_t i = 0; i < n; ++i) {
    const PromptSpec prompt = make_gen_prompt(cfg, i);
    const ConditionBundle cond = make_bundle(prompt, cfg.seq_len, tables);
    SampleConfig sc;
    sc.steps = cfg.steps;
    sc.cfg_scale = cfg.cfg_scale;
    sc.seed = seed_mix(cfg.seed, kStreamSample, i);
    sc.use_ema = cfg.use_ema;
    out.samples.push_back(euler_sample(params, cond, sc, cfg.frame_rate));
  }
  return out;
}

struct SampleRunReport {
  std::size_t n = 0;
  std::size_t total_frames = 0;
  double elapsed_seconds = 0.0;
  double rtf_value = 0.0;
};

// Writes samples to `out_file` and, when given, appends an RTF line to the
// timing log (timing is the one non-deterministic output, so it lives apart
// from the eval report).
inline SampleRunReport run_sample(const RunConfig& cfg, const Checkpoint& ckpt, std::size_t n,
                                  const std::string& out_file,
                                  std::ostream* timing_log = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset samples = generate_samples(cfg, ckpt, n);
  const auto t1 = std::chrono::steady_clock::now();

  save_dataset(samples, out_file);

  SampleRunReport rep;
  rep.n = n;
  rep.total_frames = n * cfg.seq_len;
  rep.elapsed_seconds = std::chrono::duration<double>(t1 - t0).count();
  rep.rtf_value = rtf(rep.elapsed_seconds, rep.total_frames, cfg.frame_rate);
  if (timing_log) {
    append_metric(*timing_log, "elapsed_seconds", rep.elapsed_seconds, rep.n);
    append_metric(*timing_log, "rtf", rep.rtf_value, rep.n);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Stage: preference optimization.
// ---------------------------------------------------------------------------

struct MiningResult {
  std::vector<PreferencePair> pairs;
  std::size_t prompts = 0;
  std::size_t candidates_scored = 0;
  std::size_t skipped = 0;
};

// For each prompt: generate a candidate batch, score it, and keep the
// win-lose pair if it clears the gap and floor thresholds. With
// winner_source == "ground_truth" the winner is a dataset sample of the
// prompt's mode and only the loser comes from the model.
inline MiningResult mine_pairs(const RunConfig& cfg, const Checkpoint& ckpt,
                               const Scorer& scorer, const Dataset* gt_data) {
  const CondTables tables = tables_from_checkpoint(ckpt);
  const ModelParams& params = sampling_params(cfg, ckpt);
  const bool gt_winner = cfg.winner_source == "ground_truth";
  if (gt_winner && (gt_data == nullptr || gt_data->size() == 0))
    throw InputError("winner_source=ground_truth requires a dataset");

  DpoConfig pair_cfg;
  pair_cfg.gap = cfg.gap;
  pair_cfg.winner_floor = cfg.winner_floor;

  MiningResult res;
  res.prompts = cfg.dpo_prompts;
  for (std::size_t j = 0; j < cfg.dpo_prompts; ++j) {
    const PromptSpec prompt = make_gen_prompt(cfg, j);
    const ConditionBundle cond = make_bundle(prompt, cfg.seq_len, tables);
    PromptContext ctx{&prompt.style, &prompt.lyrics};

    std::vector<ScoredSample> batch;
    batch.reserve(cfg.candidates_per_prompt);
    for (std::size_t c = 0; c < cfg.candidates_per_prompt; ++c) {
      SampleConfig sc;
      sc.steps = cfg.steps;
      sc.cfg_scale = cfg.cfg_scale;
      sc.seed = seed_mix(cfg.seed, kStreamCandidates, j, c);
      LatentSeq candidate = euler_sample(params, cond, sc, cfg.frame_rate);
      try {
        AestheticScore s = score_sample(scorer, candidate, ctx);
        batch.push_back(ScoredSample{std::move(candidate), s});
        ++res.candidates_scored;
      } catch (const ScoringError& e) {
        ++res.skipped;
        log_info("scoring failed for prompt " + std::to_string(j) + " candidate " +
                 std::to_string(c) + ": " + e.what());
      }
    }
    if (batch.size() < 2) continue;

    std::optional<PreferencePair> pair;
    if (gt_winner) {
      // deterministic pick of a ground-truth sample carrying the prompt mode
      std::vector<std::size_t> hits;
      for (std::size_t i = 0; i < gt_data->size(); ++i)
        if (gt_data->mode_labels[i] == prompt.mode) hits.push_back(i);
      if (hits.empty())
        throw InputError("dataset has no samples of mode " + std::to_string(prompt.mode));
      const LatentSeq& gt = gt_data->samples[hits[j % hits.size()]];
      const AestheticScore w = score_sample(scorer, gt, ctx);
      std::size_t worst = 0;
      for (std::size_t i = 1; i < batch.size(); ++i)
        if (batch[i].score.value < batch[worst].score.value) worst = i;
      const AestheticScore l = batch[worst].score;
      if (w.value - l.value > cfg.gap && w.value > cfg.winner_floor) {
        PreferencePair p;
        p.prompt_style = prompt.style;
        p.prompt_lyrics = prompt.lyrics;
        p.winner = gt;
        p.loser = batch[worst].sample;
        p.score_w = w;
        p.score_l = l;
        pair = std::move(p);
      }
    } else {
      pair = build_pairs(batch, prompt.style, prompt.lyrics, pair_cfg);
    }
    if (pair) res.pairs.push_back(std::move(*pair));
  }
  return res;
}

struct DpoRunResult {
  Checkpoint checkpoint;
  std::size_t pairs_mined = 0;
  std::size_t candidates_scored = 0;
  std::size_t skipped = 0;
};

inline DpoRunResult run_dpo(const RunConfig& cfg, const Checkpoint& in, const Dataset* gt_data,
                            const std::string& pairs_path = {}, std::ostream* train_log = nullptr,
                            bool allow_empty = false) {
  const auto scorer = make_target_scorer(cfg);
  MiningResult mined = mine_pairs(cfg, in, scorer, gt_data);
  log_info("mined " + std::to_string(mined.pairs.size()) + " pairs from " +
           std::to_string(mined.prompts) + " prompts");
  if (!pairs_path.empty()) save_pairs(mined.pairs, pairs_path);
  if (mined.pairs.empty()) {
    if (!allow_empty) throw InputError("no preference pairs survived the gap/floor thresholds");
    DpoRunResult out;  // nothing to train on: hand back the input model
    out.checkpoint = in;
    out.checkpoint.config = cfg;
    out.candidates_scored = mined.candidates_scored;
    out.skipped = mined.skipped;
    return out;
  }

  const CondTables tables = tables_from_checkpoint(in);
  std::vector<DpoItem> items;
  items.reserve(mined.pairs.size());
  for (const auto& p : mined.pairs) {
    DpoItem item;
    item.cond = make_bundle(PromptSpec{p.prompt_style, p.prompt_lyrics, 0}, p.winner.len(),
                            tables);
    item.winner = p.winner.frames;
    item.loser = p.loser.frames;
    items.push_back(std::move(item));
  }

  DpoConfig dc;
  dc.beta = cfg.beta;
  dc.gap = cfg.gap;
  dc.winner_floor = cfg.winner_floor;
  dc.epochs = cfg.dpo_epochs;
  dc.lr = cfg.lr_dpo;
  dc.batch_size = cfg.dpo_batch_size;
  dc.seed = seed_mix(cfg.seed, static_cast<std::uint64_t>(Stage::Dpo), 0xA11);
  dc.adam_beta1 = cfg.adam_beta1;
  dc.adam_beta2 = cfg.adam_beta2;
  dc.adam_eps = cfg.adam_eps;
  dc.weight_decay = cfg.weight_decay;
  dc.ema_decay = cfg.ema_decay;
  dc.ema_interval = cfg.ema_interval;

  const DpoTrainResult trained = dpo_train(dc, items, in.params, train_log);

  DpoRunResult out;
  out.checkpoint = in;  // carry tables + config layout
  out.checkpoint.config = cfg;
  out.checkpoint.stage = Stage::Dpo;
  out.checkpoint.params = trained.params;
  out.checkpoint.ema = trained.ema;
  out.checkpoint.opt = trained.opt;
  out.checkpoint.rng_seed = cfg.seed;
  out.pairs_mined = mined.pairs.size();
  out.candidates_scored = mined.candidates_scored;
  out.skipped = mined.skipped;
  return out;
}

// ---------------------------------------------------------------------------
// Stage: evaluation.
// ---------------------------------------------------------------------------

struct EvalReport {
  double fad = 0.0;
  double kl = 0.0;
  std::size_t n_ref = 0;
  std::size_t n_gen = 0;
};

inline EvalReport evaluate_datasets(const RunConfig& cfg, const Dataset& ref,
                                    const Dataset& gen) {
  const GridSpec grid{cfg.eval_bins, cfg.eval_lo, cfg.eval_hi};
  const auto [ref_fit, ref_hist] = featurize(ref.samples, grid);
  const auto [gen_fit, gen_hist] = featurize(gen.samples, grid);
  EvalReport rep;
  rep.fad = frechet_distance(gen_fit, ref_fit);
  rep.kl = kl_divergence(ref_hist, gen_hist);
  rep.n_ref = ref.size();
  rep.n_gen = gen.size();
  return rep;
}

inline EvalReport run_eval(const RunConfig& cfg, const std::string& ref_path,
                           const std::string& gen_path, std::ostream* report) {
  const Dataset ref = load_dataset(ref_path);
  const Dataset gen = load_dataset(gen_path);
  const EvalReport rep = evaluate_datasets(cfg, ref, gen);
  if (report) {
    append_metric(*report, "fad", rep.fad, rep.n_gen);
    append_metric(*report, "kl", rep.kl, rep.n_gen);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Stage: ablation sweeps over the gap, DPO epoch count, and winner source.
// ---------------------------------------------------------------------------

// Score distribution in the bins [1-2), [2-3), [3-4), [4-5], plus the mean
// and the share at 3 or above.
struct ScoreTableRow {
  std::string axis;
  std::string setting;
  std::array<std::size_t, 4> bins{0, 0, 0, 0};
  double mean = 0.0;
  double pct_3_5 = 0.0;
  std::size_t pairs_used = 0;
};

inline ScoreTableRow score_distribution(const RunConfig& cfg, const Checkpoint& ckpt,
                                        std::string axis, std::string setting) {
  const auto scorer = make_target_scorer(cfg);
  const Dataset samples = generate_samples(cfg, ckpt, cfg.n_eval);
  ScoreTableRow row;
  row.axis = std::move(axis);
  row.setting = std::move(setting);
  double sum = 0.0;
  std::size_t at_least_3 = 0;
  for (const auto& s : samples.samples) {
    const double v = score_sample(scorer, s).value;
    sum += v;
    if (v >= 3.0) ++at_least_3;
    const int bin = v >= 4.0 ? 3 : v >= 3.0 ? 2 : v >= 2.0 ? 1 : 0;
    ++row.bins[static_cast<std::size_t>(bin)];
  }
  row.mean = sum / static_cast<double>(samples.size());
  row.pct_3_5 = 100.0 * static_cast<double>(at_least_3) / static_cast<double>(samples.size());
  return row;
}

inline void write_score_table(const std::vector<ScoreTableRow>& rows, std::ostream& out) {
  out << "axis\tsetting\tbin_1_2\tbin_2_3\tbin_3_4\tbin_4_5\tmean\tpct_3_5\tpairs\n";
  for (const auto& r : rows) {
    out << r.axis << '\t' << r.setting << '\t' << r.bins[0] << '\t' << r.bins[1] << '\t'
        << r.bins[2] << '\t' << r.bins[3] << '\t' << r.mean << '\t' << r.pct_3_5 << '\t'
        << r.pairs_used << '\n';
  }
}

// Sweeps each axis from the base checkpoint with the other knobs at their
// configured values: gap in {0, 0.4, 0.8}, DPO epochs in {4, 8, 12}, winner
// source in {generated, ground_truth}.
inline std::vector<ScoreTableRow> run_ablate(const RunConfig& cfg, const Checkpoint& base,
                                             const Dataset* gt_data,
                                             std::ostream* train_log = nullptr) {
  std::vector<ScoreTableRow> rows;
  auto one_setting = [&](RunConfig variant, const std::string& axis, const std::string& name) {
    // a setting that mines zero pairs is scored on the unchanged base model
    const DpoRunResult res = run_dpo(variant, base, gt_data, {}, train_log,
                                     /*allow_empty=*/true);
    rows.push_back(score_distribution(variant, res.checkpoint, axis, name));
    rows.back().pairs_used = res.pairs_mined;
    log_info("ablation " + axis + "=" + name + " mean score " +
             std::to_string(rows.back().mean) + " (" + std::to_string(res.pairs_mined) +
             " pairs)");
  };

  for (const double gap : {0.0, 0.4, 0.8}) {
    RunConfig v = cfg;
    v.gap = gap;
    one_setting(v, "gap", std::to_string(gap));
  }
  for (const std::size_t epochs : {std::size_t{4}, std::size_t{8}, std::size_t{12}}) {
    RunConfig v = cfg;
    v.dpo_epochs = epochs;
    one_setting(v, "dpo_epochs", std::to_string(epochs));
  }
  for (const char* source : {"generated", "ground_truth"}) {
    RunConfig v = cfg;
    v.winner_source = source;
    one_setting(v, "winner_source", source);
  }
  return rows;
}

}  // namespace latentflow
