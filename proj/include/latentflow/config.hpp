#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentflow/errors.hpp"
#include "latentflow/synth_data.hpp"
#include "latentflow/vectorfield.hpp"

namespace latentflow {

// Every knob of the pipeline in one flat record. Defaults are the reference
// operating point: Euler steps=32, cfg_scale=4, dropout=0.2, beta=2000,
// gap=0.4, winner floor=3, EMA 0.99/100, Adam betas 0.9/0.95, staged learning
// rates 1e-4/1e-5/1e-6, SFT 10 epochs, DPO 8 epochs; everything else is desk
// scale.
struct RunConfig {
  std::uint64_t seed = 42;

  // data
  std::size_t seq_len = 16;
  std::size_t latent_dim = 2;
  double frame_rate = 10.0;
  std::size_t n_train = 512;
  std::size_t n_eval = 256;
  std::size_t n_sample = 256;
  std::size_t mode_count = 2;
  double mode_radius = 2.5;
  double mode_stdev = 0.3;
  std::vector<double> mode_weights;  // empty = uniform
  std::size_t jitter_frames = 1;
  std::size_t lyric_tokens = 4;

  // conditioning
  std::size_t style_dim = 8;
  std::size_t lyric_embed_dim = 8;
  std::size_t tag_vocab = 16;
  std::size_t token_vocab = 32;
  double prompt_audio_prob = 0.5;

  // model
  std::size_t hidden_dim = 32;
  std::size_t hidden_layers = 1;

  // training
  double dropout = 0.2;
  std::size_t batch_size = 16;
  double lr_pretrain = 1e-4;
  double lr_sft = 1e-5;
  double lr_dpo = 1e-6;
  std::size_t pretrain_epochs = 60;
  std::size_t sft_epochs = 10;
  std::size_t dpo_epochs = 8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double ema_decay = 0.99;
  std::uint64_t ema_interval = 100;
  std::size_t l_max_pretrain = 2048;
  std::size_t l_max_sft = 6144;
  double sft_filter_threshold = 3.0;

  // sampler
  int steps = 32;
  double cfg_scale = 4.0;
  bool use_ema = false;

  // preference
  double beta = 2000.0;
  double gap = 0.4;
  double winner_floor = 3.0;
  std::size_t candidates_per_prompt = 8;
  std::size_t dpo_batch_size = 8;
  std::size_t dpo_prompts = 64;
  std::string winner_source = "generated";  // or "ground_truth"
  std::size_t target_mode = 0;
  double score_sigma = 0.5;

  // eval
  std::size_t eval_bins = 8;
  double eval_lo = -4.0;
  double eval_hi = 4.0;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline double want_number(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "': expected a number");
  return v.get<double>();
}

inline std::size_t want_count(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() && !v.is_number_unsigned())
    throw ConfigError("config key '" + key + "': expected an integer");
  const auto n = v.get<std::int64_t>();
  if (n < 0) throw ConfigError("config key '" + key + "': must be non-negative");
  return static_cast<std::size_t>(n);
}

inline std::uint64_t want_u64(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() && !v.is_number_unsigned())
    throw ConfigError("config key '" + key + "': expected an integer");
  if (v.is_number_integer() && v.get<std::int64_t>() < 0)
    throw ConfigError("config key '" + key + "': must be non-negative");
  return v.get<std::uint64_t>();
}

inline bool want_bool(const nlohmann::json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError("config key '" + key + "': expected a boolean");
  return v.get<bool>();
}

inline std::string want_string(const nlohmann::json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "': expected a string");
  return v.get<std::string>();
}

inline std::vector<double> want_number_array(const nlohmann::json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError("config key '" + key + "': expected an array");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number())
      throw ConfigError("config key '" + key + "': expected numeric entries");
    out.push_back(e.get<double>());
  }
  return out;
}

}  // namespace detail

inline void validate_config(const RunConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("config key '" + key + "' " + why);
  };
  if (c.seq_len < 1) fail("seq_len", "must be >= 1");
  if (c.latent_dim < 1) fail("latent_dim", "must be >= 1");
  if (!(c.frame_rate > 0.0)) fail("frame_rate", "must be positive");
  if (c.n_train < 1) fail("n_train", "must be >= 1");
  if (c.n_eval < 1) fail("n_eval", "must be >= 1");
  if (c.n_sample < 1) fail("n_sample", "must be >= 1");
  if (c.mode_count < 1) fail("mode_count", "must be >= 1");
  if (!(c.mode_stdev >= 0.0)) fail("mode_stdev", "must be non-negative");
  if (!std::isfinite(c.mode_radius)) fail("mode_radius", "must be finite");
  if (!c.mode_weights.empty() && c.mode_weights.size() != c.mode_count)
    fail("mode_weights", "must be empty or have mode_count entries");
  for (double w : c.mode_weights)
    if (!(w > 0.0)) fail("mode_weights", "entries must be positive");
  if (c.style_dim < 1) fail("style_dim", "must be >= 1");
  if (c.lyric_embed_dim < 1) fail("lyric_embed_dim", "must be >= 1");
  if (c.tag_vocab < c.mode_count) fail("tag_vocab", "must cover mode_count tags");
  if (c.token_vocab < 1) fail("token_vocab", "must be >= 1");
  if (!(c.prompt_audio_prob >= 0.0 && c.prompt_audio_prob <= 1.0))
    fail("prompt_audio_prob", "must lie in [0,1]");
  if (c.hidden_dim < 1) fail("hidden_dim", "must be >= 1");
  if (!(c.dropout >= 0.0 && c.dropout <= 1.0)) fail("dropout", "must lie in [0,1]");
  if (c.batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(c.lr_pretrain > 0.0)) fail("lr_pretrain", "must be positive");
  if (!(c.lr_sft > 0.0)) fail("lr_sft", "must be positive");
  if (!(c.lr_dpo > 0.0)) fail("lr_dpo", "must be positive");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) fail("adam_beta1", "must lie in [0,1)");
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) fail("adam_beta2", "must lie in [0,1)");
  if (!(c.adam_eps > 0.0)) fail("adam_eps", "must be positive");
  if (!(c.weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
  if (!(c.ema_decay > 0.0 && c.ema_decay < 1.0)) fail("ema_decay", "must lie in (0,1)");
  if (c.ema_interval < 1) fail("ema_interval", "must be >= 1");
  if (c.l_max_pretrain < 1) fail("l_max_pretrain", "must be >= 1");
  if (c.l_max_sft < 1) fail("l_max_sft", "must be >= 1");
  if (!(c.sft_filter_threshold >= 1.0 && c.sft_filter_threshold <= 5.0))
    fail("sft_filter_threshold", "must lie in [1,5]");
  if (c.steps < 1) fail("steps", "must be >= 1");
  if (!(c.cfg_scale >= 0.0)) fail("cfg_scale", "must be non-negative");
  if (!(c.beta > 0.0)) fail("beta", "must be positive");
  if (!(c.gap >= 0.0)) fail("gap", "must be non-negative");
  if (!std::isfinite(c.winner_floor)) fail("winner_floor", "must be finite");
  if (c.candidates_per_prompt < 2) fail("candidates_per_prompt", "must be >= 2");
  if (c.dpo_batch_size < 1) fail("dpo_batch_size", "must be >= 1");
  if (c.dpo_prompts < 1) fail("dpo_prompts", "must be >= 1");
  if (c.winner_source != "generated" && c.winner_source != "ground_truth")
    fail("winner_source", "must be 'generated' or 'ground_truth'");
  if (c.target_mode >= c.mode_count) fail("target_mode", "must be < mode_count");
  if (!(c.score_sigma > 0.0)) fail("score_sigma", "must be positive");
  if (c.eval_bins < 1) fail("eval_bins", "must be >= 1");
  if (!(c.eval_hi > c.eval_lo)) fail("eval_hi", "must exceed eval_lo");
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["seq_len"] = c.seq_len;
  j["latent_dim"] = c.latent_dim;
  j["frame_rate"] = c.frame_rate;
  j["n_train"] = c.n_train;
  j["n_eval"] = c.n_eval;
  j["n_sample"] = c.n_sample;
  j["mode_count"] = c.mode_count;
  j["mode_radius"] = c.mode_radius;
  j["mode_stdev"] = c.mode_stdev;
  j["mode_weights"] = c.mode_weights;
  j["jitter_frames"] = c.jitter_frames;
  j["lyric_tokens"] = c.lyric_tokens;
  j["style_dim"] = c.style_dim;
  j["lyric_embed_dim"] = c.lyric_embed_dim;
  j["tag_vocab"] = c.tag_vocab;
  j["token_vocab"] = c.token_vocab;
  j["prompt_audio_prob"] = c.prompt_audio_prob;
  j["hidden_dim"] = c.hidden_dim;
  j["hidden_layers"] = c.hidden_layers;
  j["dropout"] = c.dropout;
  j["batch_size"] = c.batch_size;
  j["lr_pretrain"] = c.lr_pretrain;
  j["lr_sft"] = c.lr_sft;
  j["lr_dpo"] = c.lr_dpo;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["sft_epochs"] = c.sft_epochs;
  j["dpo_epochs"] = c.dpo_epochs;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["ema_decay"] = c.ema_decay;
  j["ema_interval"] = c.ema_interval;
  j["l_max_pretrain"] = c.l_max_pretrain;
  j["l_max_sft"] = c.l_max_sft;
  j["sft_filter_threshold"] = c.sft_filter_threshold;
  j["steps"] = c.steps;
  j["cfg_scale"] = c.cfg_scale;
  j["use_ema"] = c.use_ema;
  j["beta"] = c.beta;
  j["gap"] = c.gap;
  j["winner_floor"] = c.winner_floor;
  j["candidates_per_prompt"] = c.candidates_per_prompt;
  j["dpo_batch_size"] = c.dpo_batch_size;
  j["dpo_prompts"] = c.dpo_prompts;
  j["winner_source"] = c.winner_source;
  j["target_mode"] = c.target_mode;
  j["score_sigma"] = c.score_sigma;
  j["eval_bins"] = c.eval_bins;
  j["eval_lo"] = c.eval_lo;
  j["eval_hi"] = c.eval_hi;
  return j;
}

// Applies keys from a JSON object onto the defaults. Unknown keys, type
// mismatches and constraint violations are configuration errors naming the
// offending key.
inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::want_bool;
  using detail::want_count;
  using detail::want_number;
  using detail::want_number_array;
  using detail::want_string;
  using detail::want_u64;

  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") c.seed = want_u64(value, key);
    else if (key == "seq_len") c.seq_len = want_count(value, key);
    else if (key == "latent_dim") c.latent_dim = want_count(value, key);
    else if (key == "frame_rate") c.frame_rate = want_number(value, key);
    else if (key == "n_train") c.n_train = want_count(value, key);
    else if (key == "n_eval") c.n_eval = want_count(value, key);
    else if (key == "n_sample") c.n_sample = want_count(value, key);
    else if (key == "mode_count") c.mode_count = want_count(value, key);
    else if (key == "mode_radius") c.mode_radius = want_number(value, key);
    else if (key == "mode_stdev") c.mode_stdev = want_number(value, key);
    else if (key == "mode_weights") c.mode_weights = want_number_array(value, key);
    else if (key == "jitter_frames") c.jitter_frames = want_count(value, key);
    else if (key == "lyric_tokens") c.lyric_tokens = want_count(value, key);
    else if (key == "style_dim") c.style_dim = want_count(value, key);
    else if (key == "lyric_embed_dim") c.lyric_embed_dim = want_count(value, key);
    else if (key == "tag_vocab") c.tag_vocab = want_count(value, key);
    else if (key == "token_vocab") c.token_vocab = want_count(value, key);
    else if (key == "prompt_audio_prob") c.prompt_audio_prob = want_number(value, key);
    else if (key == "hidden_dim") c.hidden_dim = want_count(value, key);
    else if (key == "hidden_layers") c.hidden_layers = want_count(value, key);
    else if (key == "dropout") c.dropout = want_number(value, key);
    else if (key == "batch_size") c.batch_size = want_count(value, key);
    else if (key == "lr_pretrain") c.lr_pretrain = want_number(value, key);
    else if (key == "lr_sft") c.lr_sft = want_number(value, key);
    else if (key == "lr_dpo") c.lr_dpo = want_number(value, key);
    else if (key == "pretrain_epochs") c.pretrain_epochs = want_count(value, key);
    else if (key == "sft_epochs") c.sft_epochs = want_count(value, key);
    else if (key == "dpo_epochs") c.dpo_epochs = want_count(value, key);
    else if (key == "adam_beta1") c.adam_beta1 = want_number(value, key);
    else if (key == "adam_beta2") c.adam_beta2 = want_number(value, key);
    else if (key == "adam_eps") c.adam_eps = want_number(value, key);
    else if (key == "weight_decay") c.weight_decay = want_number(value, key);
    else if (key == "ema_decay") c.ema_decay = want_number(value, key);
    else if (key == "ema_interval") c.ema_interval = want_u64(value, key);
    else if (key == "l_max_pretrain") c.l_max_pretrain = want_count(value, key);
    else if (key == "l_max_sft") c.l_max_sft = want_count(value, key);
    else if (key == "sft_filter_threshold") c.sft_filter_threshold = want_number(value, key);
    else if (key == "steps") c.steps = static_cast<int>(want_count(value, key));
    else if (key == "cfg_scale") c.cfg_scale = want_number(value, key);
    else if (key == "use_ema") c.use_ema = want_bool(value, key);
    else if (key == "beta") c.beta = want_number(value, key);
    else if (key == "gap") c.gap = want_number(value, key);
    else if (key == "winner_floor") c.winner_floor = want_number(value, key);
    else if (key == "candidates_per_prompt") c.candidates_per_prompt = want_count(value, key);
    else if (key == "dpo_batch_size") c.dpo_batch_size = want_count(value, key);
    else if (key == "dpo_prompts") c.dpo_prompts = want_count(value, key);
    else if (key == "winner_source") c.winner_source = want_string(value, key);
    else if (key == "target_mode") c.target_mode = want_count(value, key);
    else if (key == "score_sigma") c.score_sigma = want_number(value, key);
    else if (key == "eval_bins") c.eval_bins = want_count(value, key);
    else if (key == "eval_lo") c.eval_lo = want_number(value, key);
    else if (key == "eval_hi") c.eval_hi = want_number(value, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  validate_config(c);
  return c;
}

// Empty or whitespace-only files resolve to the full default configuration.
inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    RunConfig c;
    validate_config(c);
    return c;
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
  }
  return config_from_json(j);
}

inline std::string serialize_config(const RunConfig& c) { return config_to_json(c).dump(2); }

// Mixture implied by the config: modes evenly spaced on a circle of
// mode_radius in the first two latent dimensions (on a line when D == 1).
inline MixtureSpec make_mixture_spec(const RunConfig& c) {
  MixtureSpec spec;
  spec.seq_len = c.seq_len;
  spec.dim = c.latent_dim;
  spec.frame_rate = c.frame_rate;
  for (std::size_t k = 0; k < c.mode_count; ++k) {
    MixtureMode m;
    m.mean.assign(c.latent_dim, 0.0);
    const double angle =
        2.0 * 3.14159265358979323846 * static_cast<double>(k) / static_cast<double>(c.mode_count);
    m.mean[0] = c.mode_radius * std::cos(angle);
    if (c.latent_dim > 1) m.mean[1] = c.mode_radius * std::sin(angle);
    m.stdev = c.mode_stdev;
    m.weight = c.mode_weights.empty() ? 1.0 : c.mode_weights[k];
    spec.modes.push_back(std::move(m));
  }
  return spec;
}

inline ModelConfig make_model_config(const RunConfig& c) {
  ModelConfig mc;
  mc.latent_dim = c.latent_dim;
  mc.style_dim = c.style_dim;
  mc.lyric_dim = c.lyric_embed_dim;
  mc.time_dim = 8;
  mc.hidden_dim = c.hidden_dim;
  mc.hidden_layers = c.hidden_layers;
  return mc;
}

}  // namespace latentflow
