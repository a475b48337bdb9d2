#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "latentflow/checkpoint.hpp"
#include "latentflow/config.hpp"

using namespace latentflow;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const std::string path = std::string(::testing::TempDir()) + name;
  std::ofstream out(path);
  out << content;
  return path;
}

RunConfig small_config() {
  RunConfig c;
  c.seq_len = 6;
  c.latent_dim = 2;
  c.hidden_dim = 4;
  c.hidden_layers = 1;
  c.style_dim = 3;
  c.lyric_embed_dim = 3;
  c.tag_vocab = 4;
  c.token_vocab = 8;
  validate_config(c);
  return c;
}

Checkpoint demo_checkpoint() {
  const RunConfig cfg = small_config();
  const ModelConfig mc = make_model_config(cfg);
  Checkpoint c;
  c.config = cfg;
  c.stage = Stage::Sft;
  c.params = ModelParams::seeded_init(mc, 7, /*zero_output=*/false);
  c.ema = EmaState::init(c.params, 0.99, 100);
  c.ema.batch_count = 123;
  c.opt = OptimState::init(c.params, AdamWConfig{1e-4, 0.9, 0.95, 1e-8, 0.01});
  // take a real optimizer step so the moments are nonzero
  ModelParams grads = ModelParams::seeded_init(mc, 8, /*zero_output=*/false);
  adamw_step(c.opt, c.params, grads);
  ema_update(c.ema, c.params);

  const ProjectionTable proj(cfg.style_dim, cfg.latent_dim, cfg.tag_vocab, cfg.seed);
  const TokenEmbeddingTable tok(cfg.token_vocab, cfg.lyric_embed_dim, cfg.seed);
  c.cond_audio_proj = proj.audio_proj();
  c.cond_text_proj = proj.text_proj();
  c.cond_token_emb = tok.embeddings();
  c.cond_filler = Tensor::vector(tok.filler().size());
  for (std::size_t i = 0; i < tok.filler().size(); ++i) c.cond_filler[i] = tok.filler()[i];
  c.rng_seed = 0xDEADBEEFCAFE1234ULL;
  return c;
}

}  // namespace

TEST(ParseConfig, EmptyFileYieldsDefaults) {
  const std::string path = write_temp("empty.json", "  \n\t ");
  const RunConfig c = parse_config(path);
  EXPECT_EQ(c.cfg_scale, 4.0);
  EXPECT_EQ(c.steps, 32);
  EXPECT_EQ(c.beta, 2000.0);
  EXPECT_EQ(c.gap, 0.4);
  EXPECT_EQ(c.winner_floor, 3.0);
  EXPECT_EQ(c.dropout, 0.2);
  EXPECT_EQ(c.ema_decay, 0.99);
  EXPECT_EQ(c.ema_interval, 100u);
  EXPECT_EQ(c.adam_beta1, 0.9);
  EXPECT_EQ(c.adam_beta2, 0.95);
  EXPECT_EQ(c.lr_pretrain, 1e-4);
  EXPECT_EQ(c.lr_sft, 1e-5);
  EXPECT_EQ(c.lr_dpo, 1e-6);
  EXPECT_EQ(c.sft_epochs, 10u);
  EXPECT_EQ(c.dpo_epochs, 8u);
  EXPECT_EQ(c.dpo_batch_size, 8u);
  EXPECT_EQ(c.candidates_per_prompt, 8u);
  EXPECT_EQ(c.l_max_pretrain, 2048u);
  EXPECT_EQ(c.l_max_sft, 6144u);
  EXPECT_EQ(c.winner_source, "generated");
  std::remove(path.c_str());
}

TEST(ParseConfig, RejectsConstraintViolations) {
  const std::string path = write_temp("bad.json", R"({"cfg_scale": -1})");
  EXPECT_THROW(parse_config(path), ConfigError);
  std::remove(path.c_str());

  EXPECT_THROW(config_from_json({{"steps", 0}}), ConfigError);
  EXPECT_THROW(config_from_json({{"beta", 0.0}}), ConfigError);
  EXPECT_THROW(config_from_json({{"dropout", 1.5}}), ConfigError);
  EXPECT_THROW(config_from_json({{"winner_source", "oracle"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"mode_weights", {1.0, -2.0}}}), ConfigError);
}

TEST(ParseConfig, RejectsUnknownKeysNamingThem) {
  try {
    config_from_json({{"cfg_scales", 4.0}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cfg_scales"), std::string::npos);
  }
}

TEST(ParseConfig, RejectsTypeMismatchesNamingKey) {
  try {
    config_from_json({{"steps", "thirty-two"}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("steps"), std::string::npos);
  }
}

TEST(ParseConfig, RoundTripsThroughSerialization) {
  RunConfig c;
  c.seed = 777;
  c.cfg_scale = 2.5;
  c.mode_weights = {0.7, 0.3};
  c.winner_source = "ground_truth";
  c.use_ema = true;
  c.dpo_epochs = 12;
  c.frame_rate = 12.5;
  validate_config(c);

  const std::string path = write_temp("roundtrip.json", serialize_config(c));
  const RunConfig back = parse_config(path);
  EXPECT_TRUE(back == c);
  std::remove(path.c_str());
}

TEST(ParseConfig, InvalidJsonIsConfigError) {
  const std::string path = write_temp("notjson.json", "{steps:");
  EXPECT_THROW(parse_config(path), ConfigError);
  std::remove(path.c_str());
  EXPECT_THROW(parse_config("/nonexistent/config.json"), ConfigError);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  const Checkpoint c = demo_checkpoint();
  const std::string path = std::string(::testing::TempDir()) + "ckpt.drpc";
  save_checkpoint(c, path);
  const Checkpoint back = load_checkpoint(path);

  EXPECT_TRUE(back.config == c.config);
  EXPECT_EQ(back.stage, c.stage);
  EXPECT_TRUE(back.params == c.params);
  EXPECT_TRUE(back.ema.shadow == c.ema.shadow);
  EXPECT_EQ(back.ema.decay, c.ema.decay);
  EXPECT_EQ(back.ema.update_interval, c.ema.update_interval);
  EXPECT_EQ(back.ema.batch_count, c.ema.batch_count);
  EXPECT_TRUE(back.opt.m == c.opt.m);
  EXPECT_TRUE(back.opt.v == c.opt.v);
  EXPECT_EQ(back.opt.step, c.opt.step);
  EXPECT_EQ(back.opt.cfg.lr, c.opt.cfg.lr);
  EXPECT_EQ(back.opt.cfg.weight_decay, c.opt.cfg.weight_decay);
  EXPECT_TRUE(back.cond_audio_proj == c.cond_audio_proj);
  EXPECT_TRUE(back.cond_text_proj == c.cond_text_proj);
  EXPECT_TRUE(back.cond_token_emb == c.cond_token_emb);
  EXPECT_TRUE(back.cond_filler == c.cond_filler);
  EXPECT_EQ(back.rng_seed, c.rng_seed);

  // the serialized form itself is byte-stable
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(c));
  std::remove(path.c_str());
}

TEST(Checkpoint, CorruptPayloadByteFailsChecksum) {
  const Checkpoint c = demo_checkpoint();
  auto bytes = serialize_checkpoint(c);
  bytes[bytes.size() / 2] ^= 0x40;  // flip one payload bit
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected PersistenceError";
  } catch (const PersistenceError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Checkpoint, UnsupportedVersionIsRejected) {
  const Checkpoint c = demo_checkpoint();
  auto bytes = serialize_checkpoint(c);
  bytes[4] = 0xE7;  // version 999 little-endian
  bytes[5] = 0x03;
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected PersistenceError";
  } catch (const PersistenceError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, TruncationAndBadMagicAreRejected) {
  const Checkpoint c = demo_checkpoint();
  auto bytes = serialize_checkpoint(c);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 9);
  EXPECT_THROW(deserialize_checkpoint(truncated), PersistenceError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), PersistenceError);
}
