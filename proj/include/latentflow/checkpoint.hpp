#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/conditioning.hpp"
#include "latentflow/config.hpp"
#include "latentflow/errors.hpp"
#include "latentflow/io.hpp"
#include "latentflow/tensor.hpp"
#include "latentflow/vectorfield.hpp"

namespace latentflow {

enum class Stage : std::uint32_t { Pretrain = 0, Sft = 1, Dpo = 2 };

inline const char* stage_tag(Stage s) {
  switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Sft: return "sft";
    case Stage::Dpo: return "dpo";
  }
  return "unknown";
}

// Everything needed to resume or reproduce a run: parameters, EMA shadow,
// optimizer moments, the conditioning tables, the config snapshot, the stage
// tag and the master seed.
struct Checkpoint {
  RunConfig config;
  Stage stage = Stage::Pretrain;
  ModelParams params;
  EmaState ema;
  OptimState opt;
  Tensor cond_audio_proj;  // {S, D}
  Tensor cond_text_proj;   // {S, tag_vocab}
  Tensor cond_token_emb;   // {token_vocab, E}
  Tensor cond_filler;      // {E}
  std::uint64_t rng_seed = 0;

  ProjectionTable projection_table() const {
    return ProjectionTable(cond_audio_proj, cond_text_proj);
  }
  TokenEmbeddingTable token_table() const {
    std::vector<double> filler(cond_filler.data(), cond_filler.data() + cond_filler.size());
    return TokenEmbeddingTable(cond_token_emb, std::move(filler));
  }
};

// Checkpoint file: magic "DRPC", u32 version=1, u32 tensor count, then per
// tensor (u16 name length, name bytes, u8 ndim, u32 dims..., f64 payload
// little-endian), then a CRC32 (u32) over every byte after the 12-byte
// header. Non-tensor state rides along as small named tensors; the config
// snapshot is its JSON text with one byte per f64 slot.
inline constexpr char kCheckpointMagic[4] = {'D', 'R', 'P', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline Tensor scalars(std::initializer_list<double> vals) {
  Tensor t = Tensor::vector(vals.size());
  std::size_t i = 0;
  for (double v : vals) t[i++] = v;
  return t;
}

inline Tensor text_tensor(const std::string& text) {
  Tensor t = Tensor::vector(text.size());
  for (std::size_t i = 0; i < text.size(); ++i)
    t[i] = static_cast<double>(static_cast<unsigned char>(text[i]));
  return t;
}

inline std::string tensor_text(const Tensor& t) {
  std::string s(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) s[i] = static_cast<char>(t[i]);
  return s;
}

inline void split_u64(std::uint64_t v, double& lo, double& hi) {
  lo = static_cast<double>(v & 0xFFFFFFFFULL);
  hi = static_cast<double>(v >> 32);
}

inline std::uint64_t join_u64(double lo, double hi) {
  return static_cast<std::uint64_t>(lo) | (static_cast<std::uint64_t>(hi) << 32);
}

inline NamedTensors flatten_checkpoint(const Checkpoint& c) {
  NamedTensors out;
  out.emplace_back("config.blob", text_tensor(config_to_json(c.config).dump()));
  out.emplace_back("stage", scalars({static_cast<double>(c.stage)}));
  double lo, hi;
  split_u64(c.rng_seed, lo, hi);
  out.emplace_back("rng.seed", scalars({lo, hi}));

  c.params.for_each([&](const std::string& name, const Tensor& t) {
    out.emplace_back("model." + name, t);
  });
  c.ema.shadow.for_each([&](const std::string& name, const Tensor& t) {
    out.emplace_back("ema.shadow." + name, t);
  });
  out.emplace_back("ema.meta",
                   scalars({c.ema.decay, static_cast<double>(c.ema.update_interval),
                            static_cast<double>(c.ema.batch_count)}));
  c.opt.m.for_each([&](const std::string& name, const Tensor& t) {
    out.emplace_back("opt.m." + name, t);
  });
  c.opt.v.for_each([&](const std::string& name, const Tensor& t) {
    out.emplace_back("opt.v." + name, t);
  });
  out.emplace_back("opt.meta",
                   scalars({static_cast<double>(c.opt.step), c.opt.cfg.lr, c.opt.cfg.beta1,
                            c.opt.cfg.beta2, c.opt.cfg.eps, c.opt.cfg.weight_decay}));
  out.emplace_back("cond.audio_proj", c.cond_audio_proj);
  out.emplace_back("cond.text_proj", c.cond_text_proj);
  out.emplace_back("cond.token_emb", c.cond_token_emb);
  out.emplace_back("cond.filler", c.cond_filler);
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  const auto tensors = detail::flatten_checkpoint(c);
  ByteWriter w;
  w.magic(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d) w.u32(static_cast<std::uint32_t>(t.dim(d)));
    for (std::size_t i = 0; i < t.size(); ++i) w.f64(t[i]);
  }
  constexpr std::size_t header = 12;
  const std::uint32_t crc = crc32_of(w.buffer().data() + header, w.size() - header);
  w.u32(crc);
  return w.take();
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  write_file(path, serialize_checkpoint(c));
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 16) throw PersistenceError("checkpoint: file too small");
  ByteReader r(buf);
  r.expect_magic(kCheckpointMagic, "checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw PersistenceError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  constexpr std::size_t header = 12;
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(buf[buf.size() - 4]) |
                                   static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8 |
                                   static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16 |
                                   static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24;
  const std::uint32_t computed = crc32_of(buf.data() + header, buf.size() - header - 4);
  if (stored_crc != computed) throw PersistenceError("checkpoint: checksum failure");

  detail::NamedTensors tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    const std::string name = r.str(name_len);
    const std::uint8_t ndim = r.u8();
    std::vector<std::size_t> dims(ndim);
    for (auto& d : dims) d = r.u32();
    Tensor t(dims);
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = r.f64();
    tensors.emplace_back(name, std::move(t));
  }
  if (r.remaining() != 4) throw PersistenceError("checkpoint: trailing bytes");

  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw PersistenceError("checkpoint: missing tensor '" + name + "'");
  };

  Checkpoint c;
  c.config = config_from_json(nlohmann::json::parse(detail::tensor_text(find("config.blob"))));
  const Tensor& stage_t = find("stage");
  const auto stage_code = static_cast<std::uint32_t>(stage_t[0]);
  if (stage_code > 2) throw PersistenceError("checkpoint: unknown stage tag");
  c.stage = static_cast<Stage>(stage_code);
  const Tensor& seed_t = find("rng.seed");
  c.rng_seed = detail::join_u64(seed_t[0], seed_t[1]);

  const ModelConfig mc = make_model_config(c.config);
  auto load_params = [&](const std::string& prefix) {
    ModelParams p = ModelParams::zeros(mc);
    p.for_each([&](const std::string& name, Tensor& t) {
      const Tensor& stored = find(prefix + name);
      if (!stored.same_shape(t))
        throw PersistenceError("checkpoint: tensor '" + prefix + name + "' has wrong shape");
      t = stored;
    });
    return p;
  };
  c.params = load_params("model.");

  const Tensor& ema_meta = find("ema.meta");
  c.ema.shadow = load_params("ema.shadow.");
  c.ema.decay = ema_meta[0];
  c.ema.update_interval = static_cast<std::uint64_t>(ema_meta[1]);
  c.ema.batch_count = static_cast<std::uint64_t>(ema_meta[2]);

  const Tensor& opt_meta = find("opt.meta");
  c.opt.m = load_params("opt.m.");
  c.opt.v = load_params("opt.v.");
  c.opt.step = static_cast<std::uint64_t>(opt_meta[0]);
  c.opt.cfg.lr = opt_meta[1];
  c.opt.cfg.beta1 = opt_meta[2];
  c.opt.cfg.beta2 = opt_meta[3];
  c.opt.cfg.eps = opt_meta[4];
  c.opt.cfg.weight_decay = opt_meta[5];

  c.cond_audio_proj = find("cond.audio_proj");
  c.cond_text_proj = find("cond.text_proj");
  c.cond_token_emb = find("cond.token_emb");
  c.cond_filler = find("cond.filler");
  return c;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace latentflow
