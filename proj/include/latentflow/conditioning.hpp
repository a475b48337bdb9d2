#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "latentflow/errors.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/synth_data.hpp"
#include "latentflow/tensor.hpp"

namespace latentflow {

// A style prompt is either a reference latent (audio modality) or a set of
// tag ids (text modality). Both map into the same S-dimensional style space.
struct StylePrompt {
  enum class Modality { Audio, Text };

  Modality modality = Modality::Text;
  std::optional<LatentSeq> audio_latent;
  std::vector<std::uint32_t> text_tags;  // kept sorted and unique

  static StylePrompt audio(LatentSeq latent) {
    StylePrompt p;
    p.modality = Modality::Audio;
    p.audio_latent = std::move(latent);
    return p;
  }

  static StylePrompt text(std::vector<std::uint32_t> tags) {
    StylePrompt p;
    p.modality = Modality::Text;
    std::sort(tags.begin(), tags.end());
    tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
    p.text_tags = std::move(tags);
    return p;
  }

  void validate() const {
    const bool has_audio = audio_latent.has_value();
    if (modality == Modality::Audio && (!has_audio || !text_tags.empty()))
      throw ContractError("audio prompt must carry exactly an audio latent");
    if (modality == Modality::Text && has_audio)
      throw ContractError("text prompt must not carry an audio latent");
  }
};

// Unit-norm style vector, or all zeros for the null/dropped prompt.
struct StyleEmbedding {
  std::vector<double> vec;

  bool is_null() const {
    for (double v : vec)
      if (v != 0.0) return false;
    return true;
  }
};

// Per-frame conditioning handed to the vector field. Dropped components are
// exact zero tensors with the matching flag set.
struct ConditionBundle {
  std::vector<double> style;  // S entries
  Tensor lyric_frames;        // {L, E}
  bool style_dropped = false;
  bool lyrics_dropped = false;

  std::size_t frame_count() const { return lyric_frames.rows(); }
};

// Fixed seeded projections standing in for a pretrained joint audio/text
// style extractor: A maps mean latent frames (D) into style space (S), B maps
// tag one-hot sums (tag vocabulary) into the same space.
class ProjectionTable {
 public:
  ProjectionTable(std::size_t style_dim, std::size_t latent_dim, std::size_t tag_vocab,
                  std::uint64_t seed)
      : audio_proj_(Tensor::matrix(style_dim, latent_dim)),
        text_proj_(Tensor::matrix(style_dim, tag_vocab)) {
    Rng rng(seed_mix(seed, kStreamTables, 0));
    const double a_scale = 1.0 / std::sqrt(static_cast<double>(latent_dim));
    for (auto& v : audio_proj_) v = a_scale * rng.normal();
    const double b_scale = 1.0 / std::sqrt(static_cast<double>(tag_vocab));
    for (auto& v : text_proj_) v = b_scale * rng.normal();
  }

  ProjectionTable(Tensor audio_proj, Tensor text_proj)
      : audio_proj_(std::move(audio_proj)), text_proj_(std::move(text_proj)) {
    if (audio_proj_.rank() != 2 || text_proj_.rank() != 2 ||
        audio_proj_.rows() != text_proj_.rows())
      throw ContractError("projection table tensors disagree on style dimension");
  }

  std::size_t style_dim() const { return audio_proj_.rows(); }
  std::size_t latent_dim() const { return audio_proj_.cols(); }
  std::size_t tag_vocab() const { return text_proj_.cols(); }
  const Tensor& audio_proj() const { return audio_proj_; }
  const Tensor& text_proj() const { return text_proj_; }

 private:
  Tensor audio_proj_;  // {S, D}
  Tensor text_proj_;   // {S, tag_vocab}
};

// Seeded token embeddings plus a dedicated filler vector used for frames
// before the first aligned token.
class TokenEmbeddingTable {
 public:
  TokenEmbeddingTable(std::size_t vocab, std::size_t embed_dim, std::uint64_t seed)
      : emb_(Tensor::matrix(vocab, embed_dim)), filler_(embed_dim) {
    Rng rng(seed_mix(seed, kStreamTables, 1));
    const double scale = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    for (auto& v : emb_) v = scale * rng.normal();
    for (auto& v : filler_) v = scale * rng.normal();
  }

  TokenEmbeddingTable(Tensor emb, std::vector<double> filler)
      : emb_(std::move(emb)), filler_(std::move(filler)) {
    if (emb_.rank() != 2 || filler_.size() != emb_.cols())
      throw ContractError("token table embedding/filler width mismatch");
  }

  std::size_t vocab() const { return emb_.rows(); }
  std::size_t embed_dim() const { return emb_.cols(); }
  const Tensor& embeddings() const { return emb_; }
  const std::vector<double>& filler() const { return filler_; }

 private:
  Tensor emb_;  // {vocab, E}
  std::vector<double> filler_;
};

// Audio: mean frame through A. Text: sum of tag one-hots through B. Either
// way the result is L2-normalized; an exactly zero projection (null prompt)
// stays the zero embedding.
inline StyleEmbedding embed_style(const StylePrompt& prompt, const ProjectionTable& table) {
  prompt.validate();
  const std::size_t S = table.style_dim();
  std::vector<double> v(S, 0.0);

  if (prompt.modality == StylePrompt::Modality::Audio) {
    const LatentSeq& latent = *prompt.audio_latent;
    latent.validate();
    if (latent.dim() != table.latent_dim())
      throw ContractError("audio prompt dimension does not match projection table");
    std::vector<double> mean(latent.dim(), 0.0);
    for (std::size_t t = 0; t < latent.len(); ++t)
      for (std::size_t d = 0; d < latent.dim(); ++d) mean[d] += latent.frames.at(t, d);
    for (auto& m : mean) m /= static_cast<double>(latent.len());
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t d = 0; d < mean.size(); ++d)
        v[s] += table.audio_proj().at(s, d) * mean[d];
  } else {
    for (std::uint32_t tag : prompt.text_tags) {
      if (tag >= table.tag_vocab())
        throw InputError("unknown style tag id " + std::to_string(tag));
      for (std::size_t s = 0; s < S; ++s) v[s] += table.text_proj().at(s, tag);
    }
  }

  double norm_sq = 0.0;
  for (double x : v) norm_sq += x * x;
  if (norm_sq > 0.0) {
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (auto& x : v) x *= inv;
  }
  return StyleEmbedding{std::move(v)};
}

// Hold-until-next-token placement: row t carries the embedding of the token
// whose start is the largest start <= t; rows before the first token carry
// the filler embedding.
inline Tensor embed_lyrics(const LyricAlignment& a, std::size_t frame_count,
                           const TokenEmbeddingTable& table) {
  a.validate(frame_count);
  for (std::uint32_t id : a.token_ids)
    if (id >= table.vocab())
      throw InputError("token id " + std::to_string(id) + " outside embedding table");

  Tensor out = Tensor::matrix(frame_count, table.embed_dim());
  std::size_t next = 0;  // index of the first token with start > t
  const double* current = table.filler().data();
  for (std::size_t t = 0; t < frame_count; ++t) {
    while (next < a.size() && a.start_frames[next] <= t) {
      current = table.embeddings().row(a.token_ids[next]);
      ++next;
    }
    for (std::size_t e = 0; e < table.embed_dim(); ++e) out.at(t, e) = current[e];
  }
  return out;
}

// Style and lyrics are zeroed independently, each with probability p. Draw
// order is style first, then lyrics.
inline ConditionBundle apply_condition_dropout(const ConditionBundle& c, double p,
                                               std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw InputError("dropout probability outside [0,1]");
  Rng rng(seed);
  ConditionBundle out = c;
  if (rng.bernoulli(p)) {
    std::fill(out.style.begin(), out.style.end(), 0.0);
    out.style_dropped = true;
  }
  if (rng.bernoulli(p)) {
    out.lyric_frames.fill(0.0);
    out.lyrics_dropped = true;
  }
  return out;
}

// The unconditional bundle: zero style, zero lyric rows, both flags set.
// Identical to what full dropout produces, so training-time dropout and
// inference-time guidance agree on "unconditional".
inline ConditionBundle make_null_bundle(std::size_t frame_count, std::size_t style_dim,
                                        std::size_t lyric_dim) {
  ConditionBundle c;
  c.style.assign(style_dim, 0.0);
  c.lyric_frames = Tensor::matrix(frame_count, lyric_dim);
  c.style_dropped = true;
  c.lyrics_dropped = true;
  return c;
}

}  // namespace latentflow
