#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/errors.hpp"
#include "latentflow/io.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/tensor.hpp"

namespace latentflow {

// An L x D sequence of latent frames, the unit every stage operates on.
struct LatentSeq {
  Tensor frames;  // {L, D}
  double frame_rate = 10.0;

  std::size_t len() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }

  void validate() const {
    if (frames.rank() != 2 || frames.rows() < 1 || frames.cols() < 1)
      throw ContractError("LatentSeq needs an L x D matrix with L,D >= 1");
    if (!(frame_rate > 0.0)) throw ContractError("LatentSeq frame_rate must be positive");
    if (!frames.all_finite()) throw NumericError("LatentSeq contains non-finite entries");
  }
};

struct MixtureMode {
  std::vector<double> mean;
  double stdev = 1.0;
  double weight = 1.0;
};

// Synthetic data distribution: a Gaussian mixture over frames, one mode per
// sequence. stdev == 0 is the allowed degenerate point mass.
struct MixtureSpec {
  std::vector<MixtureMode> modes;
  std::size_t seq_len = 16;
  std::size_t dim = 2;
  double frame_rate = 10.0;

  void validate() const {
    if (modes.empty()) throw ConfigError("mixture spec has no modes");
    if (seq_len < 1 || dim < 1) throw ConfigError("mixture spec needs seq_len,dim >= 1");
    if (!(frame_rate > 0.0)) throw ConfigError("mixture spec frame_rate must be positive");
    double total = 0.0;
    for (const auto& m : modes) {
      if (m.mean.size() != dim) throw ConfigError("mixture mode mean has wrong dimension");
      if (!(m.stdev >= 0.0)) throw ConfigError("mixture mode stdev must be non-negative");
      if (!(m.weight > 0.0)) throw ConfigError("mixture mode weight must be positive");
      total += m.weight;
    }
    if (!(total > 0.0)) throw ConfigError("mixture weights sum to zero");
  }

  std::vector<double> normalized_weights() const {
    double total = 0.0;
    for (const auto& m : modes) total += m.weight;
    std::vector<double> w(modes.size());
    for (std::size_t i = 0; i < modes.size(); ++i) w[i] = modes[i].weight / total;
    return w;
  }
};

// Token ids with strictly increasing start frames, all inside [0, L).
struct LyricAlignment {
  std::vector<std::uint32_t> token_ids;
  std::vector<std::uint32_t> start_frames;

  std::size_t size() const { return token_ids.size(); }

  void validate(std::size_t frame_count) const {
    if (token_ids.size() != start_frames.size())
      throw ContractError("alignment token/start count mismatch");
    for (std::size_t i = 0; i < start_frames.size(); ++i) {
      if (start_frames[i] >= frame_count)
        throw ContractError("alignment start frame out of range");
      if (i > 0 && start_frames[i] <= start_frames[i - 1])
        throw ContractError("alignment start frames must be strictly increasing");
    }
  }

  // Canonicalizes an unordered (frame -> token) map. Two argument orders that
  // describe the same map yield identical alignments.
  static LyricAlignment from_pairs(
      std::vector<std::pair<std::uint32_t, std::uint32_t>> frame_token) {
    std::sort(frame_token.begin(), frame_token.end());
    LyricAlignment a;
    a.token_ids.reserve(frame_token.size());
    a.start_frames.reserve(frame_token.size());
    for (const auto& [frame, token] : frame_token) {
      a.start_frames.push_back(frame);
      a.token_ids.push_back(token);
    }
    return a;
  }
};

struct Dataset {
  double frame_rate = 10.0;
  std::vector<LatentSeq> samples;
  std::vector<std::uint32_t> mode_labels;

  std::size_t size() const { return samples.size(); }
};

inline constexpr std::uint32_t kUnknownModeLabel = 0xFFFFFFFFu;

// n sequences from the mixture. The mode is drawn once per sequence, frames
// are i.i.d. given the mode. Sample i uses the stream seeded by (seed XOR i),
// so parallel generation reproduces the serial output.
inline Dataset make_mixture_dataset(const MixtureSpec& spec, std::size_t n,
                                    std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw InputError("make_mixture_dataset: n must be >= 1");
  const auto weights = spec.normalized_weights();

  Dataset ds;
  ds.frame_rate = spec.frame_rate;
  ds.samples.reserve(n);
  ds.mode_labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed ^ static_cast<std::uint64_t>(i));
    const std::size_t mode = rng.categorical(weights);
    const auto& m = spec.modes[mode];
    LatentSeq s;
    s.frame_rate = spec.frame_rate;
    s.frames = Tensor::matrix(spec.seq_len, spec.dim);
    for (std::size_t t = 0; t < spec.seq_len; ++t)
      for (std::size_t d = 0; d < spec.dim; ++d)
        s.frames.at(t, d) = m.mean[d] + m.stdev * rng.normal();
    ds.samples.push_back(std::move(s));
    ds.mode_labels.push_back(static_cast<std::uint32_t>(mode));
  }
  return ds;
}

// Index of the mode whose mean is closest to the sequence's mean frame.
inline std::size_t nearest_mode(const MixtureSpec& spec, const LatentSeq& s) {
  std::size_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < spec.modes.size(); ++k) {
    double d2 = 0.0;
    for (std::size_t d = 0; d < spec.dim; ++d) {
      double mean_d = 0.0;
      for (std::size_t t = 0; t < s.len(); ++t) mean_d += s.frames.at(t, d);
      mean_d /= static_cast<double>(s.len());
      const double diff = mean_d - spec.modes[k].mean[d];
      d2 += diff * diff;
    }
    if (d2 < best_d2) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

// Sorts shifted starts (token order is preserved) and resolves duplicates by
// pushing later tokens forward one frame. Throws if a start would be pushed
// past the last frame.
inline std::vector<std::uint32_t> fixup_start_frames(std::vector<std::uint32_t> starts,
                                                     std::size_t frame_count) {
  std::sort(starts.begin(), starts.end());
  for (std::size_t i = 1; i < starts.size(); ++i) {
    if (starts[i] <= starts[i - 1]) starts[i] = starts[i - 1] + 1;
    if (starts[i] >= frame_count)
      throw AlignmentError("alignment collision unresolvable within frame range");
  }
  return starts;
}

// Multi-frame temporal perturbation: every start frame is shifted by an
// integer drawn uniformly from [-jitter, +jitter], clamped into [0, L), then
// repaired to a strictly increasing sequence.
inline LyricAlignment perturb_alignment(const LyricAlignment& a, std::uint32_t jitter,
                                        std::size_t frame_count, std::uint64_t seed) {
  a.validate(frame_count);
  Rng rng(seed);
  std::vector<std::uint32_t> shifted(a.size());
  const std::int64_t max_frame = static_cast<std::int64_t>(frame_count) - 1;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::int64_t delta =
        rng.uniform_int(-static_cast<std::int64_t>(jitter), static_cast<std::int64_t>(jitter));
    const std::int64_t moved = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(a.start_frames[i]) + delta, 0, max_frame);
    shifted[i] = static_cast<std::uint32_t>(moved);
  }
  LyricAlignment out;
  out.token_ids = a.token_ids;
  out.start_frames = fixup_start_frames(std::move(shifted), frame_count);
  return out;
}

// Dataset file: magic "DRPD", u32 version=1, u32 n, u32 L, u32 D,
// f64 frame_rate, then n blocks of (u32 mode_label, L*D f64 row-major).
inline constexpr char kDatasetMagic[4] = {'D', 'R', 'P', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::string& path) {
  if (ds.samples.empty()) throw InputError("save_dataset: empty dataset");
  if (ds.mode_labels.size() != ds.samples.size())
    throw ContractError("save_dataset: label/sample count mismatch");
  const std::size_t L = ds.samples[0].len();
  const std::size_t D = ds.samples[0].dim();
  ByteWriter w;
  w.magic(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  w.u32(static_cast<std::uint32_t>(L));
  w.u32(static_cast<std::uint32_t>(D));
  w.f64(ds.frame_rate);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    if (s.len() != L || s.dim() != D)
      throw ContractError("save_dataset: ragged sample shapes");
    w.u32(ds.mode_labels[i]);
    for (std::size_t j = 0; j < s.frames.size(); ++j) w.f64(s.frames[j]);
  }
  write_file(path, w.buffer());
}

inline Dataset load_dataset(const std::string& path) {
  const auto buf = read_file(path);
  ByteReader r(buf);
  r.expect_magic(kDatasetMagic, "dataset file");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion)
    throw PersistenceError("dataset file: unsupported version " + std::to_string(version));
  const std::uint32_t n = r.u32();
  const std::uint32_t L = r.u32();
  const std::uint32_t D = r.u32();
  Dataset ds;
  ds.frame_rate = r.f64();
  ds.samples.reserve(n);
  ds.mode_labels.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.mode_labels.push_back(r.u32());
    LatentSeq s;
    s.frame_rate = ds.frame_rate;
    s.frames = Tensor::matrix(L, D);
    for (std::size_t j = 0; j < s.frames.size(); ++j) s.frames[j] = r.f64();
    ds.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw PersistenceError("dataset file: trailing bytes");
  return ds;
}

}  // namespace latentflow
