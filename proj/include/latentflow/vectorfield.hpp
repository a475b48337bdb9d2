#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/conditioning.hpp"
#include "latentflow/errors.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/tensor.hpp"

namespace latentflow {

// Shape of the conditional vector field network. Per-frame features
// [latent | style | lyric | time] pass through an input projection, K tanh
// hidden layers, and a linear output head back to latent width.
struct ModelConfig {
  std::size_t latent_dim = 2;    // D
  std::size_t style_dim = 8;     // S
  std::size_t lyric_dim = 8;     // E
  std::size_t time_dim = 8;      // sinusoidal features, 4 frequencies x sin/cos
  std::size_t hidden_dim = 32;   // H
  std::size_t hidden_layers = 1; // K

  std::size_t feature_dim() const {
    return latent_dim + style_dim + lyric_dim + time_dim;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Sinusoidal time features on a geometric frequency ladder from 1 to 10000:
// [sin(w0 t), cos(w0 t), sin(w1 t), cos(w1 t), ...].
inline void time_features(double t, std::size_t dim, double* out) {
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double exponent =
        half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
    const double omega = std::pow(10000.0, exponent);
    out[2 * i] = std::sin(omega * t);
    out[2 * i + 1] = std::cos(omega * t);
  }
  if (dim % 2 == 1) out[dim - 1] = t;  // odd widths get a raw-time tail
}

// Named parameter tensors. The same struct doubles as gradient, moment and
// EMA-shadow storage since they share shapes.
struct ModelParams {
  ModelConfig cfg;
  Tensor w_in, b_in;               // {H, F}, {H}
  std::vector<Tensor> w_h, b_h;    // K of {H, H}, {H}
  Tensor w_out, b_out;             // {D, H}, {D}

  static ModelParams zeros(const ModelConfig& cfg) {
    ModelParams p;
    p.cfg = cfg;
    p.w_in = Tensor::matrix(cfg.hidden_dim, cfg.feature_dim());
    p.b_in = Tensor::vector(cfg.hidden_dim);
    p.w_h.assign(cfg.hidden_layers, Tensor::matrix(cfg.hidden_dim, cfg.hidden_dim));
    p.b_h.assign(cfg.hidden_layers, Tensor::vector(cfg.hidden_dim));
    p.w_out = Tensor::matrix(cfg.latent_dim, cfg.hidden_dim);
    p.b_out = Tensor::vector(cfg.latent_dim);
    return p;
  }

  // Uniform fan-in init for the hidden stack. The output head is
  // zero-initialized by default so a fresh model is the zero field.
  static ModelParams seeded_init(const ModelConfig& cfg, std::uint64_t seed,
                                 bool zero_output = true) {
    ModelParams p = zeros(cfg);
    Rng rng(seed_mix(seed, kStreamInit));
    auto fill_fan_in = [&](Tensor& w) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
      for (auto& v : w) v = (2.0 * rng.uniform() - 1.0) * bound;
    };
    fill_fan_in(p.w_in);
    for (auto& w : p.w_h) fill_fan_in(w);
    if (!zero_output) {
      fill_fan_in(p.w_out);
      const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
      for (auto& v : p.b_out) v = (2.0 * rng.uniform() - 1.0) * bound;
    }
    return p;
  }

  static ModelParams zeros_like(const ModelParams& other) { return zeros(other.cfg); }

  // Fixed iteration order; serialization, the optimizer and the finite
  // difference harness all rely on it.
  template <typename F>
  void for_each(F&& f) {
    f(std::string("w_in"), w_in);
    f(std::string("b_in"), b_in);
    for (std::size_t k = 0; k < w_h.size(); ++k) {
      f("w_h." + std::to_string(k), w_h[k]);
      f("b_h." + std::to_string(k), b_h[k]);
    }
    f(std::string("w_out"), w_out);
    f(std::string("b_out"), b_out);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  // Flat view across tensors in for_each order; used by gradient checks.
  double& flat(std::size_t index) {
    double* found = nullptr;
    std::size_t offset = 0;
    for_each([&](const std::string&, Tensor& t) {
      if (!found && index < offset + t.size()) found = &t[index - offset];
      offset += t.size();
    });
    if (!found) throw ContractError("flat parameter index out of range");
    return *found;
  }

  bool same_shape(const ModelParams& o) const {
    bool ok = cfg == o.cfg && w_h.size() == o.w_h.size();
    return ok;
  }

  bool operator==(const ModelParams& o) const {
    if (!(cfg == o.cfg)) return false;
    bool eq = true;
    auto rhs = o;
    std::vector<std::pair<std::string, Tensor>> mine, theirs;
    for_each([&](const std::string& n, const Tensor& t) { mine.emplace_back(n, t); });
    rhs.for_each([&](const std::string& n, Tensor& t) { theirs.emplace_back(n, t); });
    if (mine.size() != theirs.size()) return false;
    for (std::size_t i = 0; i < mine.size(); ++i)
      eq = eq && mine[i].first == theirs[i].first && mine[i].second == theirs[i].second;
    return eq;
  }
};

// Per-frame forward activations kept for backprop.
struct ForwardCache {
  Tensor inputs;               // {L, F}
  std::vector<Tensor> hidden;  // K+1 of {L, H}, post-tanh
};

namespace detail {

// y = W x + b, W row-major {out, in}
inline void affine(const Tensor& w, const Tensor& b, const double* x, double* y) {
  const std::size_t out_dim = w.rows();
  const std::size_t in_dim = w.cols();
  for (std::size_t o = 0; o < out_dim; ++o) {
    double acc = b[o];
    const double* wr = w.row(o);
    for (std::size_t i = 0; i < in_dim; ++i) acc += wr[i] * x[i];
    y[o] = acc;
  }
}

}  // namespace detail

// Evaluates the conditional field v(t, y, c) frame by frame. Deterministic;
// pass a cache to keep activations for backprop.
inline Tensor forward(const ModelParams& p, double t, const Tensor& frames,
                      const ConditionBundle& c, ForwardCache* cache = nullptr) {
  const ModelConfig& cfg = p.cfg;
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("forward: t outside [0,1]");
  if (frames.rank() != 2 || frames.cols() != cfg.latent_dim)
    throw ContractError("forward: frame width does not match model latent_dim");
  if (c.style.size() != cfg.style_dim)
    throw ContractError("forward: style width does not match model style_dim");
  if (c.lyric_frames.rows() != frames.rows() || c.lyric_frames.cols() != cfg.lyric_dim)
    throw ContractError("forward: lyric feature shape mismatch");

  const std::size_t L = frames.rows();
  const std::size_t F = cfg.feature_dim();
  const std::size_t H = cfg.hidden_dim;
  const std::size_t K = cfg.hidden_layers;

  std::vector<double> tfeat(cfg.time_dim);
  time_features(t, cfg.time_dim, tfeat.data());

  if (cache) {
    cache->inputs = Tensor::matrix(L, F);
    cache->hidden.assign(K + 1, Tensor::matrix(L, H));
  }

  Tensor velocity = Tensor::matrix(L, cfg.latent_dim);
  std::vector<double> x(F), h(H), z(H);
  for (std::size_t r = 0; r < L; ++r) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < cfg.latent_dim; ++d) x[off++] = frames.at(r, d);
    for (std::size_t s = 0; s < cfg.style_dim; ++s) x[off++] = c.style[s];
    for (std::size_t e = 0; e < cfg.lyric_dim; ++e) x[off++] = c.lyric_frames.at(r, e);
    for (std::size_t i = 0; i < cfg.time_dim; ++i) x[off++] = tfeat[i];

    detail::affine(p.w_in, p.b_in, x.data(), z.data());
    for (std::size_t i = 0; i < H; ++i) h[i] = std::tanh(z[i]);
    if (cache) {
      std::copy(x.begin(), x.end(), cache->inputs.row(r));
      std::copy(h.begin(), h.end(), cache->hidden[0].row(r));
    }
    for (std::size_t k = 0; k < K; ++k) {
      detail::affine(p.w_h[k], p.b_h[k], h.data(), z.data());
      for (std::size_t i = 0; i < H; ++i) h[i] = std::tanh(z[i]);
      if (cache) std::copy(h.begin(), h.end(), cache->hidden[k + 1].row(r));
    }
    detail::affine(p.w_out, p.b_out, h.data(), velocity.row(r));
  }
  return velocity;
}

inline Tensor forward(const ModelParams& p, double t, const LatentSeq& y,
                      const ConditionBundle& c, ForwardCache* cache = nullptr) {
  return forward(p, t, y.frames, c, cache);
}

// Accumulates parameter gradients for one forward pass given dL/dvelocity.
// Linear in d_velocity; inputs receive no gradient.
inline void backprop(const ModelParams& p, const ForwardCache& cache,
                     const Tensor& d_velocity, ModelParams& grads) {
  const ModelConfig& cfg = p.cfg;
  const std::size_t L = cache.inputs.rows();
  const std::size_t H = cfg.hidden_dim;
  const std::size_t K = cfg.hidden_layers;
  if (d_velocity.rows() != L || d_velocity.cols() != cfg.latent_dim)
    throw ContractError("backprop: d_velocity shape mismatch");

  std::vector<double> gh(H), gz(H);
  for (std::size_t r = 0; r < L; ++r) {
    const double* dv = d_velocity.row(r);
    const double* h_top = cache.hidden[K].row(r);

    for (std::size_t d = 0; d < cfg.latent_dim; ++d) {
      double* gw = grads.w_out.row(d);
      for (std::size_t i = 0; i < H; ++i) gw[i] += dv[d] * h_top[i];
      grads.b_out[d] += dv[d];
    }
    std::fill(gh.begin(), gh.end(), 0.0);
    for (std::size_t d = 0; d < cfg.latent_dim; ++d) {
      const double* wr = p.w_out.row(d);
      for (std::size_t i = 0; i < H; ++i) gh[i] += wr[i] * dv[d];
    }

    for (std::size_t k = K; k-- > 0;) {
      const double* h_out = cache.hidden[k + 1].row(r);
      const double* h_in = cache.hidden[k].row(r);
      for (std::size_t i = 0; i < H; ++i) gz[i] = gh[i] * (1.0 - h_out[i] * h_out[i]);
      for (std::size_t i = 0; i < H; ++i) {
        double* gw = grads.w_h[k].row(i);
        for (std::size_t j = 0; j < H; ++j) gw[j] += gz[i] * h_in[j];
        grads.b_h[k][i] += gz[i];
      }
      std::fill(gh.begin(), gh.end(), 0.0);
      for (std::size_t i = 0; i < H; ++i) {
        const double* wr = p.w_h[k].row(i);
        for (std::size_t j = 0; j < H; ++j) gh[j] += wr[j] * gz[i];
      }
    }

    const double* h0 = cache.hidden[0].row(r);
    const double* x = cache.inputs.row(r);
    for (std::size_t i = 0; i < H; ++i) gz[i] = gh[i] * (1.0 - h0[i] * h0[i]);
    for (std::size_t i = 0; i < H; ++i) {
      double* gw = grads.w_in.row(i);
      for (std::size_t j = 0; j < cfg.feature_dim(); ++j) gw[j] += gz[i] * x[j];
      grads.b_in[i] += gz[i];
    }
  }
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and bias correction.
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimState {
  AdamWConfig cfg;
  ModelParams m, v;
  std::uint64_t step = 0;

  static OptimState init(const ModelParams& shape, const AdamWConfig& cfg) {
    OptimState s;
    s.cfg = cfg;
    s.m = ModelParams::zeros_like(shape);
    s.v = ModelParams::zeros_like(shape);
    s.step = 0;
    return s;
  }
};

inline void adamw_step(OptimState& s, ModelParams& params, const ModelParams& grads) {
  s.step += 1;
  const double bc1 = 1.0 - std::pow(s.cfg.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.cfg.beta2, static_cast<double>(s.step));

  std::vector<Tensor*> ps, gs, ms, vs;
  params.for_each([&](const std::string&, Tensor& t) { ps.push_back(&t); });
  const_cast<ModelParams&>(grads).for_each([&](const std::string&, Tensor& t) { gs.push_back(&t); });
  s.m.for_each([&](const std::string&, Tensor& t) { ms.push_back(&t); });
  s.v.for_each([&](const std::string&, Tensor& t) { vs.push_back(&t); });
  if (ps.size() != gs.size()) throw ContractError("adamw_step: gradient layout mismatch");

  for (std::size_t ti = 0; ti < ps.size(); ++ti) {
    Tensor& p = *ps[ti];
    const Tensor& g = *gs[ti];
    Tensor& m = *ms[ti];
    Tensor& v = *vs[ti];
    require_same_shape(p, g, "adamw_step");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = s.cfg.beta1 * m[i] + (1.0 - s.cfg.beta1) * g[i];
      v[i] = s.cfg.beta2 * v[i] + (1.0 - s.cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= s.cfg.lr * (m_hat / (std::sqrt(v_hat) + s.cfg.eps) +
                          s.cfg.weight_decay * p[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// EMA shadow weights. The counter advances every call; the blend fires when
// the post-increment counter is a multiple of update_interval.
// ---------------------------------------------------------------------------

struct EmaState {
  ModelParams shadow;
  double decay = 0.99;
  std::uint64_t update_interval = 100;
  std::uint64_t batch_count = 0;

  static EmaState init(const ModelParams& params, double decay, std::uint64_t interval) {
    if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("EMA decay must lie in (0,1)");
    if (interval < 1) throw ConfigError("EMA update interval must be >= 1");
    EmaState e;
    e.shadow = params;
    e.decay = decay;
    e.update_interval = interval;
    e.batch_count = 0;
    return e;
  }
};

inline void ema_update(EmaState& e, const ModelParams& params) {
  e.batch_count += 1;
  if (e.batch_count % e.update_interval != 0) return;
  std::vector<Tensor*> ss;
  std::vector<const Tensor*> ps;
  e.shadow.for_each([&](const std::string&, Tensor& t) { ss.push_back(&t); });
  params.for_each([&](const std::string&, const Tensor& t) { ps.push_back(&t); });
  for (std::size_t ti = 0; ti < ss.size(); ++ti) {
    Tensor& s = *ss[ti];
    const Tensor& p = *ps[ti];
    require_same_shape(s, p, "ema_update");
    for (std::size_t i = 0; i < s.size(); ++i)
      s[i] = e.decay * s[i] + (1.0 - e.decay) * p[i];
  }
}

}  // namespace latentflow
