#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "latentflow/conditioning.hpp"
#include "latentflow/errors.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/synth_data.hpp"
#include "latentflow/tensor.hpp"
#include "latentflow/vectorfield.hpp"

namespace latentflow {

struct SampleConfig {
  int steps = 32;
  double cfg_scale = 4.0;
  std::uint64_t seed = 0;
  bool use_ema = false;  // which parameter set the pipeline hands to the sampler
};

// Guided velocity v_u + s*(v_c - v_u). s == 0 and s == 1 return the
// respective input unchanged so those settings are bit-exact degenerations.
inline Tensor cfg_velocity(const Tensor& v_cond, const Tensor& v_uncond, double s) {
  require_same_shape(v_cond, v_uncond, "cfg_velocity");
  if (s == 0.0) return v_uncond;
  if (s == 1.0) return v_cond;
  Tensor out(v_cond.dims());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = v_uncond[i] + s * (v_cond[i] - v_uncond[i]);
  return out;
}

// Explicit Euler on the left-endpoint grid t_k = k/steps, dt = 1/steps.
// Field is any callable (double t, const Tensor& y) -> Tensor.
template <typename Field>
Tensor euler_integrate(Field&& field, Tensor y0, int steps) {
  if (steps < 1) throw InputError("euler_integrate: steps must be >= 1");
  const double dt = 1.0 / static_cast<double>(steps);
  Tensor y = std::move(y0);
  for (int k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(steps);
    const Tensor v = field(t, y);
    require_same_shape(v, y, "euler_integrate field output");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += dt * v[i];
    if (!y.all_finite())
      throw NumericError("euler_integrate: non-finite state after step " + std::to_string(k));
  }
  return y;
}

// Draws y0 ~ N(0, I) from cfg.seed and integrates the CFG-guided field. The
// unconditional branch evaluates the same parameters on the null bundle.
inline LatentSeq euler_sample(const ModelParams& params, const ConditionBundle& cond,
                              const SampleConfig& cfg, double frame_rate) {
  const std::size_t L = cond.frame_count();
  const std::size_t D = params.cfg.latent_dim;
  if (cond.style.size() != params.cfg.style_dim ||
      cond.lyric_frames.cols() != params.cfg.lyric_dim)
    throw ContractError("euler_sample: condition bundle does not match model dims");

  Rng rng(cfg.seed);
  Tensor y0 = Tensor::matrix(L, D);
  rng.fill_normal(y0.data(), y0.size());

  const ConditionBundle null_cond =
      make_null_bundle(L, params.cfg.style_dim, params.cfg.lyric_dim);

  Tensor y = euler_integrate(
      [&](double t, const Tensor& state) {
        const Tensor v_cond = forward(params, t, state, cond);
        const Tensor v_uncond = forward(params, t, state, null_cond);
        return cfg_velocity(v_cond, v_uncond, cfg.cfg_scale);
      },
      std::move(y0), cfg.steps);

  LatentSeq out;
  out.frames = std::move(y);
  out.frame_rate = frame_rate;
  return out;
}

}  // namespace latentflow
