#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "latentflow/errors.hpp"
#include "latentflow/synth_data.hpp"
#include "latentflow/tensor.hpp"

namespace latentflow {

// Gaussian moments of an embedded sample set. Covariance uses the population
// convention (divide by n).
struct GaussianFit {
  Tensor mean;  // {M}
  Tensor cov;   // {M, M}
  std::size_t n = 0;
};

struct CategoricalDist {
  std::vector<double> probs;
};

// Uniform per-dimension binning grid; mean-frame vectors outside [lo, hi)
// clamp to the edge bins.
struct GridSpec {
  std::size_t bins_per_dim = 8;
  double lo = -4.0;
  double hi = 4.0;
};

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(static_cast<Eigen::Index>(r),
                                                 static_cast<Eigen::Index>(c)) = t.at(r, c);
  return m;
}

// Symmetric PSD square root via eigendecomposition; negative eigenvalues
// from rounding clamp to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success)
    throw NumericError("psd_sqrt: eigendecomposition failed");
  Eigen::VectorXd lambda = es.eigenvalues();
  for (Eigen::Index i = 0; i < lambda.size(); ++i)
    lambda[i] = lambda[i] > 0.0 ? std::sqrt(lambda[i]) : 0.0;
  return es.eigenvectors() * lambda.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Frechet distance between two Gaussian fits:
// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
inline double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.mean.size() != b.mean.size())
    throw InputError("frechet_distance: dimension mismatch");
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    const double d = a.mean[i] - b.mean[i];
    mean_term += d * d;
  }
  const Eigen::MatrixXd cov_a = detail::to_eigen(a.cov);
  const Eigen::MatrixXd cov_b = detail::to_eigen(b.cov);
  const Eigen::MatrixXd root_a = detail::psd_sqrt(cov_a);
  const Eigen::MatrixXd cross = detail::psd_sqrt(root_a * cov_b * root_a);
  const double trace_term = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
  // tiny negatives are eigensolver rounding
  return std::max(mean_term + trace_term, 0.0);
}

// KL(p || q) = sum p_i ln(p_i / q_i); q is floored at eps = 1e-10 and terms
// with p_i = 0 contribute nothing. Rounding artifacts clamp at zero.
inline double kl_divergence(const CategoricalDist& p, const CategoricalDist& q) {
  if (p.probs.size() != q.probs.size())
    throw InputError("kl_divergence: dimension mismatch");
  constexpr double kEps = 1e-10;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.probs.size(); ++i) {
    if (p.probs[i] == 0.0) continue;
    sum += p.probs[i] * std::log(p.probs[i] / std::max(q.probs[i], kEps));
  }
  return std::max(sum, 0.0);
}

// Per-sample embedding = mean frame vector. Returns the Gaussian fit of the
// embeddings and their occupancy histogram on the grid (row-major over dims).
inline std::pair<GaussianFit, CategoricalDist> featurize(const std::vector<LatentSeq>& samples,
                                                         const GridSpec& grid) {
  if (samples.empty()) throw InputError("featurize: no samples");
  const std::size_t dim = samples[0].dim();
  const std::size_t n = samples.size();

  std::vector<std::vector<double>> feats(n, std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const LatentSeq& s = samples[i];
    if (s.dim() != dim) throw InputError("featurize: ragged sample dimensions");
    for (std::size_t t = 0; t < s.len(); ++t)
      for (std::size_t d = 0; d < dim; ++d) feats[i][d] += s.frames.at(t, d);
    for (std::size_t d = 0; d < dim; ++d) feats[i][d] /= static_cast<double>(s.len());
  }

  GaussianFit fit;
  fit.n = n;
  fit.mean = Tensor::vector(dim);
  fit.cov = Tensor::matrix(dim, dim);
  for (const auto& f : feats)
    for (std::size_t d = 0; d < dim; ++d) fit.mean[d] += f[d];
  for (std::size_t d = 0; d < dim; ++d) fit.mean[d] /= static_cast<double>(n);
  for (const auto& f : feats)
    for (std::size_t r = 0; r < dim; ++r)
      for (std::size_t c = 0; c < dim; ++c)
        fit.cov.at(r, c) += (f[r] - fit.mean[r]) * (f[c] - fit.mean[c]);
  for (std::size_t i = 0; i < fit.cov.size(); ++i) fit.cov[i] /= static_cast<double>(n);

  std::size_t bin_count = 1;
  for (std::size_t d = 0; d < dim; ++d) bin_count *= grid.bins_per_dim;
  CategoricalDist dist;
  dist.probs.assign(bin_count, 0.0);
  const double width = grid.hi - grid.lo;
  if (!(width > 0.0)) throw ConfigError("featurize: grid hi must exceed lo");
  for (const auto& f : feats) {
    std::size_t flat = 0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double rel = (f[d] - grid.lo) / width * static_cast<double>(grid.bins_per_dim);
      const auto idx = static_cast<std::int64_t>(std::floor(rel));
      const std::size_t clamped = static_cast<std::size_t>(
          std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(grid.bins_per_dim) - 1));
      flat = flat * grid.bins_per_dim + clamped;
    }
    dist.probs[flat] += 1.0;
  }
  for (auto& p : dist.probs) p /= static_cast<double>(n);
  return {std::move(fit), std::move(dist)};
}

// Alternative embedder: Gaussian moments over all frames pooled across
// samples (population covariance). Sensitive to the per-frame marginal
// rather than per-sequence summaries.
inline GaussianFit fit_frames(const std::vector<LatentSeq>& samples) {
  if (samples.empty()) throw InputError("fit_frames: no samples");
  const std::size_t dim = samples[0].dim();
  std::size_t n = 0;
  GaussianFit fit;
  fit.mean = Tensor::vector(dim);
  fit.cov = Tensor::matrix(dim, dim);
  for (const auto& s : samples) {
    if (s.dim() != dim) throw InputError("fit_frames: ragged sample dimensions");
    for (std::size_t t = 0; t < s.len(); ++t, ++n)
      for (std::size_t d = 0; d < dim; ++d) fit.mean[d] += s.frames.at(t, d);
  }
  for (std::size_t d = 0; d < dim; ++d) fit.mean[d] /= static_cast<double>(n);
  for (const auto& s : samples)
    for (std::size_t t = 0; t < s.len(); ++t)
      for (std::size_t r = 0; r < dim; ++r)
        for (std::size_t c = 0; c < dim; ++c)
          fit.cov.at(r, c) += (s.frames.at(t, r) - fit.mean[r]) * (s.frames.at(t, c) - fit.mean[c]);
  for (std::size_t i = 0; i < fit.cov.size(); ++i) fit.cov[i] /= static_cast<double>(n);
  fit.n = n;
  return fit;
}

// Real-time factor: wall-clock seconds divided by the generated duration.
inline double rtf(double elapsed_seconds, std::size_t frames, double frame_rate) {
  if (frames == 0) throw InputError("rtf: zero frames");
  if (!(frame_rate > 0.0)) throw InputError("rtf: frame_rate must be positive");
  if (!(elapsed_seconds >= 0.0)) throw InputError("rtf: negative elapsed time");
  return elapsed_seconds / (static_cast<double>(frames) / frame_rate);
}

// One JSON object per line: {"metric":"...","value":...,"n":...}
inline void append_metric(std::ostream& out, const std::string& name, double value,
                          std::size_t n) {
  out << "{\"metric\":\"" << name << "\",\"value\":" << value << ",\"n\":" << n << "}\n";
}

}  // namespace latentflow
