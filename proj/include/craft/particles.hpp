#pragma once

// Weighted particle ensembles and log-space weight arithmetic.

#include "craft/core.hpp"
#include "craft/rng.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace craft {

/// N weighted particles at annealing step `step`.
/// `log_weights` are normalized (logsumexp == 0); `log_z` is the running
/// log normalizing-constant estimate.
struct ParticleEnsemble {
  RowMat positions;
  Vec log_weights;
  double log_z = 0.0;
  int step = 0;

  int size() const noexcept { return static_cast<int>(positions.rows()); }
  int dim() const noexcept { return static_cast<int>(positions.cols()); }

  /// Uniform weights, log_z = 0.
  static ParticleEnsemble uniform(RowMat positions, int step = 0) {
    const auto n = positions.rows();
    if (n < 1 || positions.cols() < 1) throw std::invalid_argument("ensemble needs N >= 1 and D >= 1");
    ParticleEnsemble e;
    e.positions = std::move(positions);
    e.log_weights = Vec::Constant(n, -std::log(static_cast<double>(n)));
    e.step = step;
    return e;
  }
};

enum class ResampleScheme { multinomial };

struct ResampleConfig {
  double threshold_fraction = 0.3;
  ResampleScheme scheme = ResampleScheme::multinomial;

  void validate(int num_particles) const {
    const double lo = 1.0 / static_cast<double>(num_particles);
    if (!(threshold_fraction >= lo - 1e-15 && threshold_fraction < 1.0))
      throw std::invalid_argument("resample threshold must lie in [1/N, 1)");
  }
};

/// Max-shifted logsumexp. Returns -inf when every entry is -inf.
inline double logsumexp(std::span<const double> x) {
  double m = kNegInf;
  for (double v : x) m = std::max(m, v);
  if (m == kNegInf) return kNegInf;
  if (m == std::numeric_limits<double>::infinity()) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline double logsumexp(const Vec& x) { return logsumexp(std::span<const double>(x.data(), x.size())); }

struct NormalizedWeights {
  Vec normalized;
  double log_total;
};

inline NormalizedWeights normalize_log_weights(const Vec& raw) {
  const double total = logsumexp(raw);
  if (total == kNegInf || std::isnan(total))
    throw DegenerateEnsembleError("all log-weights are -inf");
  return {(raw.array() - total).matrix(), total};
}

/// ESS = 1 / sum W_i^2 from normalized log-weights.
inline double effective_sample_size(const Vec& normalized_log_weights) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < normalized_log_weights.size(); ++i)
    s += std::exp(2.0 * normalized_log_weights[i]);
  return 1.0 / s;
}

struct LogZIncrement {
  double delta;
  Vec unnormalized;
};

/// delta = logsumexp(prev + log_G); also returns the unnormalized new log-weights.
inline LogZIncrement log_z_increment(const Vec& prev_log_weights, const Vec& log_g) {
  if (prev_log_weights.size() != log_g.size()) throw std::invalid_argument("log_z_increment: length mismatch");
  Vec un = prev_log_weights + log_g;
  for (Eigen::Index i = 0; i < un.size(); ++i)
    if (std::isnan(un[i])) un[i] = kNegInf;
  const double delta = logsumexp(un);
  if (delta == kNegInf) throw DegenerateEnsembleError("all incremental weights are zero");
  return {delta, std::move(un)};
}

/// Multinomial offspring indices drawn with probabilities exp(log_weights).
inline std::vector<int> multinomial_indices(const Vec& normalized_log_weights, Rng& rng) {
  const auto n = normalized_log_weights.size();
  std::vector<double> cdf(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    acc += std::exp(normalized_log_weights[i]);
    cdf[static_cast<std::size_t>(i)] = acc;
  }
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (auto& out : idx) {
    const double u = rng.uniform() * acc;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    // skip trailing zero-weight particles that share the final cdf value
    while (it != cdf.begin() && *(it - 1) == *it) --it;
    out = static_cast<int>(it - cdf.begin());
  }
  return idx;
}

/// Multinomial resampling. Weights become uniform, log_z is unchanged.
inline ParticleEnsemble multinomial_resample(const ParticleEnsemble& ensemble, Rng& rng) {
  const auto idx = multinomial_indices(ensemble.log_weights, rng);
  ParticleEnsemble out;
  out.positions.resize(ensemble.positions.rows(), ensemble.positions.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.positions.row(static_cast<Eigen::Index>(i)) = ensemble.positions.row(idx[i]);
  out.log_weights = Vec::Constant(ensemble.size(), -std::log(static_cast<double>(ensemble.size())));
  out.log_z = ensemble.log_z;
  out.step = ensemble.step;
  return out;
}

/// Weighted expectation sum_i W_i f(X_i).
template <class F>
double weighted_mean(const ParticleEnsemble& e, F&& f) {
  double s = 0.0;
  for (int i = 0; i < e.size(); ++i) {
    const double w = std::exp(e.log_weights[i]);
    if (w > 0.0) s += w * f(e.positions.row(i).transpose());
  }
  return s;
}

}  // namespace craft
