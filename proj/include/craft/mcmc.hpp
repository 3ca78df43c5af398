#pragma once

// Metropolis-corrected HMC with unit mass matrix.

#include "craft/core.hpp"
#include "craft/particles.hpp"
#include "craft/rng.hpp"
#include "craft/targets.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace craft {

struct HmcConfig {
  int num_leapfrog_steps = 10;
  int steps_per_temperature = 1;
  /// Step size as a piecewise-linear function of beta.
  std::vector<double> step_points{0.0, 0.25, 0.5, 1.0};
  std::vector<double> step_values{0.3, 0.3, 0.2, 0.2};

  void validate() const {
    if (num_leapfrog_steps < 1) throw std::invalid_argument("hmc: num_leapfrog_steps must be >= 1");
    if (steps_per_temperature < 0) throw std::invalid_argument("hmc: steps_per_temperature must be >= 0");
    if (step_points.size() != step_values.size() || step_points.empty())
      throw std::invalid_argument("hmc: step points and values differ in length");
    if (step_points.front() != 0.0 || step_points.back() != 1.0)
      throw std::invalid_argument("hmc: step points must start at 0 and end at 1");
    for (std::size_t i = 1; i < step_points.size(); ++i)
      if (!(step_points[i] > step_points[i - 1])) throw std::invalid_argument("hmc: step points must increase");
    for (double v : step_values)
      if (!(v >= 0.0)) throw std::invalid_argument("hmc: step sizes must be nonnegative");
  }

  /// Constant step size at every temperature.
  static HmcConfig constant(double step_size, int leapfrog, int steps) {
    HmcConfig c;
    c.num_leapfrog_steps = leapfrog;
    c.steps_per_temperature = steps;
    c.step_points = {0.0, 1.0};
    c.step_values = {step_size, step_size};
    return c;
  }
};

inline double interp_step_size(const HmcConfig& cfg, double beta) {
  const auto& x = cfg.step_points;
  const auto& y = cfg.step_values;
  if (x.size() == 1 || beta <= x.front()) return y.front();
  if (beta >= x.back()) return y.back();
  std::size_t j = 1;
  while (x[j] < beta) ++j;
  const double t = (beta - x[j - 1]) / (x[j] - x[j - 1]);
  return y[j - 1] + t * (y[j] - y[j - 1]);
}

/// n leapfrog steps for H = -log gamma(x) + |p|^2 / 2.
/// `grad` is called as grad(x, g) and must write grad log gamma(x) into g.
template <class GradFn>
void leapfrog(VRef x, VRef p, GradFn&& grad, double step_size, int n_steps) {
  Vec g(x.size());
  grad(x, g);
  for (int s = 0; s < n_steps; ++s) {
    p += 0.5 * step_size * g;
    x += step_size * p;
    grad(x, g);
    p += 0.5 * step_size * g;
  }
}

struct HmcOutcome {
  bool accepted = false;
  bool nonfinite = false;
  double accept_prob = 0.0;
};

/// One Metropolis-corrected HMC step in place. `value_and_grad(x, g)`
/// returns log gamma(x) and writes its gradient. If `momentum_out` is non-null
/// the initial momentum is stored there (needed to replay the trajectory).
template <class ValueGradFn>
HmcOutcome hmc_step(VRef x, ValueGradFn&& value_and_grad, double step_size, int n_leapfrog, Rng& rng,
                    Vec* momentum_out = nullptr) {
  const auto d = x.size();
  Vec p(d);
  for (Eigen::Index i = 0; i < d; ++i) p[i] = rng.normal();
  if (momentum_out) *momentum_out = p;
  const double log_u = std::log(rng.uniform());

  Vec g(d);
  const double lg0 = value_and_grad(x, g);
  const double h0 = -lg0 + 0.5 * p.squaredNorm();

  Vec xn = x;
  Vec pn = p;
  double lg1 = lg0;
  for (int s = 0; s < n_leapfrog; ++s) {
    pn += 0.5 * step_size * g;
    xn += step_size * pn;
    lg1 = value_and_grad(xn, g);
    pn += 0.5 * step_size * g;
  }
  const double h1 = -lg1 + 0.5 * pn.squaredNorm();

  HmcOutcome out;
  if (!std::isfinite(h1) || !std::isfinite(h0) || !xn.allFinite()) {
    out.nonfinite = true;
    return out;
  }
  const double log_alpha = std::min(0.0, h0 - h1);
  out.accept_prob = std::exp(log_alpha);
  if (log_u < h0 - h1 || h0 == h1) {
    x = xn;
    out.accepted = true;
  }
  return out;
}

/// hmc_step at temperature k of an annealed path, step size interpolated at beta_k.
inline HmcOutcome hmc_step(VRef x, const AnnealedPath& path, int k, const HmcConfig& cfg, Rng& rng,
                           Vec* momentum_out = nullptr) {
  const double eps = interp_step_size(cfg, path.beta(k));
  return hmc_step(
      x, [&](CRef y, VRef g) { return path.value_and_grad(k, y, g); }, eps, cfg.num_leapfrog_steps, rng, momentum_out);
}

struct SweepTelemetry {
  double acceptance_rate = 0.0;
  double step_size = 0.0;
  long nonfinite = 0;
  long proposals = 0;
};

/// Applies steps_per_temperature HMC steps to every particle at temperature k.
/// Particle i draws from key.stream(i). Weights and log_z are untouched.
inline SweepTelemetry kernel_sweep(ParticleEnsemble& ensemble, int k, const AnnealedPath& path, const HmcConfig& cfg,
                                   const RngKey& key) {
  SweepTelemetry t;
  t.step_size = interp_step_size(cfg, path.beta(k));
  if (cfg.steps_per_temperature == 0) return t;
  long accepted = 0;
  for (int i = 0; i < ensemble.size(); ++i) {
    Rng rng = key.stream(static_cast<std::uint64_t>(i));
    Vec x = ensemble.positions.row(i).transpose();
    for (int s = 0; s < cfg.steps_per_temperature; ++s) {
      const auto o = hmc_step(x, path, k, cfg, rng);
      accepted += o.accepted ? 1 : 0;
      t.nonfinite += o.nonfinite ? 1 : 0;
      ++t.proposals;
    }
    ensemble.positions.row(i) = x.transpose();
  }
  t.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(t.proposals);
  return t;
}

/// Reverse-mode pass through an accepted leapfrog trajectory started at
/// (x0, p0). Given the adjoint of the final position, returns the adjoint of
/// x0 with the momentum draw held fixed. Needs Hessian-vector products.
template <class GradFn, class HvpFn>
Vec leapfrog_adjoint(CRef x0, CRef p0, GradFn&& grad, HvpFn&& hvp, double step_size, int n_steps, CRef adj_x_final) {
  std::vector<Vec> xs;
  xs.reserve(static_cast<std::size_t>(n_steps) + 1);
  Vec x = x0, p = p0, g(x0.size());
  grad(x, g);
  xs.push_back(x);
  for (int s = 0; s < n_steps; ++s) {
    p += 0.5 * step_size * g;
    x += step_size * p;
    grad(x, g);
    p += 0.5 * step_size * g;
    xs.push_back(x);
  }
  Vec ax = adj_x_final, ap = Vec::Zero(x0.size()), hv(x0.size());
  for (int s = n_steps; s-- > 0;) {
    hvp(xs[static_cast<std::size_t>(s) + 1], ap, hv);
    ax += 0.5 * step_size * hv;
    ap += step_size * ax;
    hvp(xs[static_cast<std::size_t>(s)], ap, hv);
    ax += 0.5 * step_size * hv;
  }
  return ax;
}

}  // namespace craft
