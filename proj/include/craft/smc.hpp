#pragma once

// SMC with interleaved normalizing flows: transport, reweight, resample, MCMC.

#include "craft/core.hpp"
#include "craft/flows.hpp"
#include "craft/mcmc.hpp"
#include "craft/particles.hpp"
#include "craft/rng.hpp"
#include "craft/targets.hpp"

#include <stdexcept>
#include <vector>

namespace craft {

/// log G_k(x) = log gamma_k(T_k(x)) - log gamma_{k-1}(x) + log|det dT_k(x)|.
inline double log_incremental_weight(const Flow& flow, const AnnealedPath& path, int k, CRef x) {
  if (k < 1 || k > path.num_temperatures()) throw std::out_of_range("log_incremental_weight: k out of range");
  const double prev = path.log_density(k - 1, x);
  if (prev == kNegInf || std::isnan(prev)) throw DegenerateEnsembleError("particle has zero density at previous temperature", k);
  Vec y(x.size());
  const auto f = forward(flow, x, y);
  const double next = path.log_density(k, y);
  return next - prev + f.log_det;
}

/// Transported positions and log incremental weights for a whole ensemble.
struct Transport {
  RowMat positions;
  Vec log_g;
  double max_abs_log_scale = 0.0;
};

inline Transport transport(const ParticleEnsemble& e, const Flow& flow, const AnnealedPath& path, int k) {
  Transport t;
  t.positions.resize(e.size(), e.dim());
  t.log_g.resize(e.size());
  Vec x(e.dim()), y(e.dim());
  for (int i = 0; i < e.size(); ++i) {
    x = e.positions.row(i).transpose();
    const auto f = forward(flow, x, y);
    t.max_abs_log_scale = std::max(t.max_abs_log_scale, f.max_abs_log_scale);
    t.positions.row(i) = y.transpose();
    const double lg = path.log_density(k, y) - path.log_density(k - 1, x) + f.log_det;
    t.log_g[i] = std::isnan(lg) ? kNegInf : lg;
  }
  return t;
}

struct StepTrace {
  int step = 0;
  double ess_fraction = 1.0;  // ESS / N after reweighting, before resampling
  bool resampled = false;
  double log_z = 0.0;
  double log_z_increment = 0.0;
  double acceptance_rate = 0.0;
  double step_size = 0.0;
};

/// Steps (2)-(5) of an SMC-NF step given already transported particles.
inline ParticleEnsemble advance_transported(const ParticleEnsemble& prev, Transport t, const AnnealedPath& path, int k,
                                            const ResampleConfig& rcfg, const HmcConfig& hcfg, const RngKey& key,
                                            StepTrace* trace = nullptr) {
  LogZIncrement inc;
  try {
    inc = log_z_increment(prev.log_weights, t.log_g);
  } catch (const DegenerateEnsembleError&) {
    throw DegenerateEnsembleError("all incremental weights are zero", k);
  }
  ParticleEnsemble next;
  next.positions = std::move(t.positions);
  next.log_weights = (inc.unnormalized.array() - inc.delta).matrix();
  next.log_z = prev.log_z + inc.delta;
  next.step = k;

  StepTrace tr;
  tr.step = k;
  tr.log_z_increment = inc.delta;
  const int n = next.size();
  const double ess = effective_sample_size(next.log_weights);
  tr.ess_fraction = ess / n;
  if (ess <= n * rcfg.threshold_fraction) {
    Rng rng = key.child(stream_tag::kResample).stream();
    next = multinomial_resample(next, rng);
    tr.resampled = true;
  }
  const auto sweep = kernel_sweep(next, k, path, hcfg, key.child(stream_tag::kMcmc));
  tr.acceptance_rate = sweep.acceptance_rate;
  tr.step_size = sweep.step_size;
  tr.log_z = next.log_z;
  if (trace) *trace = tr;
  return next;
}

/// One SMC-NF step from temperature k-1 to k.
inline ParticleEnsemble smc_nf_step(const ParticleEnsemble& ensemble, const Flow& flow, const AnnealedPath& path, int k,
                                    const ResampleConfig& rcfg, const HmcConfig& hcfg, const RngKey& key,
                                    StepTrace* trace = nullptr) {
  if (ensemble.step != k - 1) throw std::invalid_argument("smc_nf_step: ensemble is not at step k-1");
  return advance_transported(ensemble, transport(ensemble, flow, path, k), path, k, rcfg, hcfg, key, trace);
}

/// N exact draws from the base distribution with uniform weights; particle i uses key.stream(i).
inline ParticleEnsemble sample_initial(const AnnealedPath& path, int num_particles, const RngKey& key) {
  if (num_particles < 1) throw std::invalid_argument("need at least one particle");
  RowMat x(num_particles, path.dim());
  Vec v(path.dim());
  for (int i = 0; i < num_particles; ++i) {
    Rng rng = key.stream(static_cast<std::uint64_t>(i));
    path.initial().sample(rng, v);
    x.row(i) = v.transpose();
  }
  return ParticleEnsemble::uniform(std::move(x));
}

struct SmcNfOutputs {
  ParticleEnsemble ensemble;
  double log_z = 0.0;
  std::vector<StepTrace> trace;
};

/// Full pass over all temperatures with fixed flows (flows[k-1] transports k-1 -> k).
inline SmcNfOutputs craft_deploy(const std::vector<Flow>& flows, const AnnealedPath& path, int num_particles,
                                 const ResampleConfig& rcfg, const HmcConfig& hcfg, const RngKey& key) {
  const int K = path.num_temperatures();
  if (static_cast<int>(flows.size()) != K) throw std::invalid_argument("craft_deploy: need one flow per transition");
  rcfg.validate(num_particles);
  SmcNfOutputs out;
  out.ensemble = sample_initial(path, num_particles, key.child(stream_tag::kInit));
  out.trace.reserve(static_cast<std::size_t>(K));
  for (int k = 1; k <= K; ++k) {
    StepTrace tr;
    out.ensemble = smc_nf_step(out.ensemble, flows[static_cast<std::size_t>(k - 1)], path, k, rcfg, hcfg,
                               key.child(stream_tag::kStep).child(static_cast<std::uint64_t>(k)), &tr);
    out.trace.push_back(tr);
  }
  out.log_z = out.ensemble.log_z;
  return out;
}

/// Plain SMC: identity flows at every transition.
inline SmcNfOutputs smc_deploy(const AnnealedPath& path, int num_particles, const ResampleConfig& rcfg,
                               const HmcConfig& hcfg, const RngKey& key) {
  std::vector<Flow> flows(static_cast<std::size_t>(path.num_temperatures()), Flow::identity(path.dim()));
  return craft_deploy(flows, path, num_particles, rcfg, hcfg, key);
}

}  // namespace craft
