#pragma once

// Particle independent Metropolis-Hastings over whole SMC-style runs, plus
// lattice observables and a direct HMC reference chain.

#include "craft/core.hpp"
#include "craft/lattice.hpp"
#include "craft/mcmc.hpp"
#include "craft/particles.hpp"
#include "craft/rng.hpp"
#include "craft/smc.hpp"
#include "craft/targets.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace craft {

// ---------------------------------------------------------------------------
// Observables

inline double two_point_susceptibility(CRef field) {
  const double s = field.sum();
  return s * s / static_cast<double>(field.size());
}

/// (1 / 2V) sum_x sum_mu phi(x) phi(x + e_mu) over the two forward directions.
inline double ising_energy_density(CRef field) {
  const Lattice lat = lattice_for(field.size());
  double acc = 0.0;
  for (int r = 0; r < lat.side; ++r)
    for (int c = 0; c < lat.side; ++c) {
      const double v = field[lat.index(r, c)];
      acc += v * (field[lat.index(r + 1, c)] + field[lat.index(r, c + 1)]);
    }
  return acc / (2.0 * lat.volume());
}

inline double mean_field(CRef field) { return field.mean(); }

struct Observable {
  std::string name;
  std::function<double(CRef)> fn;
};

inline std::vector<Observable> phi4_observables() {
  return {{"chi2", two_point_susceptibility}, {"ising_energy", ising_energy_density}, {"mean_field", mean_field}};
}

inline double weighted_observable(const Observable& o, const ParticleEnsemble& e) {
  double acc = 0.0;
  for (int i = 0; i < e.size(); ++i) {
    const double w = std::exp(e.log_weights[i]);
    if (w > 0.0) acc += w * o.fn(CRef(e.positions.row(i).transpose()));
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Batch means

struct MeanWithError {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Mean of the whole trace; standard error from `num_batches` contiguous batch
/// means (a leading remainder that does not fill a batch is dropped for the error only).
inline MeanWithError batch_means(const std::vector<double>& trace, int num_batches = 20) {
  MeanWithError r;
  if (trace.empty()) return r;
  double s = 0.0;
  for (double v : trace) s += v;
  r.mean = s / static_cast<double>(trace.size());
  const std::size_t b = trace.size() / static_cast<std::size_t>(num_batches);
  if (b == 0 || num_batches < 2) return r;
  const std::size_t skip = trace.size() - b * static_cast<std::size_t>(num_batches);
  std::vector<double> means(static_cast<std::size_t>(num_batches), 0.0);
  double grand = 0.0;
  for (int j = 0; j < num_batches; ++j) {
    double m = 0.0;
    for (std::size_t t = 0; t < b; ++t) m += trace[skip + static_cast<std::size_t>(j) * b + t];
    means[static_cast<std::size_t>(j)] = m / static_cast<double>(b);
    grand += means[static_cast<std::size_t>(j)];
  }
  grand /= num_batches;
  double var = 0.0;
  for (double m : means) var += (m - grand) * (m - grand);
  var /= (num_batches - 1);
  r.std_error = std::sqrt(var / num_batches);
  return r;
}

// ---------------------------------------------------------------------------
// PIMH

/// A proposal runner returns an independent (ensemble, log_z) draw for each key.
using ProposalRunner = std::function<SmcNfOutputs(const RngKey&)>;

struct PimhState {
  ParticleEnsemble ensemble;
  double log_z = kNegInf;
  long j = 0;
  long accepts = 0;
  long failures = 0;
};

/// Runs the proposal once more with a fresh key after a failure; a second failure propagates.
inline SmcNfOutputs run_proposal(const ProposalRunner& runner, const RngKey& key, long* failures) {
  try {
    return runner(key);
  } catch (const std::exception&) {
    if (failures) ++*failures;
    return runner(key.child(stream_tag::kProposal));
  }
}

/// Acceptance probability min(1, exp(log_z_star - log_z)).
inline double pimh_accept_prob(double log_z, double log_z_star) {
  if (log_z_star == kNegInf || std::isnan(log_z_star)) return 0.0;
  if (log_z_star >= log_z) return 1.0;
  return std::exp(log_z_star - log_z);
}

/// One PIMH transition. Proposal from key.child(kProposal), uniform from key.child(kAccept).
inline bool pimh_step(PimhState& state, const ProposalRunner& runner, const RngKey& key) {
  SmcNfOutputs prop = run_proposal(runner, key.child(stream_tag::kProposal), &state.failures);
  Rng rng = key.child(stream_tag::kAccept).stream();
  const double u = rng.uniform();
  const double a = pimh_accept_prob(state.log_z, prop.log_z);
  ++state.j;
  if (u < a) {
    state.ensemble = std::move(prop.ensemble);
    state.log_z = prop.log_z;
    ++state.accepts;
    return true;
  }
  return false;
}

struct PimhRecord {
  long step = 0;
  double seconds = 0.0;
  bool accepted = false;
  double log_z = 0.0;
  std::vector<double> values;         // per observable, this step
  std::vector<double> running_means;  // per observable
};

struct PimhResult {
  std::vector<std::string> names;
  std::vector<std::vector<double>> traces;  // per observable, per step
  std::vector<MeanWithError> estimates;     // per observable
  long steps = 0;
  long accepts = 0;
  long failures = 0;
  double acceptance_rate() const { return steps ? static_cast<double>(accepts) / static_cast<double>(steps) : 0.0; }
};

using PimhCallback = std::function<void(const PimhRecord&)>;

/// J PIMH steps (or fewer if `max_seconds` > 0 runs out). The initial state comes
/// from key.child(kInit); step j uses key.child(kStep).child(j). Each step
/// contributes sum_i W_i f(X_i) of the current ensemble.
inline PimhResult pimh_chain(long J, const ProposalRunner& runner, const std::vector<Observable>& observables,
                             const RngKey& key, const PimhCallback& on_step = {}, double max_seconds = 0.0,
                             int num_batches = 20) {
  if (J < 1) throw std::invalid_argument("pimh_chain: need J >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  PimhState state;
  SmcNfOutputs first = run_proposal(runner, key.child(stream_tag::kInit), &state.failures);
  if (!std::isfinite(first.log_z)) throw DegenerateEnsembleError("initial PIMH proposal has non-finite log_z");
  state.ensemble = std::move(first.ensemble);
  state.log_z = first.log_z;

  PimhResult res;
  const std::size_t m = observables.size();
  for (const auto& o : observables) res.names.push_back(o.name);
  res.traces.assign(m, {});
  std::vector<double> sums(m, 0.0);
  std::vector<double> cached(m, 0.0);
  bool stale = true;
  for (long j = 0; j < J; ++j) {
    if (max_seconds > 0.0 && j > 0 && elapsed() >= max_seconds) break;
    const bool acc = pimh_step(state, runner, key.child(stream_tag::kStep).child(static_cast<std::uint64_t>(j)));
    stale = stale || acc;
    PimhRecord rec;
    rec.step = j;
    rec.accepted = acc;
    rec.log_z = state.log_z;
    for (std::size_t o = 0; o < m; ++o) {
      if (stale) cached[o] = weighted_observable(observables[o], state.ensemble);
      sums[o] += cached[o];
      res.traces[o].push_back(cached[o]);
      rec.values.push_back(cached[o]);
      rec.running_means.push_back(sums[o] / static_cast<double>(j + 1));
    }
    stale = false;
    res.steps = j + 1;
    if (on_step) {
      rec.seconds = elapsed();
      on_step(rec);
    }
  }
  res.accepts = state.accepts;
  res.failures = state.failures;
  for (std::size_t o = 0; o < m; ++o) res.estimates.push_back(batch_means(res.traces[o], num_batches));
  return res;
}

// ---------------------------------------------------------------------------
// Direct HMC reference

struct HmcChainResult {
  std::vector<std::vector<double>> traces;
  std::vector<MeanWithError> estimates;
  long steps = 0;
  double acceptance_rate = 0.0;
};

/// Single HMC chain on the final target started from a base draw, run for
/// `max_steps` or until `max_seconds` elapses. The first `burn_in` steps are discarded.
inline HmcChainResult direct_hmc_chain(const AnnealedPath& path, const HmcConfig& cfg, const std::vector<Observable>& obs,
                                       const RngKey& key, long max_steps, double max_seconds = 0.0, long burn_in = 0,
                                       int num_batches = 20) {
  const auto t0 = std::chrono::steady_clock::now();
  const int K = path.num_temperatures();
  Vec x(path.dim());
  Rng init = key.child(stream_tag::kInit).stream();
  path.initial().sample(init, x);
  Rng rng = key.child(stream_tag::kMcmc).stream();
  HmcChainResult res;
  res.traces.assign(obs.size(), {});
  long accepted = 0, total = 0;
  for (long s = 0; s < max_steps; ++s) {
    if (max_seconds > 0.0 && std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >= max_seconds)
      break;
    const auto o = hmc_step(x, path, K, cfg, rng);
    accepted += o.accepted ? 1 : 0;
    ++total;
    if (s < burn_in) continue;
    for (std::size_t i = 0; i < obs.size(); ++i) res.traces[i].push_back(obs[i].fn(x));
  }
  res.steps = total;
  res.acceptance_rate = total ? static_cast<double>(accepted) / static_cast<double>(total) : 0.0;
  for (const auto& t : res.traces) res.estimates.push_back(batch_means(t, num_batches));
  return res;
}

}  // namespace craft
