#pragma once

// Flow trainers: CRAFT, simple and practical AFT, SNF and plain VI baselines.
//
// All trainers minimize losses. For a transition k the per-particle loss is
//   D_k(x) = log gamma_{k-1}(x) - log gamma_k(T_k(x)) - log|det dT_k(x)| = -log G_k(x)
// and the particle estimate is sum_i W^i_{k-1} D_k(X^i_{k-1}).

#include "craft/core.hpp"
#include "craft/flows.hpp"
#include "craft/mcmc.hpp"
#include "craft/particles.hpp"
#include "craft/rng.hpp"
#include "craft/smc.hpp"
#include "craft/targets.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

namespace craft {

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
  /// Piecewise-constant step size: step_sizes[i] applies from switch_iterations[i-1] on.
  std::vector<double> step_sizes{1e-2};
  std::vector<int> switch_iterations{};
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  double step_size_at(int iteration) const {
    std::size_t i = 0;
    while (i < switch_iterations.size() && iteration >= switch_iterations[i]) ++i;
    return step_sizes.at(std::min(i, step_sizes.size() - 1));
  }

  void validate() const {
    if (step_sizes.empty()) throw std::invalid_argument("optimizer: need at least one step size");
    if (switch_iterations.size() + 1 != step_sizes.size())
      throw std::invalid_argument("optimizer: need one more step size than switch iterations");
    for (double s : step_sizes)
      if (!(s >= 0.0)) throw std::invalid_argument("optimizer: step sizes must be nonnegative");
  }

  /// 5e-2, dropping to 1e-2 after 100 iterations.
  static OptimizerConfig craft_default() { return {{5e-2, 1e-2}, {100}}; }
  static OptimizerConfig constant(double step) { return {{step}, {}}; }
};

struct AdamState {
  Vec m;
  Vec v;
  long t = 0;

  static AdamState zeros(Eigen::Index n) { return {Vec::Zero(n), Vec::Zero(n), 0}; }
};

/// Bias-corrected Adam descent step on a minimized loss.
inline void adam_update(Vec& params, const Vec& grad, AdamState& s, double step_size, double beta1 = 0.9,
                        double beta2 = 0.999, double eps = 1e-8) {
  if (s.m.size() != params.size()) s = AdamState::zeros(params.size());
  ++s.t;
  s.m = beta1 * s.m + (1.0 - beta1) * grad;
  s.v = beta2 * s.v + (1.0 - beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.t));
  params.array() -= step_size * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps);
}

inline void adam_update(Vec& params, const Vec& grad, AdamState& s, double step_size, const OptimizerConfig& cfg) {
  adam_update(params, grad, s, step_size, cfg.beta1, cfg.beta2, cfg.epsilon);
}

// ---------------------------------------------------------------------------
// Per-transition KL estimates

/// sum_i W_i D_k(X_i), equal to -(weighted mean log G_k).
inline double kl_loss_estimate(const Flow& flow, const AnnealedPath& path, int k, const ParticleEnsemble& e) {
  const Transport t = transport(e, flow, path, k);
  double loss = 0.0;
  for (int i = 0; i < e.size(); ++i) {
    const double w = std::exp(e.log_weights[i]);
    if (w > 0.0) loss -= w * t.log_g[i];
  }
  return loss;
}

struct KlEstimate {
  double loss = 0.0;
  Vec grad;
  Transport transport;
};

/// Loss, parameter gradient and the transported particles in one sweep.
/// Per particle the flow adjoint receives upstream -grad log gamma_k(T(x)) on
/// the output and -1 on the log-det.
inline KlEstimate kl_estimate_with_grad(const Flow& flow, const AnnealedPath& path, int k, const ParticleEnsemble& e) {
  KlEstimate est;
  est.grad = Vec::Zero(flow.num_params());
  est.transport.positions.resize(e.size(), e.dim());
  est.transport.log_g.resize(e.size());
  Vec x(e.dim()), y(e.dim()), gy(e.dim()), gx(e.dim()), gp(flow.num_params());
  for (int i = 0; i < e.size(); ++i) {
    x = e.positions.row(i).transpose();
    const auto f = forward(flow, x, y);
    est.transport.max_abs_log_scale = std::max(est.transport.max_abs_log_scale, f.max_abs_log_scale);
    est.transport.positions.row(i) = y.transpose();
    const double next = path.value_and_grad(k, y, gy);
    double lg = next - path.log_density(k - 1, x) + f.log_det;
    if (std::isnan(lg)) lg = kNegInf;
    est.transport.log_g[i] = lg;
    const double w = std::exp(e.log_weights[i]);
    if (w == 0.0) continue;
    est.loss -= w * lg;
    gp.setZero();
    adjoint(flow, x, -gy, -1.0, gx, gp);
    est.grad += w * gp;
  }
  return est;
}

inline Vec flow_grad_estimate(const Flow& flow, const AnnealedPath& path, int k, const ParticleEnsemble& e) {
  return kl_estimate_with_grad(flow, path, k, e).grad;
}

// ---------------------------------------------------------------------------
// Divergence guard

inline constexpr double kMaxAbsLogScale = 20.0;

inline void guard(double loss, const Vec& grad, double max_abs_log_scale, int k, int iteration) {
  if (!std::isfinite(loss)) throw DivergenceError("non-finite loss estimate", k, iteration);
  if (!grad.allFinite()) throw DivergenceError("non-finite gradient", k, iteration);
  if (max_abs_log_scale > kMaxAbsLogScale) throw DivergenceError("flow log-scale exceeded 20", k, iteration);
}

// ---------------------------------------------------------------------------
// CRAFT

struct PassRecord {
  int iteration = 0;
  double log_z = 0.0;
  double total_loss = 0.0;           // sum_k of per-transition loss estimates
  std::vector<double> losses;        // per transition
  std::vector<StepTrace> trace;      // per transition
};

struct TrainerState {
  std::vector<Flow> flows;
  std::vector<AdamState> moments;
  int iteration = 0;
  std::vector<PassRecord> metrics;
};

using PassCallback = std::function<void(const PassRecord&)>;

/// Key used by CRAFT pass j; deploying the same flows with this key reproduces the pass.
inline RngKey craft_pass_key(const RngKey& key, int j) { return key.child(stream_tag::kPass).child(static_cast<std::uint64_t>(j)); }

/// J passes; within each pass and for every k: gradient on the ensemble at k-1,
/// SMC-NF step with the current flow, then the flow update.
inline TrainerState craft_train(const AnnealedPath& path, std::vector<Flow> flow_inits, int num_particles, int iterations,
                                const OptimizerConfig& opt, const ResampleConfig& rcfg, const HmcConfig& hcfg,
                                const RngKey& key, const PassCallback& on_pass = {}) {
  const int K = path.num_temperatures();
  if (static_cast<int>(flow_inits.size()) != K) throw std::invalid_argument("craft_train: need one flow per transition");
  if (iterations < 0) throw std::invalid_argument("craft_train: iterations must be >= 0");
  opt.validate();
  rcfg.validate(num_particles);
  TrainerState state;
  state.flows = std::move(flow_inits);
  for (const auto& f : state.flows) state.moments.push_back(AdamState::zeros(f.num_params()));

  for (int j = 0; j < iterations; ++j) {
    const RngKey pass = craft_pass_key(key, j);
    const double lr = opt.step_size_at(j);
    PassRecord rec;
    rec.iteration = j;
    ParticleEnsemble ens = sample_initial(path, num_particles, pass.child(stream_tag::kInit));
    for (int k = 1; k <= K; ++k) {
      Flow& flow = state.flows[static_cast<std::size_t>(k - 1)];
      KlEstimate est = kl_estimate_with_grad(flow, path, k, ens);
      guard(est.loss, est.grad, est.transport.max_abs_log_scale, k, j);
      StepTrace tr;
      ens = advance_transported(ens, std::move(est.transport), path, k, rcfg, hcfg,
                                pass.child(stream_tag::kStep).child(static_cast<std::uint64_t>(k)), &tr);
      Vec p = flow.params();
      adam_update(p, est.grad, state.moments[static_cast<std::size_t>(k - 1)], lr, opt);
      if (!p.allFinite()) throw DivergenceError("non-finite flow parameters", k, j);
      flow = flow.with_params(std::move(p));
      rec.losses.push_back(est.loss);
      rec.total_loss += est.loss;
      rec.trace.push_back(tr);
    }
    rec.log_z = ens.log_z;
    state.iteration = j + 1;
    if (on_pass) on_pass(rec);
    state.metrics.push_back(std::move(rec));
  }
  return state;
}

/// Per-transition loss estimates along a fresh pass with fixed flows.
inline std::vector<double> evaluate_losses(const std::vector<Flow>& flows, const AnnealedPath& path, int num_particles,
                                           const ResampleConfig& rcfg, const HmcConfig& hcfg, const RngKey& key,
                                           double* log_z = nullptr) {
  std::vector<double> losses;
  ParticleEnsemble ens = sample_initial(path, num_particles, key.child(stream_tag::kInit));
  for (int k = 1; k <= path.num_temperatures(); ++k) {
    const Flow& flow = flows.at(static_cast<std::size_t>(k - 1));
    Transport t = transport(ens, flow, path, k);
    double loss = 0.0;
    for (int i = 0; i < ens.size(); ++i) {
      const double w = std::exp(ens.log_weights[i]);
      if (w > 0.0) loss -= w * t.log_g[i];
    }
    losses.push_back(loss);
    ens = advance_transported(ens, std::move(t), path, k, rcfg, hcfg,
                              key.child(stream_tag::kStep).child(static_cast<std::uint64_t>(k)));
  }
  if (log_z) *log_z = ens.log_z;
  return losses;
}

// ---------------------------------------------------------------------------
// AFT

struct AftResult {
  std::vector<Flow> flows;
  SmcNfOutputs outputs;              // the reported pass (train ensemble for simple AFT, test for practical)
  std::vector<double> train_losses;  // per transition, final flow on its training ensemble
  std::vector<std::vector<double>> validation_losses;  // practical AFT: per transition, index 0 = initial flow
  std::vector<int> selected_step;                      // practical AFT: chosen optimizer step per transition
};

/// Greedy single pass: at each k optimize the loss on the current ensemble for
/// `iterations_per_temperature` Adam steps, then advance with the optimized flow.
inline AftResult aft_simple_train(const AnnealedPath& path, std::vector<Flow> flow_inits, int num_particles,
                                  int iterations_per_temperature, const OptimizerConfig& opt, const ResampleConfig& rcfg,
                                  const HmcConfig& hcfg, const RngKey& key) {
  const int K = path.num_temperatures();
  if (static_cast<int>(flow_inits.size()) != K) throw std::invalid_argument("aft_simple_train: need one flow per transition");
  opt.validate();
  rcfg.validate(num_particles);
  AftResult res;
  res.outputs.ensemble = sample_initial(path, num_particles, key.child(stream_tag::kInit));
  for (int k = 1; k <= K; ++k) {
    Flow flow = flow_inits[static_cast<std::size_t>(k - 1)];
    AdamState st = AdamState::zeros(flow.num_params());
    for (int it = 0; it < iterations_per_temperature; ++it) {
      const KlEstimate est = kl_estimate_with_grad(flow, path, k, res.outputs.ensemble);
      guard(est.loss, est.grad, est.transport.max_abs_log_scale, k, it);
      Vec p = flow.params();
      adam_update(p, est.grad, st, opt.step_size_at(it), opt);
      flow = flow.with_params(std::move(p));
    }
    res.train_losses.push_back(kl_loss_estimate(flow, path, k, res.outputs.ensemble));
    StepTrace tr;
    res.outputs.ensemble = smc_nf_step(res.outputs.ensemble, flow, path, k, rcfg, hcfg,
                                       key.child(stream_tag::kStep).child(static_cast<std::uint64_t>(k)), &tr);
    res.outputs.trace.push_back(tr);
    res.flows.push_back(std::move(flow));
  }
  res.outputs.log_z = res.outputs.ensemble.log_z;
  return res;
}

/// Three independent ensembles (train / validation / test). Per temperature:
/// J Adam steps on the train ensemble, validation loss recorded before the
/// first step and after every step, the flow with the smallest validation loss
/// advances all three ensembles. `flow_inits` should be identity-initialized.
inline AftResult aft_practical_train(const AnnealedPath& path, std::vector<Flow> flow_inits, int n_train, int n_val,
                                     int n_test, int iterations, const OptimizerConfig& opt, const ResampleConfig& rcfg,
                                     const HmcConfig& hcfg, const RngKey& key) {
  const int K = path.num_temperatures();
  if (static_cast<int>(flow_inits.size()) != K) throw std::invalid_argument("aft_practical_train: need one flow per transition");
  opt.validate();
  rcfg.validate(n_train);
  rcfg.validate(n_val);
  rcfg.validate(n_test);
  const RngKey ktrain = key.child(stream_tag::kTrain), kval = key.child(stream_tag::kValidation),
               ktest = key.child(stream_tag::kTest);
  ParticleEnsemble train = sample_initial(path, n_train, ktrain.child(stream_tag::kInit));
  ParticleEnsemble val = sample_initial(path, n_val, kval.child(stream_tag::kInit));
  AftResult res;
  res.outputs.ensemble = sample_initial(path, n_test, ktest.child(stream_tag::kInit));

  for (int k = 1; k <= K; ++k) {
    Flow flow = flow_inits[static_cast<std::size_t>(k - 1)];
    AdamState st = AdamState::zeros(flow.num_params());
    std::vector<double> val_losses{kl_loss_estimate(flow, path, k, val)};
    Flow best = flow;
    int best_step = 0;
    for (int it = 0; it < iterations; ++it) {
      const KlEstimate est = kl_estimate_with_grad(flow, path, k, train);
      guard(est.loss, est.grad, est.transport.max_abs_log_scale, k, it);
      Vec p = flow.params();
      adam_update(p, est.grad, st, opt.step_size_at(it), opt);
      flow = flow.with_params(std::move(p));
      const double vl = kl_loss_estimate(flow, path, k, val);
      val_losses.push_back(vl);
      if (vl < val_losses[static_cast<std::size_t>(best_step)]) {
        best = flow;
        best_step = it + 1;
      }
    }
    res.train_losses.push_back(kl_loss_estimate(best, path, k, train));
    res.validation_losses.push_back(std::move(val_losses));
    res.selected_step.push_back(best_step);
    const auto step_key = [k](const RngKey& base) { return base.child(stream_tag::kStep).child(static_cast<std::uint64_t>(k)); };
    train = smc_nf_step(train, best, path, k, rcfg, hcfg, step_key(ktrain));
    val = smc_nf_step(val, best, path, k, rcfg, hcfg, step_key(kval));
    StepTrace tr;
    res.outputs.ensemble = smc_nf_step(res.outputs.ensemble, best, path, k, rcfg, hcfg, step_key(ktest), &tr);
    res.outputs.trace.push_back(tr);
    res.flows.push_back(std::move(best));
  }
  res.outputs.log_z = res.outputs.ensemble.log_z;
  return res;
}

// ---------------------------------------------------------------------------
// SNF baseline (no resampling, reparameterization-only gradient)

struct ElboRecord {
  int iteration = 0;
  double elbo = 0.0;   // mean log w
  double log_z = 0.0;  // log mean w
  double acceptance_rate = 0.0;
};

struct SnfPass {
  Vec log_w;                      // per particle
  std::vector<Vec> grads;         // per flow, gradient of mean log w (only when requested)
  double acceptance_rate = 0.0;
  double max_abs_log_scale = 0.0;
  RowMat final_positions;
};

/// One forward pass of the flow/HMC chain without resampling. Per particle
///   log w = log gamma_K(x_K) - log pi_0(x_0) + sum_k log|det dT_k(x_{k-1})|
///           + sum_k [log gamma_k(y_k) - log gamma_k(x_k)],  y_k = T_k(x_{k-1}),
/// with x_k the state after the MCMC at temperature k. With `with_grad`, also
/// returns d(mean log w)/d(theta_k) through the flows and the accepted leapfrog
/// trajectories; accept/reject decisions are treated as constants.
inline SnfPass snf_forward(const std::vector<Flow>& flows, const AnnealedPath& path, int num_particles,
                           const HmcConfig& hcfg, const RngKey& key, bool with_grad) {
  const int K = path.num_temperatures();
  const int d = path.dim();
  SnfPass out;
  out.log_w.resize(num_particles);
  out.final_positions.resize(num_particles, d);
  if (with_grad)
    for (const auto& f : flows) out.grads.push_back(Vec::Zero(f.num_params()));
  const ParticleEnsemble init = sample_initial(path, num_particles, key.child(stream_tag::kInit));
  long accepted = 0, proposals = 0;

  struct HmcRec {
    Vec start, momentum;
    bool accepted;
  };

  std::vector<Vec> xs(static_cast<std::size_t>(K) + 1), ys(static_cast<std::size_t>(K) + 1);
  std::vector<std::vector<HmcRec>> recs(static_cast<std::size_t>(K) + 1);
  Vec gtmp(d), gp;
  for (int i = 0; i < num_particles; ++i) {
    Vec x = init.positions.row(i).transpose();
    xs[0] = x;
    double lw = -path.log_density(0, x);
    for (int k = 1; k <= K; ++k) {
      Vec y(d);
      const auto f = forward(flows[static_cast<std::size_t>(k - 1)], x, y);
      out.max_abs_log_scale = std::max(out.max_abs_log_scale, f.max_abs_log_scale);
      lw += f.log_det;
      ys[static_cast<std::size_t>(k)] = y;
      const double before = path.log_density(k, y);
      Rng rng = key.child(stream_tag::kStep).child(static_cast<std::uint64_t>(k)).child(stream_tag::kMcmc).stream(static_cast<std::uint64_t>(i));
      auto& rk = recs[static_cast<std::size_t>(k)];
      rk.clear();
      x = y;
      for (int s = 0; s < hcfg.steps_per_temperature; ++s) {
        HmcRec r{x, Vec(), false};
        const auto o = hmc_step(x, path, k, hcfg, rng, &r.momentum);
        r.accepted = o.accepted;
        accepted += o.accepted ? 1 : 0;
        ++proposals;
        if (with_grad) rk.push_back(std::move(r));
      }
      xs[static_cast<std::size_t>(k)] = x;
      lw += before - path.log_density(k, x);
    }
    lw += path.log_density(K, x);
    out.log_w[i] = std::isnan(lw) ? kNegInf : lw;
    out.final_positions.row(i) = x.transpose();

    if (!with_grad) continue;
    // Reverse pass on the equivalent form sum_k [log gamma_k(y_k) + log|det| - log gamma_{k-1}(x_{k-1})].
    Vec adj_x = Vec::Zero(d);
    for (int k = K; k >= 1; --k) {
      const double eps = interp_step_size(hcfg, path.beta(k));
      auto grad_k = [&](CRef z, VRef g) { path.value_and_grad(k, z, g); };
      auto hvp_k = [&](CRef z, CRef v, VRef o) { path.hvp(k, z, v, o); };
      const auto& rk = recs[static_cast<std::size_t>(k)];
      for (std::size_t s = rk.size(); s-- > 0;) {
        if (rk[s].accepted && eps > 0.0)
          adj_x = leapfrog_adjoint(rk[s].start, rk[s].momentum, grad_k, hvp_k, eps, hcfg.num_leapfrog_steps, adj_x);
      }
      path.value_and_grad(k, ys[static_cast<std::size_t>(k)], gtmp);
      const Vec adj_y = adj_x + gtmp;
      const Flow& flow = flows[static_cast<std::size_t>(k - 1)];
      gp = Vec::Zero(flow.num_params());
      Vec gx(d);
      adjoint(flow, xs[static_cast<std::size_t>(k - 1)], adj_y, 1.0, gx, gp);
      out.grads[static_cast<std::size_t>(k - 1)] += gp / num_particles;
      path.value_and_grad(k - 1, xs[static_cast<std::size_t>(k - 1)], gtmp);
      adj_x = gx - gtmp;
    }
  }
  out.acceptance_rate = proposals ? static_cast<double>(accepted) / static_cast<double>(proposals) : 0.0;
  return out;
}

inline double log_mean_exp(const Vec& v) { return logsumexp(v) - std::log(static_cast<double>(v.size())); }

struct SnfResult {
  std::vector<Flow> flows;
  std::vector<ElboRecord> metrics;
};

using ElboCallback = std::function<void(const ElboRecord&)>;

/// Maximizes the SNF ELBO; one Adam update of every flow per forward pass.
inline SnfResult snf_train(const AnnealedPath& path, std::vector<Flow> flow_inits, int num_particles, int iterations,
                           const OptimizerConfig& opt, const HmcConfig& hcfg, const RngKey& key,
                           const ElboCallback& on_iter = {}) {
  const int K = path.num_temperatures();
  if (static_cast<int>(flow_inits.size()) != K) throw std::invalid_argument("snf_train: need one flow per transition");
  opt.validate();
  SnfResult res;
  res.flows = std::move(flow_inits);
  std::vector<AdamState> moments;
  for (const auto& f : res.flows) moments.push_back(AdamState::zeros(f.num_params()));
  for (int j = 0; j < iterations; ++j) {
    const SnfPass pass = snf_forward(res.flows, path, num_particles, hcfg, key.child(stream_tag::kPass).child(static_cast<std::uint64_t>(j)), true);
    ElboRecord rec{j, pass.log_w.mean(), log_mean_exp(pass.log_w), pass.acceptance_rate};
    for (int k = 1; k <= K; ++k) {
      const Vec& g = pass.grads[static_cast<std::size_t>(k - 1)];
      guard(-rec.elbo, g, pass.max_abs_log_scale, k, j);
      Flow& flow = res.flows[static_cast<std::size_t>(k - 1)];
      Vec p = flow.params();
      adam_update(p, -g, moments[static_cast<std::size_t>(k - 1)], opt.step_size_at(j), opt);
      flow = flow.with_params(std::move(p));
    }
    if (on_iter) on_iter(rec);
    res.metrics.push_back(rec);
  }
  return res;
}

// ---------------------------------------------------------------------------
// VI with a flow and no annealing

/// Per-sample log w = log gamma_K(T(x)) + log|det dT(x)| - log pi_0(x), x ~ pi_0.
inline SmcNfOutputs vi_proposal(const Flow& flow, const AnnealedPath& path, int num_particles, const RngKey& key) {
  const ParticleEnsemble init = sample_initial(path, num_particles, key.child(stream_tag::kInit));
  SmcNfOutputs out;
  out.ensemble.positions.resize(num_particles, path.dim());
  Vec lw(num_particles), x(path.dim()), y(path.dim());
  for (int i = 0; i < num_particles; ++i) {
    x = init.positions.row(i).transpose();
    const auto f = forward(flow, x, y);
    out.ensemble.positions.row(i) = y.transpose();
    const double v = path.final_density()(y) + f.log_det - path.initial().value(x);
    lw[i] = std::isnan(v) ? kNegInf : v;
  }
  const auto nw = normalize_log_weights(lw);
  out.ensemble.log_weights = nw.normalized;
  out.ensemble.log_z = nw.log_total - std::log(static_cast<double>(num_particles));
  out.ensemble.step = 1;
  out.log_z = out.ensemble.log_z;
  return out;
}

struct ViResult {
  Flow flow;
  std::vector<ElboRecord> metrics;
};

/// Mean per-sample log w and its gradient in the flow parameters.
inline std::pair<double, Vec> vi_elbo_and_grad(const Flow& flow, const AnnealedPath& path, const RowMat& base_samples,
                                               Vec* log_w_out = nullptr) {
  const int n = static_cast<int>(base_samples.rows());
  Vec grad = Vec::Zero(flow.num_params()), gp(flow.num_params());
  Vec x(path.dim()), y(path.dim()), gy(path.dim()), gx(path.dim());
  Vec lw(n);
  for (int i = 0; i < n; ++i) {
    x = base_samples.row(i).transpose();
    const auto f = forward(flow, x, y);
    const double v = path.final_density().value_and_grad(y, gy) + f.log_det - path.initial().value(x);
    lw[i] = v;
    gp.setZero();
    adjoint(flow, x, gy, 1.0, gx, gp);
    grad += gp;
  }
  if (log_w_out) *log_w_out = lw;
  return {lw.mean(), grad / n};
}

inline ViResult vi_train(const AnnealedPath& path, Flow flow, int num_particles, int iterations, const OptimizerConfig& opt,
                         const RngKey& key, const ElboCallback& on_iter = {}) {
  opt.validate();
  ViResult res{std::move(flow), {}};
  AdamState st = AdamState::zeros(res.flow.num_params());
  for (int j = 0; j < iterations; ++j) {
    const ParticleEnsemble base =
        sample_initial(path, num_particles, key.child(stream_tag::kPass).child(static_cast<std::uint64_t>(j)));
    Vec lw;
    auto [elbo, grad] = vi_elbo_and_grad(res.flow, path, base.positions, &lw);
    guard(-elbo, grad, 0.0, 1, j);
    ElboRecord rec{j, elbo, log_mean_exp(lw), 0.0};
    Vec p = res.flow.params();
    adam_update(p, -grad, st, opt.step_size_at(j), opt);
    res.flow = res.flow.with_params(std::move(p));
    if (on_iter) on_iter(rec);
    res.metrics.push_back(rec);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Model parameters

/// grad log Z ~ sum_i W_i grad_phi log gamma^phi(X_i) over the final ensemble.
template <class ScoreFn>
Vec model_param_grad(ScoreFn&& score, const ParticleEnsemble& ensemble) {
  Vec acc;
  for (int i = 0; i < ensemble.size(); ++i) {
    const double w = std::exp(ensemble.log_weights[i]);
    Vec s = score(CRef(ensemble.positions.row(i).transpose()));
    if (acc.size() == 0) acc = Vec::Zero(s.size());
    if (w > 0.0) acc += w * s;
  }
  return acc;
}

}  // namespace craft
