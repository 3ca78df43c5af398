#pragma once

// Log-densities and geometric annealing paths.
//
// A LogDensity is a type-erased handle over any model providing
//   int dim() const;
//   double value(CRef x) const;
//   double value_and_grad(CRef x, VRef grad) const;
// and optionally
//   void hvp(CRef x, CRef v, VRef out) const;   // Hessian-vector product
// The Hessian-vector product is only needed to differentiate through HMC.

#include "craft/core.hpp"
#include "craft/lattice.hpp"
#include "craft/particles.hpp"
#include "craft/rng.hpp"

#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace craft {

inline constexpr double kLog2Pi = 1.8378770664093454836;

class LogDensity {
 public:
  LogDensity() = default;

  template <class Model>
  LogDensity(Model model, std::string name = "density")  // NOLINT(google-explicit-constructor)
      : impl_(std::make_shared<const Holder<Model>>(std::move(model))), name_(std::move(name)) {}

  int dim() const { return impl_->dim(); }
  double operator()(CRef x) const { return impl_->value(x); }
  double value_and_grad(CRef x, VRef grad) const { return impl_->value_and_grad(x, grad); }
  Vec grad(CRef x) const {
    Vec g(dim());
    impl_->value_and_grad(x, g);
    return g;
  }
  void hvp(CRef x, CRef v, VRef out) const { impl_->hvp(x, v, out); }
  bool has_hvp() const { return impl_->has_hvp(); }
  const std::string& name() const noexcept { return name_; }
  explicit operator bool() const noexcept { return static_cast<bool>(impl_); }

  /// Access the concrete model, or nullptr when the type does not match.
  template <class Model>
  const Model* target() const {
    auto* h = dynamic_cast<const Holder<Model>*>(impl_.get());
    return h ? &h->model : nullptr;
  }

 private:
  struct Concept {
    virtual ~Concept() = default;
    virtual int dim() const = 0;
    virtual double value(CRef x) const = 0;
    virtual double value_and_grad(CRef x, VRef g) const = 0;
    virtual void hvp(CRef x, CRef v, VRef out) const = 0;
    virtual bool has_hvp() const = 0;
  };

  template <class Model>
  struct Holder final : Concept {
    explicit Holder(Model m) : model(std::move(m)) {}
    int dim() const override { return model.dim(); }
    double value(CRef x) const override { return model.value(x); }
    double value_and_grad(CRef x, VRef g) const override { return model.value_and_grad(x, g); }
    void hvp(CRef x, CRef v, VRef out) const override {
      if constexpr (requires { model.hvp(x, v, out); }) {
        model.hvp(x, v, out);
      } else {
        throw std::logic_error("density does not provide Hessian-vector products");
      }
    }
    bool has_hvp() const override { return requires { model.hvp(std::declval<CRef>(), std::declval<CRef>(), std::declval<VRef>()); }; }
    Model model;
  };

  std::shared_ptr<const Concept> impl_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Gaussians

/// Axis-aligned Gaussian scaled by exp(log_scale_factor); also the sampleable base.
struct DiagGaussian {
  Vec mean;
  Vec scale;  // standard deviations
  double log_scale_factor = 0.0;

  static DiagGaussian standard(int dim) { return {Vec::Zero(dim), Vec::Ones(dim), 0.0}; }

  int dim() const { return static_cast<int>(mean.size()); }

  double value(CRef x) const {
    const auto z = ((x - mean).array() / scale.array());
    return log_scale_factor - 0.5 * dim() * kLog2Pi - scale.array().log().sum() - 0.5 * z.square().sum();
  }
  double value_and_grad(CRef x, VRef g) const {
    g = -((x - mean).array() / scale.array().square()).matrix();
    return value(x);
  }
  void hvp(CRef, CRef v, VRef out) const { out = -(v.array() / scale.array().square()).matrix(); }

  void sample(Rng& rng, VRef out) const {
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = mean[i] + scale[i] * rng.normal();
  }
};

/// Full-covariance normalized Gaussian.
class Gaussian {
 public:
  Gaussian(Vec mean, const Mat& cov) : mean_(std::move(mean)), llt_(cov) {
    if (llt_.info() != Eigen::Success) throw std::invalid_argument("Gaussian covariance is not positive definite");
    precision_ = llt_.solve(Mat::Identity(cov.rows(), cov.cols()));
    const Mat l = llt_.matrixL();
    log_norm_ = -0.5 * static_cast<double>(mean_.size()) * kLog2Pi - l.diagonal().array().log().sum();
  }

  int dim() const { return static_cast<int>(mean_.size()); }
  const Vec& mean() const { return mean_; }
  const Mat& precision() const { return precision_; }
  double log_normalizer() const { return log_norm_; }

  double value(CRef x) const {
    const Vec d = x - mean_;
    return log_norm_ - 0.5 * d.dot(precision_ * d);
  }
  double value_and_grad(CRef x, VRef g) const {
    const Vec d = x - mean_;
    g = -(precision_ * d);
    return log_norm_ + 0.5 * d.dot(g);
  }
  void hvp(CRef, CRef v, VRef out) const { out = -(precision_ * v); }

 private:
  Vec mean_;
  Eigen::LLT<Mat> llt_;
  Mat precision_;
  double log_norm_ = 0.0;
};

inline double gaussian_log_density(const Vec& mean, const Mat& cov, CRef x) { return Gaussian(mean, cov).value(x); }

/// Normalized finite Gaussian mixture, optionally scaled by exp(log_scale_factor).
class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, std::vector<Gaussian> components, double log_scale_factor = 0.0)
      : components_(std::move(components)), log_scale_factor_(log_scale_factor) {
    if (weights.size() != components_.size() || weights.empty())
      throw std::invalid_argument("mixture weights and components differ in length");
    double total = 0.0;
    for (double w : weights) {
      if (!(w > 0.0)) throw std::invalid_argument("mixture weights must be positive");
      total += w;
    }
    for (double w : weights) log_weights_.push_back(std::log(w / total));
  }

  int dim() const { return components_.front().dim(); }
  const std::vector<Gaussian>& components() const noexcept { return components_; }
  const std::vector<double>& log_weights() const noexcept { return log_weights_; }

  double value(CRef x) const {
    std::vector<double> terms(components_.size());
    for (std::size_t j = 0; j < components_.size(); ++j) terms[j] = log_weights_[j] + components_[j].value(x);
    return log_scale_factor_ + logsumexp(terms);
  }

  double value_and_grad(CRef x, VRef g) const {
    std::vector<double> terms(components_.size());
    std::vector<Vec> grads(components_.size(), Vec(dim()));
    for (std::size_t j = 0; j < components_.size(); ++j)
      terms[j] = log_weights_[j] + components_[j].value_and_grad(x, grads[j]);
    const double lse = logsumexp(terms);
    g.setZero();
    for (std::size_t j = 0; j < components_.size(); ++j) g += std::exp(terms[j] - lse) * grads[j];
    return log_scale_factor_ + lse;
  }

  void hvp(CRef x, CRef v, VRef out) const {
    std::vector<double> terms(components_.size());
    std::vector<Vec> grads(components_.size(), Vec(dim()));
    for (std::size_t j = 0; j < components_.size(); ++j)
      terms[j] = log_weights_[j] + components_[j].value_and_grad(x, grads[j]);
    const double lse = logsumexp(terms);
    Vec mean_grad = Vec::Zero(dim());
    out.setZero();
    Vec tmp(dim());
    for (std::size_t j = 0; j < components_.size(); ++j) {
      const double r = std::exp(terms[j] - lse);
      components_[j].hvp(x, v, tmp);
      out += r * (tmp + grads[j] * grads[j].dot(v));
      mean_grad += r * grads[j];
    }
    out -= mean_grad * mean_grad.dot(v);
  }

 private:
  std::vector<Gaussian> components_;
  std::vector<double> log_weights_;
  double log_scale_factor_;
};

inline double mixture_log_density(const std::vector<double>& weights, const std::vector<Vec>& means,
                                  const std::vector<Mat>& covs, CRef x) {
  std::vector<Gaussian> comps;
  for (std::size_t j = 0; j < means.size(); ++j) comps.emplace_back(means[j], covs.at(j));
  return GaussianMixture(weights, std::move(comps)).value(x);
}

// ---------------------------------------------------------------------------
// Lattice phi^4

struct Phi4Config {
  int lattice_side = 14;
  double coupling = 5.1;        // lambda
  double mass_squared = -4.75;  // m^2

  void validate() const {
    if (lattice_side < 2) throw std::invalid_argument("phi4 lattice side must be >= 2");
    if (coupling < 0.0) throw std::invalid_argument("phi4 coupling must be >= 0");
  }
};

/// S(phi) = sum_x { phi(x) zeta(x) + m^2 phi(x)^2 + lambda phi(x)^4 },
/// zeta(x) = sum_mu [2 phi(x) - phi(x + e_mu) - phi(x - e_mu)].
inline double phi4_action(const Phi4Config& cfg, CRef field) {
  const Lattice lat{cfg.lattice_side};
  double s = 0.0;
  for (int r = 0; r < lat.side; ++r) {
    for (int c = 0; c < lat.side; ++c) {
      const double p = field[lat.index(r, c)];
      const double zeta = 4.0 * p - field[lat.index(r + 1, c)] - field[lat.index(r - 1, c)] -
                          field[lat.index(r, c + 1)] - field[lat.index(r, c - 1)];
      const double p2 = p * p;
      s += p * zeta + cfg.mass_squared * p2 + cfg.coupling * p2 * p2;
    }
  }
  return s;
}

/// dS/dphi(x) = 8 phi(x) - 2 sum_nbr phi + 2 m^2 phi + 4 lambda phi^3.
inline Vec phi4_grad(const Phi4Config& cfg, CRef field) {
  const Lattice lat{cfg.lattice_side};
  Vec g(field.size());
  for (int r = 0; r < lat.side; ++r) {
    for (int c = 0; c < lat.side; ++c) {
      const double p = field[lat.index(r, c)];
      const double nbr = field[lat.index(r + 1, c)] + field[lat.index(r - 1, c)] + field[lat.index(r, c + 1)] +
                         field[lat.index(r, c - 1)];
      g[lat.index(r, c)] = 8.0 * p - 2.0 * nbr + 2.0 * cfg.mass_squared * p + 4.0 * cfg.coupling * p * p * p;
    }
  }
  return g;
}

/// log gamma(phi) = -S(phi).
struct Phi4Target {
  Phi4Config config;

  int dim() const { return config.lattice_side * config.lattice_side; }
  double value(CRef x) const { return -phi4_action(config, x); }
  double value_and_grad(CRef x, VRef g) const {
    g = -phi4_grad(config, x);
    return value(x);
  }
  void hvp(CRef x, CRef v, VRef out) const {
    const Lattice lat{config.lattice_side};
    for (int r = 0; r < lat.side; ++r) {
      for (int c = 0; c < lat.side; ++c) {
        const int i = lat.index(r, c);
        const double nbr = v[lat.index(r + 1, c)] + v[lat.index(r - 1, c)] + v[lat.index(r, c + 1)] + v[lat.index(r, c - 1)];
        out[i] = -(8.0 * v[i] - 2.0 * nbr + 2.0 * config.mass_squared * v[i] + 12.0 * config.coupling * x[i] * x[i] * v[i]);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Log Gaussian Cox process on an M x M grid over the unit square.
//
// Latent field f = mean + L z with L L^T the exponential-decay covariance
// K(a, b) = variance * exp(-|a - b| / lengthscale) between cell centres.
// The density is over the whitened z:
//   log gamma(z) = log N(z; 0, I) + sum_i [ y_i f_i - area * exp(f_i) ].

struct LgcpConfig {
  int lattice_side = 0;
  double kernel_variance = 1.91;
  double kernel_lengthscale = 1.0 / 33.0;
  double mean_offset = std::log(126.0) - 0.5 * 1.91;
  std::vector<int> counts;  // row-major, lattice_side^2 entries

  void validate() const {
    if (lattice_side < 1) throw std::invalid_argument("lgcp lattice side must be >= 1");
    if (counts.size() != static_cast<std::size_t>(lattice_side * lattice_side))
      throw std::invalid_argument("lgcp counts must have lattice_side^2 entries");
    for (int c : counts)
      if (c < 0) throw std::invalid_argument("lgcp counts must be nonnegative");
    if (!(kernel_variance > 0.0) || !(kernel_lengthscale > 0.0))
      throw std::invalid_argument("lgcp kernel variance and lengthscale must be positive");
  }
};

inline Mat lgcp_covariance(const LgcpConfig& cfg) {
  const int m = cfg.lattice_side;
  const int d = m * m;
  Mat k(d, d);
  for (int a = 0; a < d; ++a) {
    for (int b = 0; b < d; ++b) {
      const double dr = static_cast<double>(a / m - b / m) / m;
      const double dc = static_cast<double>(a % m - b % m) / m;
      k(a, b) = cfg.kernel_variance * std::exp(-std::sqrt(dr * dr + dc * dc) / cfg.kernel_lengthscale);
    }
  }
  return k;
}

class LgcpTarget {
 public:
  explicit LgcpTarget(LgcpConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Eigen::LLT<Mat> llt(lgcp_covariance(cfg_));
    if (llt.info() != Eigen::Success) throw std::invalid_argument("lgcp covariance is not positive definite");
    chol_ = llt.matrixL();
    counts_ = Vec(dim());
    for (int i = 0; i < dim(); ++i) counts_[i] = cfg_.counts[static_cast<std::size_t>(i)];
    cell_area_ = 1.0 / static_cast<double>(dim());
  }

  int dim() const { return cfg_.lattice_side * cfg_.lattice_side; }
  const LgcpConfig& config() const noexcept { return cfg_; }
  const Mat& cholesky() const noexcept { return chol_; }
  double cell_area() const noexcept { return cell_area_; }

  Vec latent(CRef z) const { return (chol_ * z).array() + cfg_.mean_offset; }

  double value(CRef z) const {
    const Vec f = latent(z);
    return -0.5 * dim() * kLog2Pi - 0.5 * z.squaredNorm() + counts_.dot(f) - cell_area_ * f.array().exp().sum();
  }
  double value_and_grad(CRef z, VRef g) const {
    const Vec f = latent(z);
    const Vec rate = cell_area_ * f.array().exp();
    g = -z + chol_.transpose() * (counts_ - rate);
    return -0.5 * dim() * kLog2Pi - 0.5 * z.squaredNorm() + counts_.dot(f) - rate.sum();
  }
  void hvp(CRef z, CRef v, VRef out) const {
    const Vec f = latent(z);
    const Vec rate = cell_area_ * f.array().exp();
    out = -v - chol_.transpose() * (rate.array() * (chol_ * v).array()).matrix();
  }

 private:
  LgcpConfig cfg_;
  Mat chol_;
  Vec counts_;
  double cell_area_ = 0.0;
};

inline double lgcp_log_density(const LgcpConfig& cfg, CRef z) { return LgcpTarget(cfg).value(z); }

// ---------------------------------------------------------------------------
// Annealing

/// beta_k = k / K.
inline std::vector<double> uniform_schedule(int num_temperatures) {
  if (num_temperatures < 1) throw std::invalid_argument("need at least one temperature");
  std::vector<double> b(static_cast<std::size_t>(num_temperatures) + 1);
  for (int k = 0; k <= num_temperatures; ++k) b[static_cast<std::size_t>(k)] = static_cast<double>(k) / num_temperatures;
  b.back() = 1.0;
  return b;
}

/// Geometric path log gamma_k = (1 - beta_k) log pi_0 + beta_k log gamma_K.
class AnnealedPath {
 public:
  AnnealedPath(DiagGaussian initial, LogDensity final_density, std::vector<double> betas)
      : initial_(std::move(initial)), final_(std::move(final_density)), betas_(std::move(betas)) {
    if (betas_.size() < 2) throw std::invalid_argument("schedule needs K >= 1");
    if (betas_.front() != 0.0 || betas_.back() != 1.0) throw std::invalid_argument("schedule must run from 0 to 1");
    for (std::size_t k = 1; k < betas_.size(); ++k)
      if (!(betas_[k] > betas_[k - 1])) throw std::invalid_argument("schedule must be strictly increasing");
    if (initial_.dim() != final_.dim()) throw std::invalid_argument("initial and final densities differ in dimension");
  }

  AnnealedPath(DiagGaussian initial, LogDensity final_density, int num_temperatures)
      : AnnealedPath(std::move(initial), std::move(final_density), uniform_schedule(num_temperatures)) {}

  int num_temperatures() const noexcept { return static_cast<int>(betas_.size()) - 1; }
  int dim() const { return initial_.dim(); }
  double beta(int k) const { return betas_.at(static_cast<std::size_t>(k)); }
  const std::vector<double>& betas() const noexcept { return betas_; }
  const DiagGaussian& initial() const noexcept { return initial_; }
  const LogDensity& final_density() const noexcept { return final_; }

  double log_density(int k, CRef x) const { return at_beta(beta(k), x); }

  double value_and_grad(int k, CRef x, VRef g) const {
    const double b = beta(k);
    if (b == 0.0) return initial_.value_and_grad(x, g);
    if (b == 1.0) return final_.value_and_grad(x, g);
    Vec g0(x.size());
    const double l0 = initial_.value_and_grad(x, g0);
    const double l1 = final_.value_and_grad(x, g);
    g = (1.0 - b) * g0 + b * g;
    return blend(b, l0, l1);
  }

  Vec grad(int k, CRef x) const {
    Vec g(x.size());
    value_and_grad(k, x, g);
    return g;
  }

  void hvp(int k, CRef x, CRef v, VRef out) const {
    const double b = beta(k);
    if (b == 0.0) return initial_.hvp(x, v, out);
    if (b == 1.0) return final_.hvp(x, v, out);
    Vec h0(x.size());
    initial_.hvp(x, v, h0);
    final_.hvp(x, v, out);
    out = (1.0 - b) * h0 + b * out;
  }

  /// Same path with a different set of temperatures.
  AnnealedPath with_schedule(std::vector<double> betas) const { return {initial_, final_, std::move(betas)}; }

 private:
  double at_beta(double b, CRef x) const {
    if (b == 0.0) return initial_.value(x);
    if (b == 1.0) return final_(x);
    return blend(b, initial_.value(x), final_(x));
  }
  static double blend(double b, double l0, double l1) {
    if (!std::isfinite(l0) || !std::isfinite(l1)) {
      if (std::isnan(l0) || std::isnan(l1) || l0 == kNegInf || l1 == kNegInf) return kNegInf;
    }
    return (1.0 - b) * l0 + b * l1;
  }

  DiagGaussian initial_;
  LogDensity final_;
  std::vector<double> betas_;
};

inline double annealed_log_density(const AnnealedPath& path, int k, CRef x) { return path.log_density(k, x); }
inline Vec annealed_grad(const AnnealedPath& path, int k, CRef x) { return path.grad(k, x); }

}  // namespace craft
