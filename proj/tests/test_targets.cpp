#include "craft/lattice.hpp"
#include "craft/targets.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace craft;

namespace {

Vec randn(int n, std::uint64_t seed, double scale = 1.0) {
  Rng rng = RngKey(seed).stream();
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

AnnealedPath gaussian_path(double sigma, int K) {
  DiagGaussian fin{Vec::Zero(1), Vec::Constant(1, sigma), 0.0};
  return AnnealedPath(DiagGaussian::standard(1), LogDensity(fin), K);
}

// naive phi^4 action with explicit shifts in both directions
double naive_action(int L, double lam, double m2, const Vec& phi) {
  auto at = [&](int r, int c) { return phi[((r % L + L) % L) * L + ((c % L + L) % L)]; };
  double s = 0.0;
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < L; ++c) {
      double zeta = 0.0;
      const int dr[2] = {1, 0}, dc[2] = {0, 1};
      for (int mu = 0; mu < 2; ++mu) zeta += 2.0 * at(r, c) - at(r + dr[mu], c + dc[mu]) - at(r - dr[mu], c - dc[mu]);
      s += at(r, c) * zeta + m2 * std::pow(at(r, c), 2) + lam * std::pow(at(r, c), 4);
    }
  return s;
}

}  // namespace

TEST(AnnealedPath, Endpoints) {
  const auto path = gaussian_path(2.0, 4);
  const Vec x = Vec::Constant(1, 0.7);
  EXPECT_EQ(path.log_density(0, x), path.initial().value(x));
  EXPECT_EQ(path.log_density(4, x), path.final_density()(x));
}

TEST(AnnealedPath, GaussianBlendClosedForm) {
  const double sigma = 2.0;
  const auto path = gaussian_path(sigma, 4);
  for (int k = 0; k <= 4; ++k) {
    const double b = k / 4.0;
    const double lam = (1.0 - b) + b / (sigma * sigma);
    for (double x : {-1.5, 0.0, 0.3, 2.0}) {
      // (1-b) log N(x;0,1) + b log N(x;0,sigma^2)
      const double ref = -0.5 * lam * x * x - 0.5 * oracle::kLog2Pi - b * std::log(sigma);
      EXPECT_NEAR(path.log_density(k, Vec::Constant(1, x)), ref, 1e-13);
      EXPECT_NEAR(path.grad(k, Vec::Constant(1, x))[0], -lam * x, 1e-13);
    }
  }
}

TEST(AnnealedPath, StandardNormalGradient) {
  const auto path = gaussian_path(1.0, 2);
  const Vec x = randn(1, 3);
  EXPECT_NEAR(path.grad(0, x)[0], -x[0], 1e-15);
}

TEST(AnnealedPath, MonotoneInK) {
  const auto path = gaussian_path(3.0, 10);
  for (int t = 0; t < 20; ++t) {
    const Vec x = randn(1, 100 + t, 3.0);
    const bool up = path.final_density()(x) > path.initial().value(x);
    for (int k = 1; k <= 10; ++k) {
      if (up) EXPECT_GE(path.log_density(k, x), path.log_density(k - 1, x) - 1e-12);
      else EXPECT_LE(path.log_density(k, x), path.log_density(k - 1, x) + 1e-12);
    }
  }
}

TEST(AnnealedPath, NonFiniteTreatedAsZeroDensity) {
  struct Bad {
    int dim() const { return 1; }
    double value(CRef) const { return std::nan(""); }
    double value_and_grad(CRef, VRef g) const {
      g.setZero();
      return std::nan("");
    }
  };
  const AnnealedPath path(DiagGaussian::standard(1), LogDensity(Bad{}), 2);
  EXPECT_EQ(path.log_density(1, Vec::Zero(1)), kNegInf);
}

TEST(AnnealedPath, GradMatchesFiniteDifferencesOnMixture) {
  std::vector<Gaussian> comps;
  comps.emplace_back(Vec::Constant(2, 1.0), Mat::Identity(2, 2) * 0.5);
  Mat c2(2, 2);
  c2 << 1.0, 0.3, 0.3, 0.7;
  comps.emplace_back(Vec::Constant(2, -1.5), c2);
  const AnnealedPath path(DiagGaussian::standard(2), LogDensity(GaussianMixture({0.3, 0.7}, comps, 1.2)), 5);
  for (int k = 0; k <= 5; ++k) {
    const Vec x = randn(2, 40 + k);
    const Vec fd = oracle::fd_grad([&](const Vec& z) { return path.log_density(k, z); }, x);
    EXPECT_LT(oracle::rel_err(path.grad(k, x), fd), 1e-6);
  }
}

TEST(Phi4, ZeroField) {
  const Phi4Config cfg{4, 5.1, -4.75};
  EXPECT_EQ(phi4_action(cfg, Vec::Zero(16)), 0.0);
  EXPECT_EQ(phi4_grad(cfg, Vec::Zero(16)), Vec::Zero(16));
}

TEST(Phi4, ConstantField) {
  const Phi4Config cfg{4, 5.1, -4.75};
  const double c = 0.6;
  EXPECT_NEAR(phi4_action(cfg, Vec::Constant(16, c)), 16 * (cfg.mass_squared * c * c + cfg.coupling * std::pow(c, 4)), 1e-12);
  const Vec g = phi4_grad(cfg, Vec::Constant(16, c));
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(g[i], 2 * cfg.mass_squared * c + 4 * cfg.coupling * c * c * c, 1e-12);
}

TEST(Phi4, MatchesNaiveLoop) {
  const Phi4Config cfg{4, 5.1, -4.75};
  const Vec phi = randn(16, 5);
  EXPECT_NEAR(phi4_action(cfg, phi), naive_action(4, 5.1, -4.75, phi), 1e-11);
}

TEST(Phi4, GradMatchesFiniteDifferences) {
  const Phi4Config cfg{6, 5.1, -4.75};
  const Vec phi = randn(36, 6, 0.8);
  const Vec fd = oracle::fd_grad([&](const Vec& z) { return phi4_action(cfg, z); }, phi);
  EXPECT_LT(oracle::rel_err(phi4_grad(cfg, phi), fd), 1e-6);
}

TEST(Phi4, HvpMatchesFiniteDifferenceOfGradient) {
  const Phi4Target t{{5, 5.1, -4.75}};
  const Vec phi = randn(25, 7, 0.8), v = randn(25, 8);
  Vec hv(25), gp(25), gm(25);
  t.hvp(phi, v, hv);
  const double h = 1e-6;
  t.value_and_grad(phi + h * v, gp);
  t.value_and_grad(phi - h * v, gm);
  EXPECT_LT(oracle::rel_err(hv, (gp - gm) / (2 * h)), 1e-6);
}

TEST(Phi4, TranslationInvariance) {
  const Phi4Config cfg{6, 5.1, -4.75};
  const Vec phi = randn(36, 9);
  const double s0 = phi4_action(cfg, phi);
  const Vec g0 = phi4_grad(cfg, phi);
  for (int dr = 0; dr < 6; ++dr)
    for (int dc = 0; dc < 6; ++dc) {
      const Vec shifted = translate_lattice(phi, dr, dc);
      EXPECT_NEAR(phi4_action(cfg, shifted), s0, 1e-12);
      EXPECT_EQ(phi4_grad(cfg, shifted), translate_lattice(g0, dr, dc));
    }
}

TEST(Gaussian, AtMean) {
  Mat cov(2, 2);
  cov << 2.0, 0.5, 0.5, 1.0;
  const Vec m = Vec::Constant(2, 0.3);
  EXPECT_NEAR(gaussian_log_density(m, cov, m), -oracle::kLog2Pi - 0.5 * std::log(cov.determinant()), 1e-13);
}

TEST(Mixture, SymmetricMidpoint) {
  const std::vector<Vec> means{Vec::Constant(2, 2.0), Vec::Constant(2, -2.0)};
  const std::vector<Mat> covs{Mat::Identity(2, 2), Mat::Identity(2, 2)};
  const Vec mid = Vec::Zero(2);
  const double v = mixture_log_density({0.5, 0.5}, means, covs, mid);
  EXPECT_NEAR(v, mixture_log_density({0.5, 0.5}, means, covs, Vec::Zero(2)), 0.0);
  const GaussianMixture mix({0.5, 0.5}, {Gaussian(means[0], covs[0]), Gaussian(means[1], covs[1])});
  Vec g(2);
  EXPECT_NEAR(mix.value_and_grad(mid, g), v, 1e-14);
  EXPECT_LT(g.norm(), 1e-14);
  // value by hand: log N(0; 2*1, I)
  EXPECT_NEAR(v, -oracle::kLog2Pi - 4.0, 1e-13);
}

TEST(Mixture, HvpMatchesFiniteDifferences) {
  const GaussianMixture mix({0.4, 0.6}, {Gaussian(Vec::Constant(3, 1.0), Mat::Identity(3, 3)),
                                         Gaussian(Vec::Constant(3, -1.0), 2.0 * Mat::Identity(3, 3))});
  const Vec x = randn(3, 10), v = randn(3, 11);
  Vec hv(3), gp(3), gm(3);
  mix.hvp(x, v, hv);
  mix.value_and_grad(x + 1e-6 * v, gp);
  mix.value_and_grad(x - 1e-6 * v, gm);
  EXPECT_LT(oracle::rel_err(hv, (gp - gm) / 2e-6), 1e-6);
}

// Independent LGCP construction on a 2x2 grid: Gaussian prior density of f
// evaluated through its inverse covariance plus the whitening Jacobian.
TEST(Lgcp, TwoByTwoMatchesDirectConstruction) {
  LgcpConfig cfg;
  cfg.lattice_side = 2;
  cfg.kernel_lengthscale = 0.5;
  cfg.counts = {3, 0, 1, 5};
  const LgcpTarget t(cfg);
  // cell centres (0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75) in row-major order
  const double cx[4] = {0.25, 0.75, 0.25, 0.75}, cy[4] = {0.25, 0.25, 0.75, 0.75};
  Mat cov(4, 4);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      cov(a, b) = 1.91 * std::exp(-std::hypot(cx[a] - cx[b], cy[a] - cy[b]) / 0.5);
  const Mat L = cov.llt().matrixL();
  const double mu = std::log(126.0) - 0.5 * 1.91;
  for (int trial = 0; trial < 5; ++trial) {
    const Vec z = randn(4, 20 + trial);
    const Vec f = (L * z).array() + mu;
    const Vec d = f.array() - mu;
    const double log_prior_f = -2.0 * oracle::kLog2Pi - 0.5 * std::log(cov.determinant()) - 0.5 * d.dot(cov.ldlt().solve(d));
    const double log_jac = L.diagonal().array().log().sum();
    double lik = 0.0;
    for (int i = 0; i < 4; ++i) lik += cfg.counts[static_cast<std::size_t>(i)] * f[i] - 0.25 * std::exp(f[i]);
    EXPECT_NEAR(t.value(z), log_prior_f + log_jac + lik, 1e-9);
    EXPECT_NEAR(lgcp_log_density(cfg, z), t.value(z), 0.0);
    Vec g(4);
    t.value_and_grad(z, g);
    const Vec fd = oracle::fd_grad([&](const Vec& zz) { return t.value(zz); }, z);
    EXPECT_LT(oracle::rel_err(g, fd), 1e-6);
  }
}

// Normalizer of the 2x2 posterior via Gauss-Hermite quadrature in the whitened
// coordinates against plain Monte Carlo from the prior.
TEST(Lgcp, TwoByTwoEvidenceQuadrature) {
  LgcpConfig cfg;
  cfg.lattice_side = 2;
  cfg.kernel_lengthscale = 0.5;
  cfg.mean_offset = 0.0;
  cfg.counts = {1, 0, 2, 1};
  const LgcpTarget t(cfg);
  // 1-D Gauss-Hermite (probabilists') nodes by Golub-Welsch
  const int n = 24;
  Mat J = Mat::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  const Vec nodes = es.eigenvalues();
  const Vec w = es.eigenvectors().row(0).transpose().array().square();
  double quad = 0.0;
  Vec z(4);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c)
        for (int d = 0; d < n; ++d) {
          z << nodes[a], nodes[b], nodes[c], nodes[d];
          // gamma(z) / N(z; 0, I) is the likelihood
          quad += w[a] * w[b] * w[c] * w[d] * std::exp(t.value(z) + 2.0 * oracle::kLog2Pi + 0.5 * z.squaredNorm());
        }
  Rng rng = RngKey(5).stream();
  const int m = 400000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < 4; ++j) z[j] = rng.normal();
    const double v = std::exp(t.value(z) + 2.0 * oracle::kLog2Pi + 0.5 * z.squaredNorm());
    s += v;
    s2 += v * v;
  }
  const double mean = s / m, se = std::sqrt((s2 / m - mean * mean) / m);
  EXPECT_LT(std::abs(mean - quad), 4.0 * se);
}

TEST(Lattice, TranslationIdentities) {
  const Vec phi = randn(25, 12);
  EXPECT_EQ(translate_lattice(phi, 0, 0), phi);
  EXPECT_EQ(translate_lattice(phi, 5, -5), phi);
  EXPECT_EQ(translate_lattice(translate_lattice(phi, 2, 3), -2, -3), phi);
}
