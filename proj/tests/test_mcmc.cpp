#include "craft/mcmc.hpp"
#include "craft/smc.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace craft;

namespace {

auto std_normal_grad = [](CRef x, VRef g) { g = -x; };

auto std_normal_vg = [](CRef x, VRef g) {
  g = -x;
  return -0.5 * x.squaredNorm();
};

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double ks_to_normal(std::vector<double> v, double mean, double sd) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double F = normal_cdf((v[i] - mean) / sd);
    d = std::max({d, std::abs(F - i / n), std::abs(F - (i + 1) / n)});
  }
  return d;
}

}  // namespace

TEST(StepSize, Interpolation) {
  const HmcConfig cfg;
  EXPECT_DOUBLE_EQ(interp_step_size(cfg, 0.0), 0.3);
  EXPECT_DOUBLE_EQ(interp_step_size(cfg, 1.0), 0.2);
  EXPECT_NEAR(interp_step_size(cfg, 0.375), 0.25, 1e-15);
  EXPECT_DOUBLE_EQ(interp_step_size(cfg, 0.1), 0.3);
}

TEST(HmcConfig, Validation) {
  HmcConfig c;
  EXPECT_NO_THROW(c.validate());
  c.step_points = {0.0, 0.5, 0.4, 1.0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = HmcConfig{};
  c.step_points = {0.1, 1.0};
  c.step_values = {0.1, 0.1};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Leapfrog, FreeParticle) {
  Vec x(2), p(2);
  x << 1.0, -2.0;
  p << 0.5, 0.25;
  const Vec x0 = x, p0 = p;
  leapfrog(x, p, [](CRef, VRef g) { g.setZero(); }, 0.1, 7);
  EXPECT_LT((x - (x0 + 7 * 0.1 * p0)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(p, p0);
}

TEST(Leapfrog, HandComputedStep) {
  Vec x = Vec::Constant(1, 1.0), p = Vec::Zero(1);
  leapfrog(x, p, std_normal_grad, 0.1, 1);
  EXPECT_NEAR(x[0], 0.995, 1e-15);
  EXPECT_NEAR(p[0], -0.09975, 1e-15);
}

TEST(Leapfrog, Reversible) {
  Mat A = Mat::Random(10, 10);
  const Mat prec = A * A.transpose() / 10.0 + Mat::Identity(10, 10);
  auto grad = [&](CRef x, VRef g) { g = -(prec * x); };
  Rng rng = RngKey(3).stream();
  Vec x(10), p(10);
  for (int i = 0; i < 10; ++i) {
    x[i] = rng.normal();
    p[i] = rng.normal();
  }
  const Vec x0 = x, p0 = p;
  leapfrog(x, p, grad, 0.1, 25);
  p = -p;
  leapfrog(x, p, grad, 0.1, 25);
  EXPECT_LT((x - x0).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((p + p0).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Leapfrog, VolumePreserving) {
  // nonlinear force: gradient of -(x^4)/4 - x^2/2 per coordinate
  auto grad = [](CRef x, VRef g) { g = (-x.array().cube() - x.array()).matrix(); };
  const int d = 3;
  Vec z(2 * d);
  z << 0.3, -0.8, 1.1, 0.5, 0.2, -0.4;
  auto map = [&](const Vec& s) {
    Vec x = s.head(d), p = s.tail(d);
    leapfrog(x, p, grad, 0.15, 4);
    Vec out(2 * d);
    out << x, p;
    return out;
  };
  Mat J(2 * d, 2 * d);
  const double h = 1e-6;
  for (int j = 0; j < 2 * d; ++j) {
    Vec zp = z, zm = z;
    zp[j] += h;
    zm[j] -= h;
    J.col(j) = (map(zp) - map(zm)) / (2 * h);
  }
  EXPECT_NEAR(J.determinant(), 1.0, 1e-7);
}

TEST(Hmc, ZeroStepAlwaysAccepted) {
  Rng rng = RngKey(4).stream();
  Vec x = Vec::Constant(3, 2.0);
  for (int i = 0; i < 100; ++i) {
    const auto o = hmc_step(x, std_normal_vg, 0.0, 10, rng);
    EXPECT_TRUE(o.accepted);
  }
  EXPECT_EQ(x, Vec::Constant(3, 2.0));
}

TEST(Hmc, NonFiniteProposalRejected) {
  auto vg = [](CRef x, VRef g) {
    g = -x;
    return x[0] > 0.5 ? kNegInf : -0.5 * x.squaredNorm();
  };
  Rng rng = RngKey(5).stream();
  Vec x = Vec::Zero(1);
  int nonfinite = 0;
  for (int i = 0; i < 200; ++i) nonfinite += hmc_step(x, vg, 0.5, 5, rng).nonfinite ? 1 : 0;
  EXPECT_GT(nonfinite, 0);
  EXPECT_LE(x[0], 0.5);
}

TEST(Hmc, StandardNormalVariance) {
  Rng rng = RngKey(6).stream();
  Vec x = Vec::Zero(1);
  const int n = 100000, batches = 50;
  std::vector<double> bm(batches, 0.0);
  for (int i = 0; i < n; ++i) {
    hmc_step(x, std_normal_vg, 0.3, 5, rng);
    bm[static_cast<std::size_t>(i / (n / batches))] += x[0] * x[0] / (n / batches);
  }
  double m = 0, v = 0;
  for (double b : bm) m += b / batches;
  for (double b : bm) v += (b - m) * (b - m) / (batches - 1);
  EXPECT_LT(std::abs(m - 1.0), 3.0 * std::sqrt(v / batches));
}

// Net probability flux between bins of a reversible chain vanishes.
TEST(Hmc, DetailedBalanceFlux) {
  auto vg = [](CRef x, VRef g) {
    g = (-x.array().cube() + x.array()).matrix();  // double well
    return -0.25 * std::pow(x[0], 4) + 0.5 * x[0] * x[0];
  };
  auto bin = [](double v) { return v < -0.5 ? 0 : (v < 0.5 ? 1 : 2); };
  Rng rng = RngKey(7).stream();
  Vec x = Vec::Zero(1);
  long counts[3][3] = {};
  int prev = bin(x[0]);
  for (int i = 0; i < 200000; ++i) {
    hmc_step(x, vg, 0.4, 3, rng);
    const int b = bin(x[0]);
    ++counts[prev][b];
    prev = b;
  }
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      const double tot = static_cast<double>(counts[a][b] + counts[b][a]);
      EXPECT_LT(std::abs(static_cast<double>(counts[a][b] - counts[b][a])), 4.0 * std::sqrt(tot) + 2.0);
    }
}

TEST(KernelSweep, ZeroStepsUnchanged) {
  const AnnealedPath path(DiagGaussian::standard(2), LogDensity(DiagGaussian::standard(2)), 2);
  auto e = sample_initial(path, 20, RngKey(8));
  const auto before = e;
  HmcConfig cfg;
  cfg.steps_per_temperature = 0;
  kernel_sweep(e, 1, path, cfg, RngKey(9));
  EXPECT_EQ(e.positions, before.positions);
  EXPECT_EQ(e.log_weights, before.log_weights);
}

TEST(KernelSweep, PreservesExactGaussianEnsemble) {
  DiagGaussian target{Vec::Constant(1, 0.5), Vec::Constant(1, 0.7), 0.0};
  const AnnealedPath path(target, LogDensity(target), 1);  // pi_0 = pi_1 = target
  const int n = 4000;
  auto e = sample_initial(path, n, RngKey(10));
  std::vector<double> v0(n);
  for (int i = 0; i < n; ++i) v0[static_cast<std::size_t>(i)] = e.positions(i, 0);
  const double ks0 = ks_to_normal(v0, 0.5, 0.7);
  const auto cfg = HmcConfig::constant(1.0, 3, 1);
  double acc = 0.0;
  for (int s = 0; s < 100; ++s) acc += kernel_sweep(e, 1, path, cfg, RngKey(11).child(s)).acceptance_rate / 100;
  std::vector<double> v(n);
  double m = 0, m2 = 0;
  for (int i = 0; i < n; ++i) {
    v[static_cast<std::size_t>(i)] = e.positions(i, 0);
    m += e.positions(i, 0) / n;
    m2 += e.positions(i, 0) * e.positions(i, 0) / n;
  }
  EXPECT_NEAR(m, 0.5, 4 * 0.7 / std::sqrt(n));
  EXPECT_NEAR(m2 - m * m, 0.49, 4 * 0.49 * std::sqrt(2.0 / n));
  // KS critical value at the 0.1% level is about 1.95 / sqrt(n)
  EXPECT_LT(ks_to_normal(v, 0.5, 0.7), std::max(ks0, 1.95 / std::sqrt(n)));
  EXPECT_GE(acc, 0.6);
  EXPECT_LE(acc, 0.95);
}

TEST(LeapfrogAdjoint, MatchesFiniteDifferences) {
  auto grad = [](CRef x, VRef g) { g = (-x.array().cube() - x.array()).matrix(); };
  auto hvp = [](CRef x, CRef v, VRef out) { out = (-(3.0 * x.array().square() + 1.0) * v.array()).matrix(); };
  Vec x0(3), p0(3), w(3);
  x0 << 0.4, -0.9, 0.2;
  p0 << 0.1, 0.6, -1.2;
  w << 1.0, -0.5, 2.0;
  auto final_dot = [&](const Vec& x) {
    Vec xx = x, p = p0;
    leapfrog(xx, p, grad, 0.2, 6);
    return w.dot(xx);
  };
  const Vec adj = leapfrog_adjoint(x0, p0, grad, hvp, 0.2, 6, w);
  EXPECT_LT(oracle::rel_err(adj, oracle::fd_grad(final_dot, x0)), 1e-7);
}
