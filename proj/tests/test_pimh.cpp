#include "craft/pimh.hpp"
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

SmcNfOutputs point_mass(double value, double log_z) {
  SmcNfOutputs o;
  o.ensemble = ParticleEnsemble::uniform(RowMat::Constant(4, 1, value));
  o.log_z = log_z;
  return o;
}

}  // namespace

TEST(Observables, ZeroField) {
  EXPECT_EQ(two_point_susceptibility(Vec::Zero(16)), 0.0);
  EXPECT_EQ(ising_energy_density(Vec::Zero(16)), 0.0);
  EXPECT_EQ(mean_field(Vec::Zero(16)), 0.0);
}

TEST(Observables, ConstantFieldTwoByTwo) {
  const double c = 0.7;
  EXPECT_NEAR(two_point_susceptibility(Vec::Constant(4, c)), 4 * c * c, 1e-15);
  EXPECT_NEAR(ising_energy_density(Vec::Constant(4, c)), c * c, 1e-15);
  EXPECT_NEAR(mean_field(Vec::Constant(4, c)), c, 1e-15);
}

TEST(Observables, MatchNaiveLoops) {
  const int L = 5;
  const Vec phi = randn(L * L, 3);
  double sum = 0.0, e = 0.0;
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < L; ++c) {
      const double v = phi[r * L + c];
      sum += v;
      e += v * phi[((r + 1) % L) * L + c] + v * phi[r * L + (c + 1) % L];
    }
  EXPECT_NEAR(two_point_susceptibility(phi), sum * sum / (L * L), 1e-13);
  EXPECT_NEAR(ising_energy_density(phi), e / (2.0 * L * L), 1e-14);
  EXPECT_NEAR(mean_field(phi), sum / (L * L), 1e-15);
}

TEST(Observables, TranslationInvariant) {
  const Vec phi = randn(36, 4);
  for (int dr = 0; dr < 6; ++dr)
    for (int dc = 0; dc < 6; ++dc) {
      const Vec s = translate_lattice(phi, dr, dc);
      EXPECT_NEAR(ising_energy_density(s), ising_energy_density(phi), 1e-14);
      EXPECT_NEAR(two_point_susceptibility(s), two_point_susceptibility(phi), 1e-13);
    }
}

TEST(BatchMeans, KnownSequence) {
  std::vector<double> t;
  for (int b = 0; b < 20; ++b)
    for (int i = 0; i < 5; ++i) t.push_back(b % 2 ? 1.0 : -1.0);
  const auto r = batch_means(t, 20);
  EXPECT_NEAR(r.mean, 0.0, 1e-15);
  // batch means alternate -1, 1: sample variance 20/19, se = sqrt(20/19/20)
  EXPECT_NEAR(r.std_error, std::sqrt(1.0 / 19.0), 1e-14);
}

TEST(Pimh, AcceptProbability) {
  EXPECT_EQ(pimh_accept_prob(1.3, 1.3), 1.0);
  EXPECT_EQ(pimh_accept_prob(1.3, kNegInf), 0.0);
  EXPECT_NEAR(pimh_accept_prob(0.0, std::log(0.25)), 0.25, 1e-15);
  EXPECT_EQ(pimh_accept_prob(0.0, 2.0), 1.0);
  // monotone in the proposed value
  double prev = 0.0;
  for (double lz = -5; lz < 1; lz += 0.25) {
    const double a = pimh_accept_prob(0.0, lz);
    EXPECT_GE(a, prev);
    prev = a;
  }
}

TEST(Pimh, NegInfProposalAlwaysRejected) {
  PimhState s;
  s.ensemble = point_mass(1.0, 0.0).ensemble;
  s.log_z = 0.0;
  for (int j = 0; j < 100; ++j) EXPECT_FALSE(pimh_step(s, [](const RngKey&) { return point_mass(5.0, kNegInf); }, RngKey(j)));
  EXPECT_EQ(s.accepts, 0);
  EXPECT_EQ(s.j, 100);
}

// Proposal Z takes value a with probability p and b otherwise. The chain's
// stationary law is proportional to q(z) z, so the long-run acceptance rate is
// sum_z pi(z) sum_z* q(z*) min(1, z*/z).
TEST(Pimh, TwoValueToyAcceptanceRate) {
  const double a = 1.0, b = 4.0, p = 0.7;
  const double pa = p * a / (p * a + (1 - p) * b), pb = 1 - pa;
  const double analytic = pa * (p + (1 - p)) + pb * (p * (a / b) + (1 - p));
  const ProposalRunner runner = [&](const RngKey& key) {
    Rng rng = key.stream();
    return rng.uniform() < p ? point_mass(0.0, std::log(a)) : point_mass(1.0, std::log(b));
  };
  std::vector<double> acc;
  pimh_chain(10000, runner, {}, RngKey(5), [&](const PimhRecord& r) { acc.push_back(r.accepted ? 1.0 : 0.0); });
  const auto est = batch_means(acc, 20);
  EXPECT_LT(std::abs(est.mean - analytic), 3 * est.std_error);
}

TEST(Pimh, ConstantObservableExact) {
  const ProposalRunner runner = [](const RngKey& key) {
    Rng rng = key.stream();
    return point_mass(rng.normal(), rng.normal());
  };
  const auto r = pimh_chain(500, runner, {{"c", [](CRef) { return 2.5; }}}, RngKey(6));
  EXPECT_EQ(r.estimates[0].mean, 2.5);
}

TEST(Pimh, TrivialProposalIsIidAveraging) {
  std::vector<double> seen;
  const ProposalRunner runner = [&](const RngKey& key) {
    Rng rng = key.stream();
    auto o = point_mass(rng.normal(), 0.0);
    seen.push_back(o.ensemble.positions(0, 0));
    return o;
  };
  const auto r = pimh_chain(300, runner, {{"x", [](CRef x) { return x[0]; }}}, RngKey(7));
  EXPECT_EQ(r.accepts, 300);
  double s = 0.0;
  for (std::size_t i = 1; i < seen.size(); ++i) s += seen[i];
  EXPECT_NEAR(r.estimates[0].mean, s / 300, 1e-14);
}

TEST(Pimh, RetriesOnceThenAborts) {
  int calls = 0;
  const ProposalRunner flaky = [&](const RngKey&) {
    if (++calls % 2 == 1) throw DegenerateEnsembleError("boom");
    return point_mass(0.0, 0.0);
  };
  const auto r = pimh_chain(10, flaky, {}, RngKey(8));
  EXPECT_EQ(r.failures, 11);
  const ProposalRunner broken = [](const RngKey&) -> SmcNfOutputs { throw DegenerateEnsembleError("always"); };
  EXPECT_THROW(pimh_chain(10, broken, {}, RngKey(9)), DegenerateEnsembleError);
}

TEST(Pimh, GaussianSecondMoment) {
  const AnnealedPath path(DiagGaussian{Vec::Zero(1), Vec::Constant(1, 2.0), 0.0},
                          LogDensity(DiagGaussian::standard(1)), 4);
  const ProposalRunner runner = [&](const RngKey& key) { return smc_deploy(path, 16, {}, HmcConfig::constant(0.5, 3, 1), key); };
  const auto r = pimh_chain(4000, runner, {{"x2", [](CRef x) { return x[0] * x[0]; }}}, RngKey(10));
  EXPECT_LT(std::abs(r.estimates[0].mean - 1.0), 3 * r.estimates[0].std_error);
  EXPECT_GT(r.acceptance_rate(), 0.1);
}

TEST(Pimh, CrossProposalConsistency) {
  // plain SMC and exact-transport proposals on N(0, I) -> N(mu, sigma^2)
  const double mu = 0.8, sigma = 0.6;
  const AnnealedPath path(DiagGaussian::standard(1), LogDensity(DiagGaussian{Vec::Constant(1, mu), Vec::Constant(1, sigma), 0.0}), 3);
  std::vector<Flow> exact;
  for (int k = 1; k <= 3; ++k) {
    const double b0 = (k - 1) / 3.0, b1 = k / 3.0;
    const double l0 = (1 - b0) + b0 / (sigma * sigma), l1 = (1 - b1) + b1 / (sigma * sigma);
    const double m0 = b0 * mu / (sigma * sigma) / l0, m1 = b1 * mu / (sigma * sigma) / l1;
    const double a = std::sqrt(l0 / l1);
    exact.push_back(Flow::diag_affine(Vec::Constant(1, std::log(a)), Vec::Constant(1, m1 - a * m0)));
  }
  const auto hcfg = HmcConfig::constant(0.4, 3, 1);
  const std::vector<Observable> obs{{"x", [](CRef x) { return x[0]; }}};
  const auto a = pimh_chain(1500, [&](const RngKey& k) { return smc_deploy(path, 16, {}, hcfg, k); }, obs, RngKey(11));
  const auto b = pimh_chain(1500, [&](const RngKey& k) { return craft_deploy(exact, path, 16, {}, hcfg, k); }, obs, RngKey(12));
  const double comb = std::hypot(a.estimates[0].std_error, b.estimates[0].std_error);
  EXPECT_LT(std::abs(a.estimates[0].mean - b.estimates[0].mean), 3 * comb);
  EXPECT_EQ(b.accepts, 1500);  // exact transport gives constant log_z
}

TEST(DirectHmc, StandardNormal) {
  const AnnealedPath path(DiagGaussian::standard(1), LogDensity(DiagGaussian::standard(1)), 1);
  const auto r = direct_hmc_chain(path, HmcConfig::constant(0.5, 4, 1), {{"x2", [](CRef x) { return x[0] * x[0]; }}}, RngKey(13), 20000, 0.0, 100);
  EXPECT_LT(std::abs(r.estimates[0].mean - 1.0), 3.5 * r.estimates[0].std_error);
  EXPECT_EQ(r.steps, 20000);
}
