#include "craft/particles.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace craft;

namespace {

Vec to_vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

Vec random_normals(int n, std::uint64_t seed, double scale = 1.0) {
  Rng rng = RngKey(seed).stream();
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

}  // namespace

TEST(NormalizeLogWeights, Uniform) {
  const auto r = normalize_log_weights(Vec::Zero(4));
  EXPECT_DOUBLE_EQ(r.log_total, std::log(4.0));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(r.normalized[i], -std::log(4.0));
}

TEST(NormalizeLogWeights, OneHot) {
  const auto r = normalize_log_weights(to_vec({0.0, kNegInf, kNegInf}));
  EXPECT_EQ(r.log_total, 0.0);
  EXPECT_EQ(r.normalized[0], 0.0);
  EXPECT_EQ(r.normalized[1], kNegInf);
  EXPECT_EQ(r.normalized[2], kNegInf);
}

TEST(NormalizeLogWeights, MatchesExtendedPrecision) {
  const Vec raw = random_normals(1000, 11, 30.0);
  const auto r = normalize_log_weights(raw);
  const long double ref = oracle::logsumexp_ld(std::vector<double>(raw.data(), raw.data() + raw.size()));
  EXPECT_NEAR(r.log_total, static_cast<double>(ref), 1e-12);
  for (int i = 0; i < 1000; ++i) EXPECT_NEAR(r.normalized[i], static_cast<double>(raw[i] - ref), 1e-12);
  EXPECT_NEAR(logsumexp(r.normalized), 0.0, 1e-10);
}

TEST(NormalizeLogWeights, AllNegInfThrows) {
  EXPECT_THROW(normalize_log_weights(Vec::Constant(3, kNegInf)), DegenerateEnsembleError);
}

TEST(Logsumexp, ShiftInvariant) {
  const Vec x = random_normals(200, 3, 5.0);
  for (double c : {-700.0, -3.0, 0.5, 400.0})
    EXPECT_NEAR(logsumexp(Vec((x.array() + c).matrix())), logsumexp(x) + c, 1e-12 * std::max(1.0, std::abs(c)));
}

TEST(Ess, Cases) {
  EXPECT_NEAR(effective_sample_size(Vec::Constant(100, -std::log(100.0))), 100.0, 1e-9);
  EXPECT_DOUBLE_EQ(effective_sample_size(to_vec({0.0, kNegInf, kNegInf})), 1.0);
  EXPECT_NEAR(effective_sample_size(to_vec({std::log(0.5), std::log(0.25), std::log(0.25)})), 8.0 / 3.0, 1e-12);
}

TEST(Resample, OneHotCopiesParticle) {
  RowMat x(5, 2);
  for (int i = 0; i < 5; ++i) x.row(i) << i, -i;
  ParticleEnsemble e = ParticleEnsemble::uniform(x);
  e.log_weights = Vec::Constant(5, kNegInf);
  e.log_weights[3] = 0.0;
  e.log_z = 1.25;
  Rng rng = RngKey(1).stream();
  const auto r = multinomial_resample(e, rng);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(r.positions.row(i), x.row(3));
  EXPECT_EQ(r.log_z, 1.25);
  EXPECT_NEAR(effective_sample_size(r.log_weights), 5.0, 1e-12);
}

TEST(Resample, SingleParticleUnchanged) {
  RowMat x(1, 3);
  x << 1, 2, 3;
  const auto e = ParticleEnsemble::uniform(x);
  Rng rng = RngKey(2).stream();
  const auto r = multinomial_resample(e, rng);
  EXPECT_EQ(r.positions, x);
  EXPECT_EQ(r.log_weights[0], 0.0);
}

TEST(Resample, UnbiasedForBoundedFunction) {
  const int n = 6;
  RowMat x(n, 1);
  for (int i = 0; i < n; ++i) x(i, 0) = i;
  ParticleEnsemble e = ParticleEnsemble::uniform(x);
  e.log_weights = normalize_log_weights(random_normals(n, 5)).normalized;
  auto f = [](double v) { return std::sin(v) + 0.1 * v; };
  double truth = 0.0;
  for (int i = 0; i < n; ++i) truth += std::exp(e.log_weights[i]) * f(x(i, 0));

  const int reps = 100000;
  Rng rng = RngKey(6).stream();
  double s = 0.0, s2 = 0.0;
  for (int r = 0; r < reps; ++r) {
    const auto idx = multinomial_indices(e.log_weights, rng);
    double m = 0.0;
    for (int i : idx) m += f(x(i, 0));
    m /= n;
    s += m;
    s2 += m * m;
  }
  const double mean = s / reps;
  const double se = std::sqrt((s2 / reps - mean * mean) / reps);
  EXPECT_LT(std::abs(mean - truth), 4.0 * se);
}

TEST(LogZIncrement, ConstantIncrement) {
  const Vec prev = normalize_log_weights(random_normals(10, 7)).normalized;
  const auto r = log_z_increment(prev, Vec::Constant(10, -2.5));
  EXPECT_NEAR(r.delta, -2.5, 1e-14);
}

TEST(LogZIncrement, SingleParticle) {
  const auto r = log_z_increment(Vec::Zero(1), to_vec({3.75}));
  EXPECT_EQ(r.delta, 3.75);
}

TEST(LogZIncrement, MatchesExtendedPrecision) {
  const Vec prev = normalize_log_weights(random_normals(500, 8, 4.0)).normalized;
  const Vec lg = random_normals(500, 9, 10.0);
  const auto r = log_z_increment(prev, lg);
  std::vector<double> sum(500);
  for (int i = 0; i < 500; ++i) sum[static_cast<std::size_t>(i)] = prev[i] + lg[i];
  EXPECT_NEAR(r.delta, static_cast<double>(oracle::logsumexp_ld(sum)), 1e-12);
}

TEST(LogZIncrement, DegenerateThrows) {
  EXPECT_THROW(log_z_increment(Vec::Zero(2), Vec::Constant(2, kNegInf)), DegenerateEnsembleError);
}

TEST(ResampleConfig, ThresholdRange) {
  ResampleConfig c;
  EXPECT_NO_THROW(c.validate(10));
  c.threshold_fraction = 1.5;
  EXPECT_THROW(c.validate(10), std::invalid_argument);
  c.threshold_fraction = 0.05;
  EXPECT_THROW(c.validate(10), std::invalid_argument);
  c.threshold_fraction = 0.1;
  EXPECT_NO_THROW(c.validate(10));
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  const RngKey k(42);
  Rng a = k.stream(3), b = k.stream(3), c = k.stream(4);
  const auto va = a(), vb = b(), vc = c();
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
  EXPECT_NE(k.child(1).value(), k.child(2).value());
}

TEST(Rng, NormalMoments) {
  Rng rng = RngKey(99).stream();
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 4.0 * std::sqrt(2.0 / n));
}
