#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "bsatnp/tasks.hpp"

using namespace bsatnp;

namespace {

double geodesic_deg(double lon1, double lat1, double lon2, double lat2) {
  const double d = std::numbers::pi / 180;
  const double c = std::sin(lat1 * d) * std::sin(lat2 * d) + std::cos(lat1 * d) * std::cos(lat2 * d) * std::cos((lon1 - lon2) * d);
  return std::acos(std::clamp(c, -1.0, 1.0)) / d;
}

bool inside(const Tensor<double>& s, double lo, double hi) {
  for (double v : s.values()) {
    if (v < lo || v > hi) return false;
  }
  return true;
}

}  // namespace

// ---- priors ----

TEST(Priors, BetaMeanIsPointThree) {
  Rng rng(1);
  const int n = 20000;
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    const double b = sample_beta(3, 7, rng);
    ASSERT_GT(b, 0.0);
    ASSERT_LT(b, 1.0);
    sum += b;
  }
  const double se = std::sqrt(21.0 / (100.0 * 11.0) / n);
  EXPECT_NEAR(sum / n, 0.3, 4 * se);
}

TEST(Priors, InverseGammaMeans) {
  Rng rng(2);
  const int n = 100000;
  double a = 0, b = 0;
  for (int i = 0; i < n; ++i) {
    a += sample_inv_gamma(3, 30, rng);
    b += sample_inv_gamma(5, 0.4, rng);
  }
  EXPECT_NEAR(a / n, 15.0, 0.5);
  EXPECT_NEAR(b / n, 0.1, 0.002);
}

TEST(Priors, SirRatesMatchStatedMeans) {
  Rng rng(3);
  const SirConfig cfg;
  const int n = 50000;
  double beta = 0, gamma = 0;
  std::set<int> omegas;
  for (int i = 0; i < n; ++i) {
    const auto p = sample_sir_params(cfg, rng);
    beta += p.beta;
    gamma += p.gamma;
    ASSERT_LE(p.gamma, 1.0);
    omegas.insert(p.omega);
  }
  EXPECT_NEAR(beta / n, 0.2, 0.003);
  EXPECT_NEAR(gamma / n, 0.1, 0.002);
  EXPECT_EQ(omegas, (std::set<int>{1, 2, 3, 4}));
}

TEST(Priors, RandintIsHalfOpen) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const int v = sample_randint(1, 5, rng);
    ASSERT_GE(v, 1);
    ASSERT_LT(v, 5);
  }
  EXPECT_EQ(sample_randint(3, 4, rng), 3);
}

// ---- GP ----

TEST(GpKernel, SymmetricWithUnitDiagonal) {
  Rng rng(5);
  GpTaskConfig cfg = GpTaskConfig::desk();
  cfg.n_test = 20;
  const auto s = gp_sample_task(cfg, 0.4, 30, rng).task.ctx.s;
  const auto kcc = gp_kernel(GpKernel::squared_exponential, s, s, 0.4);
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_DOUBLE_EQ(kcc(i, i), 1.0);
    for (std::size_t j = 0; j < 30; ++j) EXPECT_DOUBLE_EQ(kcc(i, j), kcc(j, i));
  }
  EXPECT_NO_THROW(jittered_cholesky(kcc, 1e-6, 1e-3));
}

TEST(GpKernel, ClosedFormValues) {
  Tensor<double> a({1, 2}), b({1, 2});
  b(0, 0) = 0.3;
  b(0, 1) = 0.4;
  EXPECT_NEAR(gp_kernel(GpKernel::squared_exponential, a, b, 0.5)(0, 0), std::exp(-0.5 * 0.25 / 0.25), 1e-15);
  Tensor<double> p({1, 2}), q({1, 2});
  q(0, 1) = 10.0;  // ten degrees of latitude
  EXPECT_NEAR(gp_kernel(GpKernel::exponential_geodesic, p, q, 15.0)(0, 0), std::exp(-10.0 / 15.0), 1e-12);
}

TEST(GpKernel, CholeskyFailureRaisesGenerationError) {
  Tensor<double> k({2, 2});
  k(0, 0) = k(1, 1) = 1.0;
  k(0, 1) = k(1, 0) = 2.0;
  EXPECT_THROW(jittered_cholesky(k, 1e-6, 1e-3), GenerationError);
}

TEST(GpSample, CoincidentLocationsShareValues) {
  Rng rng(6);
  GpTaskConfig cfg;
  Tensor<double> s({2, 2});
  s(0, 0) = s(1, 0) = 0.7;
  s(0, 1) = s(1, 1) = -0.2;
  for (int i = 0; i < 50; ++i) {
    const auto f = gp_draw(GpKernel::squared_exponential, s, 0.3, cfg, rng);
    // only the 1e-6 jitter separates them
    EXPECT_NEAR(f[0], f[1], 1e-2);
  }
}

TEST(GpSample, EmpiricalCovarianceMatchesKernel) {
  Rng rng(7);
  GpTaskConfig cfg;
  Tensor<double> s({2, 2});
  s(1, 0) = 0.3;
  s(1, 1) = 0.2;
  const double ls = 0.4;
  const double k = std::exp(-0.5 * 0.13 / (ls * ls));
  const int n = 5000;
  double c01 = 0, c00 = 0;
  for (int i = 0; i < n; ++i) {
    const auto f = gp_draw(GpKernel::squared_exponential, s, ls, cfg, rng);
    c01 += f[0] * f[1];
    c00 += f[0] * f[0];
  }
  EXPECT_NEAR(c01 / n, k, 3 * std::sqrt((1 + k * k) / n));
  EXPECT_NEAR(c00 / n, 1.0, 3 * std::sqrt(2.0 / n));
}

TEST(GpSample, LayoutAndContract) {
  Rng rng(8);
  const GpTaskConfig cfg;
  for (int i = 0; i < 3; ++i) {
    const auto g = gp_sample_task(cfg, rng);
    EXPECT_GT(g.lengthscale, 0.0);
    EXPECT_LT(g.lengthscale, 1.0);
    EXPECT_GE(g.task.ctx.size(), 128u);
    EXPECT_LE(g.task.ctx.size(), 512u);
    EXPECT_EQ(g.task.test.size(), 1024u);
    EXPECT_TRUE(inside(g.task.ctx.s, -2, 2));
    EXPECT_TRUE(inside(g.task.test.s, -2, 2));
    EXPECT_NO_THROW(g.task.validate());
  }
}

TEST(GpSample, NoiseOnlyOnContext) {
  Rng rng(9);
  GpTaskConfig cfg = GpTaskConfig::desk();
  cfg.n_test = 8;
  double sq = 0;
  std::size_t n = 0;
  for (int i = 0; i < 200; ++i) {
    const auto g = gp_sample_task(cfg, 0.3, 128, rng);
    for (std::size_t j = 0; j < 128; ++j) {
      const double e = g.task.ctx.f[j] - g.ctx_latent[j];
      sq += e * e;
      ++n;
    }
  }
  EXPECT_NEAR(sq / static_cast<double>(n), 0.01, 0.001);
}

TEST(GpSample, StreamIsReproducible) {
  TaskStream a;
  a.gp = GpTaskConfig::desk();
  a.seed = 42;
  TaskStream b = a;
  EXPECT_EQ(a.batch(3), b.batch(3));
  EXPECT_NE(a.batch(3), a.batch(4));
  b.seed = 43;
  EXPECT_NE(a.batch(3), b.batch(3));
}

TEST(GpSample, BatchSharesContextCount) {
  TaskStream s;
  s.gp = GpTaskConfig::desk();
  const auto b = s.batch(0);
  ASSERT_EQ(b.size(), 8u);
  for (const auto& t : b.tasks) EXPECT_EQ(t.ctx.size(), b.tasks[0].ctx.size());
  EXPECT_NO_THROW(b.validate());
}

// ---- multiresolution ----

TEST(Multires, InnerHalfLiesInInnerBox) {
  Rng rng(10);
  GpTaskConfig cfg = GpTaskConfig::desk();
  const auto g = make_multires_task(cfg, rng);
  const std::size_t n = g.task.ctx.size(), half = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double lim = i < half ? 0.5 : 1.5;
    EXPECT_LE(std::abs(g.task.ctx.s(i, 0)), lim);
    EXPECT_LE(std::abs(g.task.ctx.s(i, 1)), lim);
  }
  EXPECT_TRUE(inside(g.task.test.s, -0.5, 0.5));
}

TEST(Multires, ReductionIsSeventyEightPercent) {
  EXPECT_NEAR(multires_reduction(GpTaskConfig{}), 0.78, 0.005);
  EXPECT_DOUBLE_EQ(multires_reduction(GpTaskConfig{}), 7.0 / 9.0);
}

TEST(Multires, EqualBoxesDegenerateToPlainLayout) {
  TaskStream plain;
  plain.gp = GpTaskConfig::desk();
  plain.gp.inner_lo = plain.gp.outer_lo = plain.gp.lo;
  plain.gp.inner_hi = plain.gp.outer_hi = plain.gp.hi;
  plain.seed = 5;
  TaskStream multi = plain;
  multi.family = TaskFamily::multires;
  EXPECT_EQ(plain.batch(0), multi.batch(0));
}

// ---- SIR ----

TEST(Sir, FullRecoveryWhenGammaIsOne) {
  Rng rng(11);
  SirConfig cfg = SirConfig::desk();
  cfg.steps = 3;
  const auto r = sir_simulate(cfg, SirParams{0.0, 1.0, 4}, rng);
  EXPECT_EQ(r.count(0, SirState::I), 4u);
  EXPECT_EQ(r.count(1, SirState::I), 0u);
  EXPECT_EQ(r.count(1, SirState::R), 4u);
  for (std::size_t c = 0; c < cfg.grid * cfg.grid; ++c) {
    if (r.states[c] == SirState::I) {
      EXPECT_EQ(r.states[cfg.grid * cfg.grid + c], SirState::R);
    }
  }
}

TEST(Sir, NoInfectionIsAFixedPoint) {
  Rng rng(12);
  SirConfig cfg;
  cfg.steps = 5;
  std::vector<SirState> init(cfg.grid * cfg.grid, SirState::S);
  init[7] = SirState::R;
  const auto r = sir_simulate(cfg, SirParams{0.9, 0.5, 0}, init, rng);
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    for (std::size_t c = 0; c < init.size(); ++c) ASSERT_EQ(r.states[step * init.size() + c], init[c]);
  }
}

TEST(Sir, TransitionsOnlyMoveForward) {
  Rng rng(13);
  const SirConfig cfg;
  const auto r = sir_simulate(cfg, SirParams{0.5, 0.1, 4}, rng);
  const std::size_t cells = cfg.grid * cfg.grid;
  ASSERT_EQ(r.states.size(), (cfg.steps + 1) * cells);
  std::size_t prev_r = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t c = 0; c < cells; ++c) {
      ASSERT_GE(static_cast<int>(r.states[step * cells + c]), static_cast<int>(r.states[(step - 1) * cells + c]));
    }
    const std::size_t rec = r.count(step, SirState::R);
    EXPECT_GE(rec, prev_r);
    prev_r = rec;
  }
  EXPECT_GT(r.count(cfg.steps, SirState::R), 0u);
}

TEST(Sir, InfectionNeedsNeighbourWithinCutoff) {
  Rng rng(14);
  SirConfig cfg;
  cfg.steps = 1;
  std::vector<SirState> init(cfg.grid * cfg.grid, SirState::S);
  init[32 * cfg.grid + 32] = SirState::I;
  // beta = 1 infects every cell at distance <= 1 with certainty
  const auto r = sir_simulate(cfg, SirParams{1.0, 0.0, 0}, init, rng);
  EXPECT_EQ(r.at(1, 31, 32), SirState::I);
  EXPECT_EQ(r.at(1, 32, 33), SirState::I);
  EXPECT_EQ(r.at(1, 32, 36), SirState::S);
  EXPECT_EQ(r.at(1, 28, 28), SirState::S);
}

TEST(Sir, ContextIsContainedInTest) {
  Rng rng(15);
  const SirConfig cfg;
  const auto r = sir_simulate(cfg, rng);
  const auto t = sir_task_from_rollout(r, cfg, rng);
  EXPECT_GE(t.ctx.size(), 128u);
  EXPECT_LE(t.ctx.size(), 512u);
  EXPECT_EQ(t.test.size(), 1024u);
  EXPECT_EQ(t.df(), 3u);
  for (auto o : t.ctx.obs) EXPECT_EQ(o, 1);
  for (auto o : t.test.obs) EXPECT_EQ(o, 0);
  for (std::size_t i = 0; i < t.ctx.size(); ++i) {
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(t.ctx.s(i, c), t.test.s(i, c));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(t.ctx.f(i, c), t.test.f(i, c));
  }
  for (std::size_t i = 0; i < t.test.size(); ++i) {
    EXPECT_DOUBLE_EQ(t.test.f(i, 0) + t.test.f(i, 1) + t.test.f(i, 2), 1.0);
  }
  EXPECT_NO_THROW(t.validate());
}

TEST(Sir, ConfigValidation) {
  SirConfig cfg;
  cfg.n_test = 100;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SirConfig{};
  cfg.omega_hi = cfg.omega_lo;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// ---- spherical ----

TEST(Spherical, LayoutOnTheSphere) {
  Rng rng(16);
  const auto g = spherical_gp_task(GpTaskConfig::spherical(), rng);
  EXPECT_EQ(g.task.domain, SpatialDomain::lonlat);
  EXPECT_TRUE(inside(g.task.ctx.s, -10, 10));
  EXPECT_TRUE(inside(g.task.test.s, -10, 10));
  EXPECT_GT(g.lengthscale, 0.0);
}

TEST(Spherical, IdentityRotationLeavesTaskUnchanged) {
  Rng rng(17);
  GpTaskConfig cfg = GpTaskConfig::spherical();
  cfg.n_test = 64;
  const auto t = spherical_gp_task(cfg, rng).task;
  const auto rots = spherical_rotations();
  ASSERT_EQ(rots.size(), 3u);
  const auto same = apply_group_action(t, GroupAction::rotate(rots[0]));
  for (std::size_t i = 0; i < t.test.s.size(); ++i) EXPECT_NEAR(same.test.s[i], t.test.s[i], 1e-9);
  EXPECT_EQ(same.test.f, t.test.f);
}

TEST(Spherical, RotationsPreserveGeodesics) {
  Rng rng(18);
  GpTaskConfig cfg = GpTaskConfig::spherical();
  cfg.n_ctx_min = cfg.n_ctx_max = 40;
  cfg.n_test = 40;
  const auto t = spherical_gp_task(cfg, rng).task;
  for (const auto& r : spherical_rotations()) {
    const auto rt = apply_group_action(t, GroupAction::rotate(r));
    for (std::size_t i = 0; i < 40; ++i) {
      for (std::size_t j = 0; j < 40; ++j) {
        EXPECT_NEAR(geodesic_deg(t.ctx.s(i, 0), t.ctx.s(i, 1), t.test.s(j, 0), t.test.s(j, 1)),
                    geodesic_deg(rt.ctx.s(i, 0), rt.ctx.s(i, 1), rt.test.s(j, 0), rt.test.s(j, 1)), 1e-6);
      }
    }
  }
}

TEST(TaskFamily, ParsesNames) {
  for (auto f : {TaskFamily::gp, TaskFamily::multires, TaskFamily::sir, TaskFamily::spherical}) {
    EXPECT_EQ(parse_task_family(to_string(f)), f);
  }
  EXPECT_THROW(parse_task_family("era5"), ConfigError);
}
