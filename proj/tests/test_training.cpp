#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>

#include "bsatnp/checkpoint.hpp"
#include "bsatnp/config.hpp"
#include "bsatnp/training.hpp"

using namespace bsatnp;

namespace {

ModelConfig tiny_model() {
  ModelConfig c = ModelConfig::desk();
  c.layers = 1;
  c.block_q = c.block_k = 16;
  return c;
}

TaskStream tiny_stream() {
  TaskStream s;
  s.gp = GpTaskConfig::desk();
  s.gp.n_ctx_min = 8;
  s.gp.n_ctx_max = 16;
  s.gp.n_test = 12;
  return s;
}

TrainConfig short_run(std::size_t steps, std::size_t every) {
  TrainConfig c;
  c.steps = steps;
  c.validate_every = every;
  c.eval_batches = 2;
  c.batch = 4;
  c.lr_peak = 1e-3;
  c.lr_floor = 1e-4;
  return c;
}

ParamStore<double> scalar_store(double p, double g) {
  ParamStore<double> s;
  s.add("p", Tensor<double>({1}, p));
  s.grad(0)[0] = g;
  return s;
}

}  // namespace

// ---- loss and metrics ----

TEST(GaussianNll, UnitSigmaAtMean) {
  Tape<double> tape;
  Tensor<double> f({3, 1}, 0.7);
  const auto loss = gaussian_nll(tape.constant(f), tape.constant(Tensor<double>({3, 1}, 1.0)), f, 1e-3);
  EXPECT_NEAR(loss.value().item(), 0.918939, 1e-6);
}

TEST(GaussianNll, AtTheFloor) {
  Tape<double> tape;
  Tensor<double> f({2, 1}, -0.3);
  const auto loss = gaussian_nll(tape.constant(f), tape.constant(Tensor<double>({2, 1}, 1e-3)), f, 1e-3);
  EXPECT_NEAR(loss.value().item(), 0.5 * std::log(2 * std::numbers::pi * 1e-6), 1e-12);
}

TEST(GaussianNll, MatchesDirectFormula) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  Tensor<double> mu({20, 2}), sigma({20, 2}), f({20, 2});
  double direct = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    mu[i] = n(rng);
    f[i] = n(rng);
    sigma[i] = 0.1 + std::abs(n(rng));
    direct += 0.5 * std::log(2 * std::numbers::pi * sigma[i] * sigma[i]) +
              (f[i] - mu[i]) * (f[i] - mu[i]) / (2 * sigma[i] * sigma[i]);
  }
  Tape<double> tape;
  const auto loss = gaussian_nll(tape.constant(mu), tape.constant(sigma), f, 1e-3);
  EXPECT_NEAR(loss.value().item(), direct / 40, 1e-7);
  EXPECT_NEAR(compute_metrics(mu, sigma, f).nll, direct / 40, 1e-12);
}

TEST(GaussianNll, SigmaBelowFloorIsContractError) {
  Tape<double> tape;
  Tensor<double> f({1, 1});
  EXPECT_THROW(gaussian_nll(tape.constant(f), tape.constant(Tensor<double>({1, 1}, 1e-4)), f, 1e-3), ContractError);
}

TEST(Metrics, PerfectPredictor) {
  Tensor<double> f({4, 1});
  f[1] = 2.0;
  f[3] = -1.0;
  const auto m = compute_metrics(f, Tensor<double>({4, 1}, 0.1), f);
  EXPECT_EQ(m.mae, 0.0);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_EQ(m.cvg95, 1.0);
  EXPECT_EQ(m.count, 4u);
}

TEST(Metrics, HugeSigmaCoversEverything) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 3);
  Tensor<double> f({100, 1});
  for (auto& v : f.values()) v = n(rng);
  const auto m = compute_metrics(Tensor<double>({100, 1}), Tensor<double>({100, 1}, 1e6), f);
  EXPECT_EQ(m.cvg95, 1.0);
  EXPECT_GE(m.rmse, m.mae);
}

TEST(Metrics, CalibratedGaussianCoverage) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  MetricsAccumulator acc;
  for (int i = 0; i < 100000; ++i) {
    const double mu = n(rng), sigma = u(rng);
    acc.add_point(mu, sigma, mu + sigma * n(rng));
  }
  const auto m = acc.result();
  EXPECT_NEAR(m.cvg95, 0.95, 0.01);
  EXPECT_GE(m.rmse, m.mae);
}

TEST(Metrics, EmptyAccumulator) {
  const auto m = MetricsAccumulator{}.result();
  EXPECT_EQ(m.count, 0u);
}

// ---- optimizer ----

TEST(AdamW, FirstStepClosedForm) {
  auto s = scalar_store(1.0, 1.0);
  AdamState<double> st(s);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(s, st, cfg, 0.1);
  EXPECT_NEAR(s.value(0)[0], 0.9, 1e-8);
}

TEST(AdamW, ZeroGradientZeroDecayIsNoOp) {
  auto s = scalar_store(0.37, 0.0);
  AdamState<double> st(s);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(s, st, cfg, 0.1);
  EXPECT_EQ(s.value(0)[0], 0.37);
}

TEST(AdamW, DecayIsDecoupled) {
  auto s = scalar_store(2.0, 0.0);
  AdamState<double> st(s);
  TrainConfig cfg;
  cfg.weight_decay = 0.5;
  adamw_step(s, st, cfg, 0.1);
  EXPECT_DOUBLE_EQ(s.value(0)[0], 2.0 * (1 - 0.1 * 0.5));
}

TEST(AdamW, MismatchedStateIsRejected) {
  auto s = scalar_store(1.0, 1.0);
  AdamState<double> st(s);
  s.add("q", Tensor<double>({2}));
  EXPECT_THROW(adamw_step(s, st, TrainConfig{}, 0.1), ContractError);
}

TEST(CosineLr, EndpointsAndMidpoint) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(cosine_lr(0, cfg), 1e-4);
  EXPECT_NEAR(cosine_lr(cfg.steps, cfg), 2e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(cfg.steps / 2, cfg), 6e-5, 1e-18);
  EXPECT_THROW(cosine_lr(cfg.steps + 1, cfg), ContractError);
  for (std::size_t s = 1; s <= cfg.steps; s += 997) EXPECT_LE(cosine_lr(s, cfg), cosine_lr(s - 1, cfg));
}

TEST(ClipGradNorm, ScalesDownToThreshold) {
  ParamStore<float> s;
  s.add("a", Tensor<float>({5}));
  s.add("b", Tensor<float>({3, 3}));
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0, 3);
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (auto& g : s.grad(i).values()) g = n(rng);
  }
  const double before = global_grad_norm(s);
  ASSERT_GT(before, 0.5);
  EXPECT_DOUBLE_EQ(clip_grad_norm(s, 0.5), before);
  EXPECT_LE(global_grad_norm(s), 0.5 + 1e-6);
  EXPECT_GT(global_grad_norm(s), 0.49);
}

TEST(ClipGradNorm, SmallGradientsUntouched) {
  auto s = scalar_store(1.0, 0.3);
  clip_grad_norm(s, 0.5);
  EXPECT_EQ(s.grad(0)[0], 0.3);
  s.grad(0)[0] = std::nan("");
  EXPECT_THROW(clip_grad_norm(s, 0.5), NumericError);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lr_floor = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.validate_every = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(StreamSeeds, AreDistinct) {
  EXPECT_NE(train_stream_seed(0), validation_stream_seed(0));
  EXPECT_NE(validation_stream_seed(0), test_stream_seed(0));
  EXPECT_NE(train_stream_seed(0), train_stream_seed(1));
  EXPECT_NE(init_seed(0), train_stream_seed(0));
}

// ---- loops ----

TEST(Train, ValidationCadence) {
  const auto r = train(tiny_model(), tiny_stream(), short_run(30, 10));
  std::size_t val = 0, tr = 0;
  for (const auto& row : r.log) (row.split == "val" ? val : tr) += 1;
  EXPECT_EQ(val, 3u);
  EXPECT_EQ(tr, 3u);
  EXPECT_EQ(r.log.back().step, 30u);
}

TEST(Train, FinalStepAlwaysValidates) {
  const auto r = train(tiny_model(), tiny_stream(), short_run(7, 5));
  ASSERT_EQ(r.log.size(), 4u);
  EXPECT_EQ(r.log[1].step, 5u);
  EXPECT_EQ(r.log[3].step, 7u);
}

TEST(Train, FixedSeedIsDeterministic) {
  std::ostringstream a, b;
  TrainOptions oa, ob;
  oa.metrics = &a;
  ob.metrics = &b;
  const auto cfg = short_run(50, 10);
  const auto ra = train(tiny_model(), tiny_stream(), cfg, oa);
  const auto rb = train(tiny_model(), tiny_stream(), cfg, ob);
  EXPECT_EQ(a.str(), b.str());
  for (std::size_t i = 0; i < ra.last.size(); ++i) EXPECT_EQ(ra.last.value(i), rb.last.value(i));
  EXPECT_NE(a.str().find(kMetricsHeader), std::string::npos);

  auto other = cfg;
  other.seed = 1;
  std::ostringstream c;
  TrainOptions oc;
  oc.metrics = &c;
  train(tiny_model(), tiny_stream(), other, oc);
  EXPECT_NE(a.str(), c.str());
}

TEST(Train, BestCheckpointMatchesBestParams) {
  const auto path = std::filesystem::temp_directory_path() / "bsatnp_train_best.ckpt";
  TrainOptions o;
  o.checkpoint_path = path.string();
  const auto r = train(tiny_model(), tiny_stream(), short_run(20, 5), o);
  const auto ck = load_checkpoint(path.string());
  EXPECT_EQ(ck.model, tiny_model());
  for (std::size_t i = 0; i < r.best.size(); ++i) EXPECT_EQ(ck.params.value(i), r.best.value(i));
  double best = 1e300;
  for (const auto& row : r.log) {
    if (row.split == "val") best = std::min(best, row.metrics.nll);
  }
  EXPECT_EQ(best, r.best_val_nll);
  std::filesystem::remove(path);
}

TEST(Train, DivergenceNamesTheStep) {
  auto cfg = short_run(20, 20);
  cfg.lr_peak = cfg.lr_floor = 1e30;
  try {
    train(tiny_model(), tiny_stream(), cfg);
    FAIL() << "expected a numeric failure";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, IdentityTransformChangesNothing) {
  const auto cfg = tiny_model();
  const auto params = init_params<float>(cfg, 3);
  const auto s = tiny_stream();
  const auto a = evaluate(params, cfg, s, 2);
  const auto b = evaluate(params, cfg, s, 2, [](const TaskBatch<double>& b) { return b; });
  EXPECT_EQ(a.nll, b.nll);
  EXPECT_EQ(a.count, 2u * s.gp.batch * 12u);
}

TEST(DeskTraining, LossDropsBelowUntrainedModel) {
  RunConfig rc = RunConfig::desk();
  rc.train.steps = 2000;
  rc.train.validate_every = 2000;
  rc.train.eval_batches = 8;
  const auto r = train(rc.model, rc.stream(), rc.train);
  TaskStream held = rc.stream();
  held.seed = test_stream_seed(rc.train.seed);
  const auto untrained = evaluate(init_params<float>(rc.model, init_seed(rc.train.seed)), rc.model, held, 8);
  const auto trained = evaluate(r.last, rc.model, held, 8);
  EXPECT_LT(trained.nll, untrained.nll);
}
